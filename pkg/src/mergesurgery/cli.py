"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error (including missing artifacts),
2 numerical failure, 3 reproduction-suite trend violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .autodiff import NonFiniteError
from .config import ConfigError, load_config, with_overrides
from .merging import METHODS
from .models import TrainingDivergedError
from .pipeline import MissingArtifactsError, prepare, report, run_merge, run_surgery, summary_text
from .reproduce import SUITES, PreparedCache, run_suite

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_TREND = 0, 1, 2, 3
LOSS_FLAGS = {"l1": "l1", "mse": "mse", "smoothl1": "smooth_l1", "negcos": "neg_cosine"}

log = logging.getLogger("mergesurgery")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured seed list")
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--trim", type=float)
    common.add_argument("--mode", choices=("task", "layer"))
    common.add_argument("--rank", type=int)
    common.add_argument("--loss", choices=sorted(LOSS_FLAGS))
    common.add_argument("--lr", type=float, help="surgery learning rate")
    common.add_argument("--iters", type=int, help="surgery iterations")
    common.add_argument("--batch", type=int, help="surgery batch size")
    common.add_argument("--ratio", type=float, help="visible fraction of unlabeled test data")
    common.add_argument("--regime", choices=("offline", "online"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mergesurgery", description="Model merging with representation surgery on a toy benchmark.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="generate tasks, pretrain, fine-tune")
    sub.add_parser("merge", parents=[common], help="merge fine-tuned encoders")
    sub.add_parser("surgery", parents=[common], help="train surgery modules on a merged model")
    sub.add_parser("report", parents=[common], help="summary table, bias reports, projections")
    rp = sub.add_parser("reproduce", parents=[common], help="run a trend suite")
    rp.add_argument("suite", choices=SUITES)
    return parser


def _run(args) -> int:
    cfg = with_overrides(
        load_config(args.config),
        seed=args.seed, out=args.out, method=args.method, lam=args.lam, trim=args.trim, mode=args.mode,
        rank=args.rank, loss=LOSS_FLAGS.get(args.loss) if args.loss else None, lr=args.lr, iters=args.iters,
        batch=args.batch, ratio=args.ratio, regime=args.regime,
    )
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    if args.command == "prepare":
        for s in seeds:
            prepare(cfg, s)
            log.info("prepared seed %d under %s", s, cfg.out)
    elif args.command == "merge":
        for s in seeds:
            run_merge(cfg, s, cfg.merge.method)
            log.info("merged seed %d with %s", s, cfg.merge.method)
    elif args.command == "surgery":
        for s in seeds:
            _, trace = run_surgery(cfg, s)
            log.info("surgery seed %d: samples per task %s", s, trace.samples_used)
    elif args.command == "report":
        summary = report(cfg, seeds)
        print(summary_text(summary), end="")
    elif args.command == "reproduce":
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(args.seed,))
        result = run_suite(cfg, args.suite, PreparedCache(cfg))
        for name, ok in result.checks.items():
            print(f"[{'PASS' if ok else 'FAIL'}] {args.suite}: {name}")
        if not result.passed:
            return EXIT_TREND
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mergesurgery: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, MissingArtifactsError) as exc:
        print(f"mergesurgery: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NonFiniteError) as exc:
        print(f"mergesurgery: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Run the reproduction suites on shared prepared artifacts and print verdicts.

Seeds are prepared once and reused across suites. Results land in
``<out>/reproduce/<suite>.csv`` with a ``<suite>_verdict.json`` beside each.
"""

import argparse
import json
import sys

from mergesurgery.config import load_config, with_overrides
from mergesurgery.reproduce import SUITES, PreparedCache, run_suite


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--out", default="runs/sweeps")
    p.add_argument("--suites", nargs="+", choices=SUITES, default=list(SUITES))
    args = p.parse_args()
    cfg = with_overrides(load_config(args.config), out=args.out)
    cache = PreparedCache(cfg)
    ok = True
    for suite in args.suites:
        res = run_suite(cfg, suite, cache)
        for name, passed in res.checks.items():
            print(f"[{'PASS' if passed else 'FAIL'}] {suite}: {name}")
        if res.details:
            print("    " + json.dumps(res.details))
        ok &= res.passed
    sys.exit(0 if ok else 3)


if __name__ == "__main__":
    main()

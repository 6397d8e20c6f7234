#!/usr/bin/env python3
"""Prepare, merge with every method, train surgery, and print the summary table."""

import argparse
import logging
import time

from mergesurgery.config import load_config, with_overrides
from mergesurgery.pipeline import run_all, summary_text


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", default="runs/pipeline")
    p.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = with_overrides(load_config(args.config), out=args.out)
    start = time.time()
    summary = run_all(cfg, args.seeds)
    print(summary_text(summary), end="")
    print(f"done in {time.time() - start:.0f}s; artifacts under {cfg.out}")


if __name__ == "__main__":
    main()

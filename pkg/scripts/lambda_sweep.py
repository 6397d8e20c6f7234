#!/usr/bin/env python3
"""Task-arithmetic lambda sweep: mean bias and accuracy per lambda, with and without surgery."""

import argparse
import dataclasses

import numpy as np

from mergesurgery.config import load_config, with_overrides
from mergesurgery.diagnostics import bias_report
from mergesurgery.merging import task_arithmetic, task_vector
from mergesurgery.pipeline import accuracies, build_prepared, surgery_config, train_surgery


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.5, 0.7, 1.0])
    p.add_argument("--iters", type=int, default=300, help="surgery iterations per lambda")
    args = p.parse_args()
    cfg = with_overrides(load_config(args.config))
    prep = build_prepared(cfg, args.seed)
    vectors = [task_vector(th, prep.theta0, t) for t, th in enumerate(prep.individuals)]
    scfg = dataclasses.replace(surgery_config(cfg, args.seed), iterations=args.iters)
    print(f"{'lambda':>7} {'bias':>8} {'acc':>7} {'bias+S':>8} {'acc+S':>7}")
    for lam in args.lambdas:
        merged = task_arithmetic(prep.theta0, vectors, lam)
        bundle, _ = train_surgery(scfg, prep, merged)
        b0 = bias_report(merged, prep.individuals, prep.test_inputs).mean
        b1 = bias_report(merged, prep.individuals, prep.test_inputs, bundle).mean
        a0 = np.mean(accuracies(merged, prep))
        a1 = np.mean(accuracies(merged, prep, bundle))
        print(f"{lam:>7.2f} {b0:>8.4f} {a0:>7.4f} {b1:>8.4f} {a1:>7.4f}")


if __name__ == "__main__":
    main()

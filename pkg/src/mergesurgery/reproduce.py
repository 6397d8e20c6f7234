"""Scaled-down trend experiments, each ending in a pass/fail verdict."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import LOSS_KINDS
from .checkpoint import ParameterMap
from .config import RunConfig
from .diagnostics import bias_report
from .pipeline import Prepared, load_prepared, merge_models, prepare, surgery_config, train_surgery, write_provenance

SUITES = ("bias-ordering", "rank-sweep", "loss-sweep", "ratio-sweep", "online-sweep")
RANKS = (4, 8, 16, 32, 64)
RATIOS = (0.01, 0.05, 0.1, 1.0)
ONLINE_RATIOS = (0.1, 0.5)
RANK_TOLERANCE = 0.02


@dataclass
class SuiteResult:
    suite: str
    rows: list[dict] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    details: dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def write(self, directory: Path, cfg: RunConfig) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.suite}.csv"
        keys = list(self.rows[0]) if self.rows else []
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        verdict = directory / f"{self.suite}_verdict.json"
        verdict.write_text(json.dumps({"suite": self.suite, "passed": self.passed, "checks": self.checks, "details": self.details}, indent=2))
        write_provenance(directory, cfg, [path, verdict])


class PreparedCache:
    """Loads prepared artifacts from disk, preparing any seed that is missing."""

    def __init__(self, cfg: RunConfig, auto_prepare: bool = True):
        self.cfg = cfg
        self.auto_prepare = auto_prepare
        self._preps: dict[int, Prepared] = {}
        self._merged: dict[tuple[int, str], ParameterMap] = {}

    def prepared(self, seed: int) -> Prepared:
        if seed not in self._preps:
            try:
                self._preps[seed] = load_prepared(self.cfg, seed)
            except FileNotFoundError:
                if not self.auto_prepare:
                    raise
                self._preps[seed] = prepare(self.cfg, seed)
        return self._preps[seed]

    def merged(self, seed: int, method: str) -> ParameterMap:
        key = (seed, method)
        if key not in self._merged:
            self._merged[key] = merge_models(self.cfg, self.prepared(seed), method)[0]
        return self._merged[key]


def _seed_mean(rows, key, value):
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def bias_ordering(cfg: RunConfig, cache: PreparedCache, res: SuiteResult) -> SuiteResult:
    for s in cfg.seeds:
        prep = cache.prepared(s)
        for m in ("avg", "task-arith", "ties", "adamerging"):
            rep = bias_report(cache.merged(s, m), prep.individuals, prep.test_inputs, method=m, seed=s)
            res.rows.append({"seed": s, "method": m, "mean_bias": rep.mean})
    means = _seed_mean(res.rows, "method", "mean_bias")
    res.details["seed_mean_bias"] = means
    res.checks["adamerging <= task-arith"] = means["adamerging"] <= means["task-arith"]
    res.checks["task-arith <= avg"] = means["task-arith"] <= means["avg"]
    return res


def _surgery_run(cfg, cache, seed, method, **overrides):
    prep = cache.prepared(seed)
    scfg = dataclasses.replace(surgery_config(cfg, seed), **overrides)
    merged = cache.merged(seed, method)
    bundle, trace = train_surgery(scfg, prep, merged)
    before = bias_report(merged, prep.individuals, prep.test_inputs, seed=seed).mean
    after = bias_report(merged, prep.individuals, prep.test_inputs, bundle, seed=seed).mean
    return trace, before, after


def rank_sweep(cfg: RunConfig, cache: PreparedCache, res: SuiteResult) -> SuiteResult:
    """Final surgery objective (full visible data, summed over tasks) per rank."""
    for s in cfg.seeds:
        for r in RANKS:
            trace, before, after = _surgery_run(cfg, cache, s, "task-arith", rank=r, regime="offline")
            res.rows.append({
                "seed": s, "rank": r,
                "objective_initial": float(np.sum(trace.objective_initial)),
                "objective_final": float(np.sum(trace.objective_final)),
                "bias_before": before, "bias_after": after,
            })
    means = _seed_mean(res.rows, "rank", "objective_final")
    res.details["seed_mean_objective"] = means
    for a, b in zip(RANKS, RANKS[1:]):
        res.checks[f"objective(r={b}) <= objective(r={a}) * {1 + RANK_TOLERANCE}"] = means[b] <= means[a] * (1 + RANK_TOLERANCE)
    return res


def loss_gap(kind: str, value: float, n_tasks: int) -> float:
    """Distance of a summed per-task loss from its optimum (neg_cosine bottoms out at -1 per task)."""
    return value + n_tasks if kind == "neg_cosine" else value


def loss_sweep(cfg: RunConfig, cache: PreparedCache, res: SuiteResult) -> SuiteResult:
    for s in cfg.seeds:
        for kind in LOSS_KINDS:
            trace, before, after = _surgery_run(cfg, cache, s, "task-arith", loss=kind, regime="offline")
            init, final = float(np.sum(trace.objective_initial)), float(np.sum(trace.objective_final))
            n = len(trace.objective_initial)
            ratio = loss_gap(kind, final, n) / loss_gap(kind, init, n)
            res.rows.append({
                "seed": s, "loss": kind, "objective_initial": init, "objective_final": final,
                "final_over_initial": ratio, "bias_before": before, "bias_after": after,
            })
            res.checks[f"seed {s} {kind}: final < 0.5 * initial"] = ratio < 0.5
    return res


def ratio_sweep(cfg: RunConfig, cache: PreparedCache, res: SuiteResult) -> SuiteResult:
    for s in cfg.seeds:
        for ratio in RATIOS:
            trace, before, after = _surgery_run(cfg, cache, s, "adamerging", ratio=ratio, regime="offline")
            res.rows.append({"seed": s, "ratio": ratio, "samples": trace.samples_used[0], "bias_before": before, "bias_after": after})
    means = _seed_mean(res.rows, "ratio", "bias_after")
    res.details["seed_mean_bias"] = means
    res.checks["bias(1.0) <= bias(0.1)"] = means[1.0] <= means[0.1]
    res.checks["bias(0.1) <= bias(0.01)"] = means[0.1] <= means[0.01]
    return res


def online_sweep(cfg: RunConfig, cache: PreparedCache, res: SuiteResult) -> SuiteResult:
    for s in cfg.seeds:
        for ratio in ONLINE_RATIOS:
            trace, before, after = _surgery_run(cfg, cache, s, "adamerging", ratio=ratio, regime="online")
            res.rows.append({"seed": s, "ratio": ratio, "samples": trace.samples_used[0], "bias_before": before, "bias_after": after})
    after = _seed_mean(res.rows, "ratio", "bias_after")
    before = _seed_mean(res.rows, "ratio", "bias_before")
    res.details["seed_mean_bias"] = after
    res.checks["bias(0.5) <= bias(0.1)"] = after[0.5] <= after[0.1]
    res.checks["bias after <= bias before"] = all(after[r] <= before[r] for r in ONLINE_RATIOS)
    return res


RUNNERS: dict[str, Callable[[RunConfig, PreparedCache, SuiteResult], SuiteResult]] = {
    "bias-ordering": bias_ordering,
    "rank-sweep": rank_sweep,
    "loss-sweep": loss_sweep,
    "ratio-sweep": ratio_sweep,
    "online-sweep": online_sweep,
}


def run_suite(cfg: RunConfig, suite: str, cache: PreparedCache | None = None, write: bool = True) -> SuiteResult:
    if suite not in RUNNERS:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    cache = cache or PreparedCache(cfg)
    result = SuiteResult(suite)
    try:
        RUNNERS[suite](cfg, cache, result)
    except Exception as exc:
        result.checks["completed"] = False
        result.details["aborted"] = f"{type(exc).__name__}: {exc}"
        if write:
            result.write(Path(cfg.out) / "reproduce", cfg)
        raise
    if write:
        result.write(Path(cfg.out) / "reproduce", cfg)
    return result

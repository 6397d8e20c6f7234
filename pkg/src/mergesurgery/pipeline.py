"""End-to-end orchestration: prepare, merge, surgery, report.

Output layout under ``cfg.out``::

    seed{s}/prepared/                theta0, individual_{t}, head_{t}, data_{t} (.msrg), data_{t}.csv
    seed{s}/merge/{method}/          merged.msrg, coefficients.json
    seed{s}/merge/{method}/surgery/  bundle.msrg, trace.csv
    summary.json, summary.txt, bias/, projections/

Every directory written also gets ``config.json`` (the effective run config
plus package version) and ``manifest.json`` (sha256 of each file written).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import ParameterMap, file_sha256, load, save
from .config import RunConfig
from .diagnostics import BiasReport, bias_report, project_2d
from .merging import (
    MergeCoefficients,
    adamerge,
    task_arithmetic,
    task_vector,
    ties_merge,
    weight_average,
)
from .models import EncoderSpec, TaskDataset, TaskHead, evaluate, extract_features, finetune, make_tasks, pretrain
from .surgery import (
    SurgeryBundle,
    SurgeryTrace,
    SurgeryTrainConfig,
    new_bundle,
    stream_order,
    train_offline,
    train_online,
)

log = logging.getLogger(__name__)


class MissingArtifactsError(FileNotFoundError):
    def __init__(self, paths: Sequence[Path]):
        self.paths = [str(p) for p in paths]
        super().__init__("missing artifacts: " + ", ".join(self.paths))


@dataclass
class Prepared:
    seed: int
    tasks: list[TaskDataset]
    theta0: ParameterMap
    individuals: list[ParameterMap]
    heads: list[TaskHead]
    pretrain_stats: dict

    @property
    def test_inputs(self) -> list[np.ndarray]:
        return [t.x_test for t in self.tasks]


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out) / f"seed{seed}"


def write_provenance(directory: Path, cfg: RunConfig, files: Sequence[Path], extra: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps({"version": __version__, "config": cfg.to_dict()}, indent=2))
    manifest = {"version": __version__, "files": {p.name: file_sha256(p) for p in files}}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _check_exists(paths: Sequence[Path]) -> None:
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise MissingArtifactsError(missing)


# -- prepare -----------------------------------------------------------------


def build_prepared(cfg: RunConfig, seed: int) -> Prepared:
    m = cfg.model
    spec = EncoderSpec.from_sizes(m.d, m.hidden, m.k, m.layers)
    tasks = make_tasks(seed, cfg.tasks, m.d, m.classes_per_task, m.n_train, m.n_test)
    theta0, _, stats = pretrain(spec, tasks, m.pretrain_steps, seed, lr=m.lr)
    individuals, heads = [], []
    for task in tasks:
        theta_t, head = finetune(theta0, task, m.finetune_steps, seed, batch=m.batch, lr=m.lr, probe_steps=m.probe_steps)
        individuals.append(theta_t)
        heads.append(head)
    return Prepared(seed, tasks, theta0, individuals, heads, stats)


def _dataset_map(task: TaskDataset) -> ParameterMap:
    return ParameterMap(
        [("x_train", task.x_train), ("y_train", task.y_train), ("x_test", task.x_test), ("y_test", task.y_test)],
        {"kind": "dataset", "task": task.task, "classes": task.n_classes},
    )


def prepare(cfg: RunConfig, seed: int) -> Prepared:
    prep = build_prepared(cfg, seed)
    d = seed_dir(cfg, seed) / "prepared"
    d.mkdir(parents=True, exist_ok=True)
    files = [d / "theta0.msrg"]
    save(prep.theta0, files[0])
    for t, (theta_t, head, task) in enumerate(zip(prep.individuals, prep.heads, prep.tasks)):
        for name, pmap in ((f"individual_{t}", theta_t), (f"head_{t}", head.to_map()), (f"data_{t}", _dataset_map(task))):
            save(pmap, d / f"{name}.msrg")
            files.append(d / f"{name}.msrg")
        task.to_csv(d / f"data_{t}.csv")
        files.append(d / f"data_{t}.csv")
    write_provenance(d, cfg, files, {"seed": seed, "tasks": cfg.tasks, "pretrain": prep.pretrain_stats})
    return prep


def load_prepared(cfg: RunConfig, seed: int) -> Prepared:
    d = seed_dir(cfg, seed) / "prepared"
    names = ["theta0.msrg"] + [f"{kind}_{t}.msrg" for t in range(cfg.tasks) for kind in ("individual", "head", "data")]
    _check_exists([d / n for n in names])
    tasks, individuals, heads = [], [], []
    for t in range(cfg.tasks):
        data = load(d / f"data_{t}.msrg")
        tasks.append(
            TaskDataset(
                t,
                int(data.metadata["classes"]),
                np.array(data["x_train"]),
                np.array(data["y_train"]).astype(np.int64),
                np.array(data["x_test"]),
                np.array(data["y_test"]).astype(np.int64),
            )
        )
        individuals.append(load(d / f"individual_{t}.msrg"))
        heads.append(TaskHead.from_map(load(d / f"head_{t}.msrg")))
    manifest = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else {}
    return Prepared(seed, tasks, load(d / "theta0.msrg"), individuals, heads, manifest.get("pretrain", {}))


# -- merge -------------------------------------------------------------------


def merge_models(cfg: RunConfig, prep: Prepared, method: str) -> tuple[ParameterMap, MergeCoefficients, dict]:
    g = cfg.merge
    vectors = [task_vector(th, prep.theta0, t) for t, th in enumerate(prep.individuals)]
    info: dict = {"method": method}
    if method == "avg":
        merged = weight_average(prep.individuals)
        coef = MergeCoefficients("scalar", 1.0 / len(vectors))
    elif method == "task-arith":
        merged = task_arithmetic(prep.theta0, vectors, g.lam)
        coef = MergeCoefficients("scalar", g.lam)
        info["lambda"] = g.lam
    elif method == "ties":
        merged = ties_merge(prep.theta0, vectors, g.lam, g.trim)
        coef = MergeCoefficients("scalar", g.lam)
        info.update({"lambda": g.lam, "trim": g.trim})
    elif method == "adamerging":
        res = adamerge(
            prep.theta0, vectors, prep.test_inputs, prep.heads,
            mode=g.mode, steps=g.steps, lr=g.lr, init=g.init, batch=g.batch, seed=prep.seed,
        )
        merged, coef = res.merged, res.coefficients
        info.update({"mode": g.mode, "steps": g.steps, "lr": g.lr, "init": g.init, "entropy_eval": res.eval_trace})
    else:
        raise ValueError(f"unknown merge method {method!r}")
    return merged, coef, info


def merge_dir(cfg: RunConfig, seed: int, method: str) -> Path:
    return seed_dir(cfg, seed) / "merge" / method


def run_merge(cfg: RunConfig, seed: int, method: str, prep: Prepared | None = None) -> ParameterMap:
    prep = prep or load_prepared(cfg, seed)
    merged, coef, info = merge_models(cfg, prep, method)
    d = merge_dir(cfg, seed, method)
    d.mkdir(parents=True, exist_ok=True)
    save(merged, d / "merged.msrg")
    (d / "coefficients.json").write_text(coef.to_json())
    write_provenance(d, cfg, [d / "merged.msrg", d / "coefficients.json"], {"seed": seed, "merge": info})
    return merged


# -- surgery -----------------------------------------------------------------


def surgery_config(cfg: RunConfig, seed: int) -> SurgeryTrainConfig:
    return dataclasses.replace(cfg.surgery, seed=seed)


def train_surgery(scfg: SurgeryTrainConfig, prep: Prepared, merged: ParameterMap) -> tuple[SurgeryBundle, SurgeryTrace]:
    bundle = new_bundle(merged, prep.heads, scfg.rank, scfg.seed)
    inputs = prep.test_inputs
    if scfg.regime == "online":
        streams = [x[stream_order(len(x), scfg.ratio, scfg.seed, t)] for t, x in enumerate(inputs)]
        return train_online(bundle, prep.individuals, streams, dataclasses.replace(scfg, batch_size=1))
    return train_offline(bundle, prep.individuals, inputs, scfg)


def run_surgery(cfg: RunConfig, seed: int, method: str | None = None, prep: Prepared | None = None) -> tuple[SurgeryBundle, SurgeryTrace]:
    method = method or cfg.merge.method
    d = merge_dir(cfg, seed, method)
    _check_exists([d / "merged.msrg"])
    prep = prep or load_prepared(cfg, seed)
    scfg = surgery_config(cfg, seed)
    bundle, trace = train_surgery(scfg, prep, load(d / "merged.msrg"))
    sd = d / "surgery"
    sd.mkdir(parents=True, exist_ok=True)
    save(bundle.modules_map(), sd / "bundle.msrg")
    trace.to_csv(sd / "trace.csv")
    write_provenance(
        sd, cfg, [sd / "bundle.msrg", sd / "trace.csv"],
        {
            "seed": seed,
            "surgery": dataclasses.asdict(scfg),
            "samples_used": trace.samples_used,
            "objective_initial": trace.objective_initial,
            "objective_final": trace.objective_final,
        },
    )
    return bundle, trace


# -- report ------------------------------------------------------------------


def accuracies(theta: ParameterMap, prep: Prepared, bundle: SurgeryBundle | None = None) -> list[float]:
    out = []
    for t, task in enumerate(prep.tasks):
        module = bundle.modules[t] if bundle is not None else None
        out.append(evaluate(theta, prep.heads[t], task.x_test, task.y_test, module))
    return out


def _stats(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "per_seed": [float(v) for v in arr]}


def report(cfg: RunConfig, seeds: Sequence[int] | None = None) -> dict:
    """Summary over the method grid, with and without surgery, aggregated over seeds."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    root = Path(cfg.out)
    needed = []
    for s in seeds:
        needed.append(seed_dir(cfg, s) / "prepared" / "theta0.msrg")
        for m in cfg.methods:
            needed += [merge_dir(cfg, s, m) / "merged.msrg", merge_dir(cfg, s, m) / "surgery" / "bundle.msrg"]
    _check_exists(needed)
    (root / "bias").mkdir(parents=True, exist_ok=True)
    (root / "projections").mkdir(parents=True, exist_ok=True)
    bias_files: list[Path] = []
    proj_files: list[Path] = []
    per_seed: dict[tuple[str, bool], list[tuple[list[float], BiasReport]]] = {}
    baselines = {"pretrained": [], "individual": []}
    for s in seeds:
        prep = load_prepared(cfg, s)
        baselines["pretrained"].append(accuracies(prep.theta0, prep))
        baselines["individual"].append([
            evaluate(th, h, t.x_test, t.y_test) for th, h, t in zip(prep.individuals, prep.heads, prep.tasks)
        ])
        ind_feats = [extract_features(th, x) for th, x in zip(prep.individuals, prep.test_inputs)]
        for m in cfg.methods:
            merged = load(merge_dir(cfg, s, m) / "merged.msrg")
            modules = SurgeryBundle.modules_from_map(load(merge_dir(cfg, s, m) / "surgery" / "bundle.msrg"))
            bundle = SurgeryBundle(merged, modules, prep.heads)
            for on in (False, True):
                b = bundle if on else None
                rep = bias_report(merged, prep.individuals, prep.test_inputs, b, method=m, seed=s)
                per_seed.setdefault((m, on), []).append((accuracies(merged, prep, b), rep))
                tag = f"seed{s}_{m}_{'surgery' if on else 'plain'}"
                (root / "bias" / f"{tag}.json").write_text(rep.to_json())
                feats = [bundle.features(t, x, surgery=on) for t, x in enumerate(prep.test_inputs)]
                project_2d(feats, ind_feats).to_csv(root / "projections" / f"{tag}.csv")
                bias_files.append(root / "bias" / f"{tag}.json")
                proj_files.append(root / "projections" / f"{tag}.csv")
    rows = []
    for m in cfg.methods:
        for on in (False, True):
            runs = per_seed[(m, on)]
            accs = np.array([a for a, _ in runs])
            rows.append({
                "method": m,
                "surgery": on,
                "task_accuracy": [_stats(accs[:, t]) for t in range(accs.shape[1])],
                "avg_accuracy": _stats(accs.mean(axis=1)),
                "bias": _stats([r.mean for _, r in runs]),
                "bias_reports": [r.to_dict() for _, r in runs],
            })
    summary = {
        "version": __version__,
        "seeds": seeds,
        "projection": "PCA (top-2 components on merged+individual features); stands in for t-SNE",
        "baselines": {k: {"avg_accuracy": _stats(np.mean(v, axis=1))} for k, v in baselines.items()},
        "rows": rows,
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2))
    (root / "summary.txt").write_text(summary_text(summary))
    write_provenance(root / "bias", cfg, bias_files)
    write_provenance(root / "projections", cfg, proj_files)
    write_provenance(root, cfg, [root / "summary.json", root / "summary.txt"])
    return summary


def summary_text(summary: dict) -> str:
    lines = [
        f"seeds: {summary['seeds']}   (mean ± std over seeds)",
        f"{'method':<12} {'surgery':<8} {'avg acc':>16} {'mean bias':>18}",
    ]
    for name, b in summary["baselines"].items():
        a = b["avg_accuracy"]
        lines.append(f"{name:<12} {'-':<8} {a['mean']:>9.4f} ± {a['std']:.4f} {'-':>18}")
    for r in summary["rows"]:
        a, d = r["avg_accuracy"], r["bias"]
        lines.append(
            f"{r['method']:<12} {'w/' if r['surgery'] else 'w/o':<8} {a['mean']:>9.4f} ± {a['std']:.4f} "
            f"{d['mean']:>11.4f} ± {d['std']:.4f}"
        )
    return "\n".join(lines) + "\n"


def run_all(cfg: RunConfig, seeds: Sequence[int] | None = None) -> dict:
    """Prepare, merge every grid method, train surgery for each, and report."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    for s in seeds:
        prep = prepare(cfg, s)
        for m in cfg.methods:
            run_merge(cfg, s, m, prep)
            run_surgery(cfg, s, m, prep)
    return report(cfg, seeds)


def ceil_count(n: int, ratio: float) -> int:
    return math.ceil(ratio * n)

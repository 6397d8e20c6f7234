"""Representation-bias measurement and 2-D projection export.

Projections use exact PCA rather than t-SNE: deterministic and testable.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import DegenerateInputError, DimensionError
from .checkpoint import ParameterMap
from .models import extract_features
from .surgery import SurgeryBundle, apply_surgery


def representation_bias(z_mtl: np.ndarray, z_ind: np.ndarray) -> float:
    """Mean absolute elementwise difference, i.e. L1 distance / (N * k)."""
    a, b = np.asarray(z_mtl, dtype=np.float64), np.asarray(z_ind, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"feature matrices must share an N×k shape, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise DimensionError("representation bias of empty feature matrices")
    return float(np.abs(a - b).sum() / (a.shape[0] * a.shape[1]))


@dataclass
class TaskBias:
    task: int
    d: float
    n: int
    k: int


@dataclass
class BiasReport:
    method: str
    surgery: bool
    seed: int
    per_task: list[TaskBias] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([p.d for p in self.per_task])) if self.per_task else 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "surgery": self.surgery,
            "seed": self.seed,
            "per_task": [asdict(p) for p in self.per_task],
            "mean": self.mean,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [
            f"representation bias  method={self.method}  surgery={'on' if self.surgery else 'off'}  seed={self.seed}",
            f"{'task':>6} {'d':>12} {'n':>7} {'k':>5}",
        ]
        lines += [f"{p.task:>6} {p.d:>12.6f} {p.n:>7} {p.k:>5}" for p in self.per_task]
        lines.append(f"{'mean':>6} {self.mean:>12.6f}")
        return "\n".join(lines)


def bias_report(
    merged: ParameterMap,
    individuals: Sequence[ParameterMap],
    inputs: Sequence[np.ndarray],
    bundle: SurgeryBundle | None = None,
    method: str = "",
    seed: int = 0,
) -> BiasReport:
    if len(individuals) != len(inputs):
        raise ValueError(f"{len(individuals)} individual models but {len(inputs)} input sets")
    if bundle is not None and len(bundle.modules) != len(individuals):
        raise ValueError("surgery bundle does not cover every task")
    report = BiasReport(method or merged.metadata.get("method", "unknown"), bundle is not None, seed)
    for t, (theta_t, x) in enumerate(zip(individuals, inputs)):
        if x is None or len(x) == 0:
            raise ValueError(f"no test inputs for task {t}")
        z = extract_features(merged, x)
        if bundle is not None:
            z = apply_surgery(bundle.modules[t], z)
        z_ind = extract_features(theta_t, x)
        report.per_task.append(TaskBias(t, representation_bias(z, z_ind), len(x), z.shape[1]))
    return report


@dataclass
class ProjectionExport:
    # rows of (task, source, x, y)
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "source", "x", "y"])
            for task, source, x, y in self.rows:
                w.writerow([task, source, repr(x), repr(y)])


def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-2 principal axes of ``points``.

    Returns ``(coords, components, mean)``. Each component's largest-magnitude
    loading is made positive so the result is deterministic.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise DimensionError(f"PCA needs at least 3 points in at least 2 dimensions, got {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    if not np.any(xc):
        raise DegenerateInputError("all points are identical")
    evals, evecs = np.linalg.eigh(xc.T @ xc / len(x))
    comps = evecs[:, np.argsort(evals, kind="stable")[::-1][:2]].T
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    return xc @ comps.T, comps, mean


def project_2d(merged_feats: Sequence[np.ndarray], individual_feats: Sequence[np.ndarray]) -> ProjectionExport:
    """Per task, fit PCA on the union of merged and individual features and project both."""
    out = ProjectionExport()
    for t, (zm, zi) in enumerate(zip(merged_feats, individual_feats)):
        zm, zi = np.asarray(zm), np.asarray(zi)
        if zm.shape != zi.shape:
            raise DimensionError(f"task {t}: feature shapes differ {zm.shape} vs {zi.shape}")
        coords, _, _ = pca_2d(np.concatenate([zm, zi]))
        n = len(zm)
        for source, block in (("merged", coords[:n]), ("individual", coords[n:])):
            out.rows += [(t, source, float(a), float(b)) for a, b in block]
    return out

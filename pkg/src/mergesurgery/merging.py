"""Weight-space merging: averaging, task arithmetic, TIES, AdaMerging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import ParameterMap, assert_compatible
from .models import TaskHead, TrainingDivergedError, encoder_forward, layer_index, spec_of
from .optim import AdamState, adam_step

METHODS = ("avg", "task-arith", "ties", "adamerging")


@dataclass(frozen=True)
class TaskVector:
    task: int
    delta: ParameterMap


@dataclass
class MergeCoefficients:
    mode: str  # "scalar" | "task" | "layer"
    values: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mode == "scalar" and self.values.shape != ():
            raise ValueError("scalar coefficients must be 0-d")
        if self.mode == "task" and self.values.ndim != 1:
            raise ValueError("task-wise coefficients must have shape (T,)")
        if self.mode == "layer" and self.values.ndim != 2:
            raise ValueError("layer-wise coefficients must have shape (T, L)")
        if self.mode not in ("scalar", "task", "layer"):
            raise ValueError(f"unknown coefficient mode {self.mode!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coefficients must be finite")

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "values": self.values.tolist()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MergeCoefficients":
        obj = json.loads(text)
        return cls(obj["mode"], np.asarray(obj["values"], dtype=np.float64))


def task_vector(theta_t: ParameterMap, theta_0: ParameterMap, task: int = -1) -> TaskVector:
    assert_compatible([theta_t, theta_0])
    delta = ParameterMap([(k, theta_t[k] - theta_0[k]) for k in theta_0], {**theta_0.metadata, "kind": "task_vector"})
    return TaskVector(task, delta)


def weight_average(maps: Sequence[ParameterMap]) -> ParameterMap:
    if not maps:
        raise ValueError("weight_average needs at least one map")
    if len(maps) > 1:
        assert_compatible(list(maps))
    ref = maps[0]
    # float64 accumulation keeps the result independent of input order
    out = {k: (np.sum([m[k].astype(np.float64) for m in maps], axis=0) / len(maps)) for k in ref}
    return ref.replace(out, kind="merged", method="avg")


def _check_vectors(theta_0: ParameterMap, vectors: Sequence[TaskVector]) -> None:
    if not vectors:
        raise ValueError("need at least one task vector")
    assert_compatible([theta_0] + [v.delta for v in vectors])


def task_arithmetic(theta_0: ParameterMap, vectors: Sequence[TaskVector], lam: float) -> ParameterMap:
    """theta_0 + lam * sum of task vectors."""
    _check_vectors(theta_0, vectors)
    if not math.isfinite(lam):
        raise ValueError("lambda must be finite")
    out = {}
    for k in theta_0:
        s = np.sum([v.delta[k].astype(np.float64) for v in vectors], axis=0)
        out[k] = theta_0[k] + lam * s
    return theta_0.replace(out, kind="merged", method="task-arith")


def ties_vector(vectors: Sequence[TaskVector], trim_fraction: float) -> dict[str, np.ndarray]:
    """Trim, elect sign, and disjoint-mean a set of task vectors.

    Trimming keeps the ``ceil(trim_fraction * n)`` largest-magnitude entries of
    each whole task vector; equal magnitudes keep the lower flat index. The
    elected sign per coordinate is the side with more surviving total mass,
    positive on ties. Coordinates with no agreeing survivor become 0.
    """
    if not 0.0 < trim_fraction <= 1.0:
        raise ValueError(f"trim_fraction must lie in (0, 1], got {trim_fraction}")
    names = list(vectors[0].delta)
    sizes = [vectors[0].delta[k].size for k in names]
    flat = np.stack([np.concatenate([v.delta[k].astype(np.float64).ravel() for k in names]) for v in vectors])
    n = flat.shape[1]
    keep = min(n, math.ceil(trim_fraction * n))
    trimmed = np.zeros_like(flat)
    for i, row in enumerate(flat):
        order = np.argsort(-np.abs(row), kind="stable")[:keep]
        trimmed[i, order] = row[order]
    pos = np.where(trimmed > 0, trimmed, 0).sum(axis=0)
    neg = -np.where(trimmed < 0, trimmed, 0).sum(axis=0)
    sign = np.where(pos >= neg, 1.0, -1.0)
    agree = (np.sign(trimmed) == sign) & (trimmed != 0)
    count = agree.sum(axis=0)
    merged = np.where(count > 0, np.where(agree, trimmed, 0).sum(axis=0) / np.maximum(count, 1), 0.0)
    out, start = {}, 0
    for k, size in zip(names, sizes):
        out[k] = merged[start:start + size].reshape(vectors[0].delta[k].shape)
        start += size
    return out


def ties_merge(theta_0: ParameterMap, vectors: Sequence[TaskVector], lam: float, trim_fraction: float = 0.2) -> ParameterMap:
    _check_vectors(theta_0, vectors)
    merged = ties_vector(vectors, trim_fraction)
    out = {k: theta_0[k] + lam * merged[k] for k in theta_0}
    return theta_0.replace(out, kind="merged", method="ties")


def _layer_coefficients(coef: MergeCoefficients, n_tasks: int, n_layers: int) -> np.ndarray:
    if coef.mode == "scalar":
        return np.full((n_tasks, n_layers), float(coef.values))
    if coef.mode == "task":
        if coef.values.shape != (n_tasks,):
            raise ValueError(f"expected {n_tasks} task coefficients, got {coef.values.shape}")
        return np.repeat(coef.values[:, None], n_layers, axis=1)
    if coef.values.shape != (n_tasks, n_layers):
        raise ValueError(f"expected ({n_tasks}, {n_layers}) layer coefficients, got {coef.values.shape}")
    return coef.values


def combine(theta_0: ParameterMap, vectors: Sequence[TaskVector], coef: MergeCoefficients) -> ParameterMap:
    """theta_0 + sum_t lambda_t(^l) * tau_t, evaluated without a tape."""
    _check_vectors(theta_0, vectors)
    lam = _layer_coefficients(coef, len(vectors), int(theta_0.metadata["layers"]))
    out = {}
    for k in theta_0:
        l = layer_index(k)
        acc = theta_0[k].astype(np.float64)
        for t, v in enumerate(vectors):
            acc = acc + lam[t, l] * v.delta[k].astype(np.float64)
        out[k] = acc
    return theta_0.replace(out, kind="merged", method="adamerging")


def _merged_on_tape(theta_0, vectors, lam_var, mode: str):
    """Merged parameters as tape nodes so gradients reach the coefficients."""
    out = {}
    for k in theta_0:
        l = layer_index(k)
        acc = theta_0[k]
        for t, v in enumerate(vectors):
            c = ad.take(lam_var, (t,) if mode == "task" else (t, l))
            acc = ad.add(acc, ad.scale(v.delta[k], c))
        out[k] = acc
    return out


def entropy_objective(params, heads: Sequence[TaskHead], inputs: Sequence[np.ndarray], n_layers: int):
    """Mean over tasks of the mean prediction entropy on that task's inputs."""
    terms = []
    for head, x in zip(heads, inputs):
        z = encoder_forward(params, x, n_layers)
        terms.append(ad.entropy(head.logits(z)))
    return ad.scalar_mul(ad.total(terms), 1.0 / len(terms))


@dataclass
class AdaMergeResult:
    merged: ParameterMap
    coefficients: MergeCoefficients
    entropy_trace: list[float] = field(default_factory=list)
    # full-data objective sampled every ``eval_every`` steps, step 0 included
    eval_trace: list[tuple[int, float]] = field(default_factory=list)


def adamerge(
    theta_0: ParameterMap,
    vectors: Sequence[TaskVector],
    inputs: Sequence[np.ndarray],
    heads: Sequence[TaskHead],
    mode: str = "layer",
    steps: int = 500,
    lr: float = 1e-3,
    init: float | np.ndarray = 0.3,
    batch: int = 16,
    seed: int = 0,
    eval_every: int = 50,
) -> AdaMergeResult:
    """Learn task- or layer-wise merging coefficients by entropy minimization.

    ``inputs[t]`` are unlabeled samples for task ``t``, scored with ``heads[t]``.
    Coefficients are unconstrained.
    """
    _check_vectors(theta_0, vectors)
    if mode not in ("task", "layer"):
        raise ValueError(f"mode must be 'task' or 'layer', got {mode!r}")
    if not (len(vectors) == len(inputs) == len(heads)):
        raise ValueError("need one input set and one head per task vector")
    n_tasks, n_layers = len(vectors), spec_of(theta_0).layers
    shape = (n_tasks,) if mode == "task" else (n_tasks, n_layers)
    lam = np.broadcast_to(np.asarray(init, dtype=np.float64), shape).copy()
    inputs = [ad.as_tensor(x) for x in inputs]
    if any(len(x) == 0 for x in inputs):
        raise ValueError("every task needs unlabeled inputs")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA]))
    state = AdamState(lr=lr)
    result = AdaMergeResult(theta_0, MergeCoefficients(mode, lam, trainable=True))

    def full_objective(lam_values):
        merged = combine(theta_0, vectors, MergeCoefficients(mode, lam_values))
        return float(entropy_objective(merged, heads, inputs, n_layers))

    for step in range(steps):
        if eval_every and step % eval_every == 0:
            result.eval_trace.append((step, full_objective(lam)))
        batches = [x[rng.choice(len(x), size=min(batch, len(x)), replace=False)] for x in inputs]
        tape = ad.Tape()
        lam_var = tape.leaf(lam)
        params = _merged_on_tape(theta_0, vectors, lam_var, mode)
        obj = entropy_objective(params, heads, batches, n_layers)
        val = float(obj.value)
        if not math.isfinite(val):
            raise TrainingDivergedError("entropy objective became non-finite")
        result.entropy_trace.append(val)
        (g,) = tape.backward(obj, [lam_var])
        lam = adam_step(state, {"lam": lam}, {"lam": g})["lam"]
    if eval_every:
        result.eval_trace.append((steps, full_objective(lam)))
    coef = MergeCoefficients(mode, lam, trainable=True)
    result.coefficients = coef
    result.merged = combine(theta_0, vectors, coef)
    return result

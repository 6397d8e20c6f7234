"""Representation surgery: task-private low-rank adapters on merged features.

For task ``t`` the adapter computes ``phi(z) = relu(z @ W_down.T) @ W_up.T`` and
the corrected feature is ``z - phi(z)``. Adapters are trained, without labels,
to pull corrected merged-model features toward the individual model's.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, LOSS_KINDS
from .checkpoint import ParameterMap
from .models import TaskHead, TrainingDivergedError, extract_features
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurgeryModule:
    task: int
    w_down: np.ndarray  # r × k
    w_up: np.ndarray  # k × r

    def __post_init__(self):
        r, k = self.w_down.shape
        if r < 1 or self.w_up.shape != (k, r):
            raise DimensionError(f"adapter shapes inconsistent: w_down {self.w_down.shape}, w_up {self.w_up.shape}")

    @property
    def rank(self) -> int:
        return self.w_down.shape[0]

    @property
    def k(self) -> int:
        return self.w_down.shape[1]

    @property
    def n_params(self) -> int:
        return self.w_down.size + self.w_up.size


def init_module(task: int, k: int, rank: int, rng: np.random.Generator) -> SurgeryModule:
    """``W_down ~ U(+-1/sqrt(k))`` and ``W_up = 0``, so the module starts as the identity."""
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be positive")
    bound = 1.0 / math.sqrt(k)
    w_down = rng.uniform(-bound, bound, size=(rank, k)).astype(np.float32)
    return SurgeryModule(task, w_down, np.zeros((k, rank), dtype=np.float32))


def adapter_forward(module: SurgeryModule, z, w_down=None, w_up=None):
    """Adapter output for a batch ``z`` (N×k). ``w_down``/``w_up`` override the stored weights (tape leaves)."""
    w_down = module.w_down if w_down is None else w_down
    w_up = module.w_up if w_up is None else w_up
    zv = z.value if isinstance(z, ad.Var) else np.asarray(z)
    if zv.ndim != 2 or zv.shape[1] != module.k:
        raise DimensionError(f"features of shape {zv.shape} do not match adapter width {module.k}")
    wd_t = ad.transpose(w_down)
    wu_t = ad.transpose(w_up)
    return ad.matmul(ad.relu(ad.matmul(z, wd_t)), wu_t)


def apply_surgery(module: SurgeryModule, z, w_down=None, w_up=None):
    return ad.sub(z, adapter_forward(module, z, w_down, w_up))


def surgery_param_count(k: int, r: int, n_tasks: int) -> int:
    if min(k, r, n_tasks) < 1:
        raise ValueError("k, r and the task count must be positive")
    return 2 * k * r * n_tasks


@dataclass(frozen=True)
class SurgeryTrainConfig:
    loss: str = "l1"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    iterations: int = 1000
    batch_size: int = 16
    rank: int = 16
    ratio: float = 1.0
    regime: str = "offline"
    seed: int = 0
    cache_targets: bool = False

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.regime not in ("offline", "online"):
            raise ValueError(f"regime must be offline or online, got {self.regime!r}")
        if not (self.lr > 0 and self.iterations >= 0 and self.batch_size >= 1 and self.rank >= 1):
            raise ValueError("lr, batch size and rank must be positive; iterations non-negative")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class SurgeryBundle:
    merged: ParameterMap
    modules: list[SurgeryModule]
    heads: list[TaskHead]

    def __post_init__(self):
        if len(self.modules) != len(self.heads):
            raise ValueError("need exactly one module and one head per task")
        if len({m.rank for m in self.modules}) > 1:
            raise ValueError("all modules in a bundle must share one rank")

    def features(self, task: int, inputs: np.ndarray, surgery: bool = True) -> np.ndarray:
        z = extract_features(self.merged, inputs)
        return apply_surgery(self.modules[task], z) if surgery else z

    def modules_map(self) -> ParameterMap:
        items = []
        for m in self.modules:
            items += [(f"surgery/{m.task}/w_down", m.w_down), (f"surgery/{m.task}/w_up", m.w_up)]
        return ParameterMap(items, {"kind": "surgery", "rank": self.modules[0].rank if self.modules else 0})

    @staticmethod
    def modules_from_map(pmap: ParameterMap) -> list[SurgeryModule]:
        tasks = sorted({int(name.split("/")[1]) for name in pmap})
        return [SurgeryModule(t, np.array(pmap[f"surgery/{t}/w_down"]), np.array(pmap[f"surgery/{t}/w_up"])) for t in tasks]


def new_bundle(merged: ParameterMap, heads: Sequence[TaskHead], rank: int, seed: int) -> SurgeryBundle:
    k = int(merged.metadata["k"])
    modules = []
    for h in heads:
        rng = np.random.default_rng(np.random.SeedSequence([seed, h.task, 0x5106]))
        modules.append(init_module(h.task, k, rank, rng))
    return SurgeryBundle(merged, modules, list(heads))


@dataclass
class SurgeryTrace:
    # one row per iteration: per-task batch losses
    per_task: list[list[float]] = field(default_factory=list)
    samples_used: list[int] = field(default_factory=list)
    objective_initial: list[float] = field(default_factory=list)
    objective_final: list[float] = field(default_factory=list)

    def to_csv(self, path: str | os.PathLike) -> None:
        n = len(self.per_task[0]) if self.per_task else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"task{t}" for t in range(n)] + ["mean"])
            for i, row in enumerate(self.per_task):
                w.writerow([i] + [repr(v) for v in row] + [repr(float(np.mean(row)))])


def subsample(n: int, ratio: float, seed: int, task: int) -> np.ndarray:
    """First ceil(ratio * n) entries of a seeded permutation of range(n)."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, task, 0x5AB])).permutation(n)
    return perm[: math.ceil(ratio * n)]


def _task_loss(kind: str, pred, target: np.ndarray, task: int):
    if kind == "neg_cosine":
        ok = np.linalg.norm(target, axis=1) > 0
        if not np.all(ok):
            log.warning("task %d: skipping %d zero-norm target rows", task, int((~ok).sum()))
            if not np.any(ok):
                return None
            pred = ad.take_rows(pred, np.flatnonzero(ok))
            target = target[ok]
    return ad.loss(kind, pred, target)


def surgery_objective(bundle: SurgeryBundle, individuals: Sequence[ParameterMap], inputs: Sequence[np.ndarray], loss: str = "l1") -> list[float]:
    """Per-task loss between corrected merged features and individual features over full input sets."""
    out = []
    for t, (theta_t, x) in enumerate(zip(individuals, inputs)):
        zhat = bundle.features(t, x)
        val = _task_loss(loss, zhat, extract_features(theta_t, x), t)
        out.append(0.0 if val is None else float(val))
    return out


def _check(bundle, individuals, inputs):
    if not (len(bundle.modules) == len(individuals) == len(inputs)):
        raise ValueError("need one individual model and one input set per surgery module")
    k = int(bundle.merged.metadata["k"])
    for theta_t in individuals:
        if int(theta_t.metadata["k"]) != k:
            raise DimensionError("individual model feature width differs from merged model")


def _step(bundle, states, batches, targets_fn, kind) -> list[float]:
    """One Adam step per task that has data; tasks never share optimizer state."""
    tape = ad.Tape()
    leaves, terms, row = {}, [], []
    for t, xb in enumerate(batches):
        m = bundle.modules[t]
        if xb is None or len(xb) == 0:
            row.append(float("nan"))
            continue
        wd, wu = tape.leaf(m.w_down), tape.leaf(m.w_up)
        z = extract_features(bundle.merged, xb)
        term = _task_loss(kind, apply_surgery(m, z, wd, wu), targets_fn(t, xb), t)
        if term is None:
            row.append(float("nan"))
            continue
        leaves[t] = (wd, wu)
        terms.append(term)
        row.append(float(term.value))
    if not terms:
        return row
    obj = ad.total(terms)
    if not math.isfinite(float(obj.value)):
        raise TrainingDivergedError("surgery loss became non-finite")
    grads = tape.backward(obj, [v for pair in leaves.values() for v in pair])
    modules = list(bundle.modules)
    for i, (t, (wd, wu)) in enumerate(leaves.items()):
        new = adam_step(states[t], {"down": wd.value, "up": wu.value}, {"down": grads[2 * i], "up": grads[2 * i + 1]})
        modules[t] = SurgeryModule(modules[t].task, new["down"], new["up"])
    bundle.modules = modules
    return row


def _targets(individuals, inputs, cache: bool):
    if not cache:
        return lambda t, xb: extract_features(individuals[t], xb)
    cached = {}

    def fn(t, xb):
        # cache keyed by sample bytes; numerically identical to recomputation
        key = xb.tobytes()
        if key not in cached:
            cached[key] = extract_features(individuals[t], xb)
        return cached[key]

    return fn


def train_offline(
    bundle: SurgeryBundle,
    individuals: Sequence[ParameterMap],
    inputs: Sequence[np.ndarray],
    cfg: SurgeryTrainConfig,
) -> tuple[SurgeryBundle, SurgeryTrace]:
    """Jointly train every task's adapter on a fixed visible fraction of its inputs.

    Each iteration draws one batch per task (without replacement within the
    batch) and takes an Adam step on the summed per-task losses. Only the
    adapters change; the merged encoder, individual models and heads are read.
    """
    _check(bundle, individuals, inputs)
    bundle = SurgeryBundle(bundle.merged, list(bundle.modules), list(bundle.heads))
    data = []
    for t, x in enumerate(inputs):
        x = ad.as_tensor(x)
        sub = x[subsample(len(x), cfg.ratio, cfg.seed, t)] if len(x) else x
        if len(sub) == 0:
            raise ValueError(f"task {t} has no data after subsampling")
        data.append(sub)
    trace = SurgeryTrace(samples_used=[len(x) for x in data])
    trace.objective_initial = surgery_objective(bundle, individuals, data, cfg.loss)
    rngs = [np.random.default_rng(np.random.SeedSequence([cfg.seed, t, 0xBA7C])) for t in range(len(data))]
    states = [AdamState(lr=cfg.lr, betas=cfg.betas) for _ in bundle.modules]
    targets = _targets(individuals, data, cfg.cache_targets)
    for _ in range(cfg.iterations):
        batches = [x[rng.choice(len(x), size=min(cfg.batch_size, len(x)), replace=False)] for x, rng in zip(data, rngs)]
        trace.per_task.append(_step(bundle, states, batches, targets, cfg.loss))
    trace.objective_final = surgery_objective(bundle, individuals, data, cfg.loss)
    return bundle, trace


def stream_order(n: int, ratio: float, seed: int, task: int) -> np.ndarray:
    return subsample(n, ratio, seed, task)


def train_online(
    bundle: SurgeryBundle,
    individuals: Sequence[ParameterMap],
    streams: Sequence[np.ndarray],
    cfg: SurgeryTrainConfig,
) -> tuple[SurgeryBundle, SurgeryTrace]:
    """Single pass over each task's stream, one sample per step.

    ``streams[t]`` is consumed in order; step ``i`` uses sample ``i`` of every
    stream still running. Use :func:`stream_order` to build a visible prefix.
    """
    _check(bundle, individuals, streams)
    bundle = SurgeryBundle(bundle.merged, list(bundle.modules), list(bundle.heads))
    streams = [ad.as_tensor(s) if len(s) else np.zeros((0, 0), np.float32) for s in streams]
    trace = SurgeryTrace(samples_used=[0] * len(streams))
    n_steps = max((len(s) for s in streams), default=0)
    if n_steps == 0:
        return bundle, trace
    states = [AdamState(lr=cfg.lr, betas=cfg.betas) for _ in bundle.modules]
    targets = _targets(individuals, streams, False)
    for i in range(n_steps):
        batches = [s[i:i + 1] if i < len(s) else None for s in streams]
        for t, b in enumerate(batches):
            if b is not None:
                trace.samples_used[t] += 1
        trace.per_task.append(_step(bundle, states, batches, targets, cfg.loss))
    return bundle, trace

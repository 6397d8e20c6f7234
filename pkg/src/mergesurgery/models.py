"""Toy multi-task setup: ReLU MLP encoder, linear task heads, synthetic tasks."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NonFiniteError
from .checkpoint import ParameterMap
from .optim import AdamState, adam_step


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    widths: tuple[int, ...] = (32, 64, 64, 16)

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid encoder widths {self.widths}")

    @classmethod
    def from_sizes(cls, d: int, hidden: int, k: int, layers: int) -> "EncoderSpec":
        if layers < 1:
            raise ValueError("need at least one layer")
        return cls((d,) + (hidden,) * (layers - 1) + (k,))

    @property
    def d(self) -> int:
        return self.widths[0]

    @property
    def k(self) -> int:
        return self.widths[-1]

    @property
    def layers(self) -> int:
        return len(self.widths) - 1


def layer_names(layer: int) -> tuple[str, str]:
    return f"encoder.{layer}.weight", f"encoder.{layer}.bias"


def layer_index(name: str) -> int:
    """Layer number of an encoder parameter name."""
    parts = name.split(".")
    if len(parts) != 3 or parts[0] != "encoder":
        raise ValueError(f"not an encoder parameter: {name!r}")
    return int(parts[1])


def spec_of(theta: ParameterMap) -> EncoderSpec:
    n = int(theta.metadata["layers"])
    widths = [theta[layer_names(0)[0]].shape[0]] + [theta[layer_names(i)[0]].shape[1] for i in range(n)]
    return EncoderSpec(tuple(widths))


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> ParameterMap:
    items = []
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths, spec.widths[1:])):
        w, b = layer_names(i)
        items.append((w, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))))
        items.append((b, np.zeros(fan_out)))
    return ParameterMap(items, {"kind": "encoder", "k": spec.k, "layers": spec.layers})


def encoder_forward(params: Mapping, x, n_layers: int):
    """Encoder output (the representation fed to heads). ReLU between layers, none after the last."""
    h = x
    for i in range(n_layers):
        w, b = layer_names(i)
        h = ad.add_bias(ad.matmul(h, params[w]), params[b])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def extract_features(theta: ParameterMap, inputs: np.ndarray) -> np.ndarray:
    spec = spec_of(theta)
    x = ad.as_tensor(inputs)
    if x.ndim != 2 or x.shape[1] != spec.d:
        raise DimensionError(f"inputs of shape {x.shape} do not match encoder input width {spec.d}")
    if x.shape[0] == 0:
        return np.zeros((0, spec.k), dtype=np.float32)
    return encoder_forward(theta, x, spec.layers)


@dataclass(frozen=True)
class TaskHead:
    task: int
    weight: np.ndarray  # k × c
    bias: np.ndarray  # c

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"head shapes inconsistent: {self.weight.shape}, {self.bias.shape}")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, z):
        return head_logits(z, self.weight, self.bias)

    def to_map(self) -> ParameterMap:
        return ParameterMap([("head.weight", self.weight), ("head.bias", self.bias)], {"kind": "head", "task": self.task})

    @classmethod
    def from_map(cls, pmap: ParameterMap) -> "TaskHead":
        return cls(int(pmap.metadata["task"]), np.array(pmap["head.weight"]), np.array(pmap["head.bias"]))


def head_logits(z, weight, bias):
    """Linear classifier on L2-normalized features, as with CLIP-style heads."""
    return ad.add_bias(ad.matmul(ad.normalize_rows(z), weight), bias)


def init_head(task: int, k: int, c: int, rng: np.random.Generator) -> TaskHead:
    w = rng.normal(0.0, np.sqrt(1.0 / k), size=(k, c)).astype(np.float32)
    return TaskHead(task, w, np.zeros(c, dtype=np.float32))


@dataclass(frozen=True)
class TaskDataset:
    task: int
    n_classes: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.x_train, self.y_train
        if name == "test":
            return self.x_test, self.y_test
        raise ValueError(f"unknown split {name!r}")

    def to_csv(self, path: str | os.PathLike) -> None:
        """One row per sample: split, features..., label."""
        d = self.x_train.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split"] + [f"x{i}" for i in range(d)] + ["label"])
            for split in ("train", "test"):
                x, y = self.split(split)
                for row, label in zip(x, y):
                    w.writerow([split] + [repr(float(v)) for v in row] + [int(label)])


def make_tasks(
    seed: int,
    n_tasks: int,
    d: int,
    classes_per_task: int,
    n_train: int = 400,
    n_test: int = 400,
    latent: int = 8,
    modes_per_class: int = 3,
    spread: float = 1.5,
    noise: float = 1.0,
    shared: float = 0.3,
) -> list[TaskDataset]:
    """Gaussian-mixture classification tasks that share one input manifold.

    Every task draws latent points from class-conditional mixtures, applies
    its own random rotation and offset in latent space, and maps through a
    projection shared by all tasks. The shared projection is what lets one
    pretrained encoder transfer across tasks.
    """
    if n_tasks < 2:
        raise ValueError("need at least two tasks")
    if min(d, classes_per_task, latent, modes_per_class) < 1 or classes_per_task < 2:
        raise ValueError("degenerate task sizes")
    if n_train < classes_per_task or n_test < classes_per_task:
        raise ValueError("each split needs at least one sample per class")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    mixing = rng.normal(0.0, 1.0 / np.sqrt(latent), size=(latent, d))
    tasks = []
    for t in range(n_tasks):
        rot, _ = np.linalg.qr(rng.normal(size=(latent, latent)))
        basis, _ = np.linalg.qr(rng.normal(size=(d, latent)))
        proj = shared * mixing + (1.0 - shared) * basis.T * np.sqrt(d / latent)
        offset = rng.normal(0.0, 0.5, size=latent)
        centers = rng.normal(0.0, spread, size=(classes_per_task, modes_per_class, latent))

        def sample(n):
            labels = np.arange(n) % classes_per_task
            rng.shuffle(labels)
            modes = rng.integers(0, modes_per_class, size=n)
            u = centers[labels, modes] + noise * rng.normal(size=(n, latent))
            x = (u @ rot.T + offset) @ proj
            return ad.as_tensor(x), labels.astype(np.int64)

        xtr, ytr = sample(n_train)
        xte, yte = sample(n_test)
        tasks.append(TaskDataset(t, classes_per_task, xtr, ytr, xte, yte))
    return tasks


def _encoder_params(theta: ParameterMap) -> dict[str, np.ndarray]:
    return {k: np.array(v) for k, v in theta.items()}


def _train(
    params: dict[str, np.ndarray],
    trainable: Sequence[str],
    head_keys: tuple[str, str],
    n_layers: int,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    batch: int,
    lr: float,
    rng: np.random.Generator,
) -> list[float]:
    """Minibatch cross-entropy training, updating ``params`` in place."""
    state = AdamState(lr=lr)
    trace = []
    for _ in range(steps):
        idx = rng.choice(len(x), size=min(batch, len(x)), replace=False)
        tape = ad.Tape()
        leaves = {k: tape.leaf(params[k]) for k in trainable}
        view = {k: leaves.get(k, params[k]) for k in params}
        z = encoder_forward(view, x[idx], n_layers)
        logits = head_logits(z, view[head_keys[0]], view[head_keys[1]])
        try:
            loss = ad.cross_entropy(logits, y[idx])
        except NonFiniteError as exc:
            raise TrainingDivergedError(str(exc)) from exc
        if not np.isfinite(loss.value):
            raise TrainingDivergedError("cross-entropy became non-finite")
        trace.append(float(loss.value))
        grads = tape.backward(loss, [leaves[k] for k in trainable])
        params.update(adam_step(state, {k: params[k] for k in trainable}, dict(zip(trainable, grads))))
    return trace


def _full_ce(params, head_keys, n_layers, x, y) -> float:
    z = encoder_forward(params, x, n_layers)
    return float(ad.cross_entropy(head_logits(z, params[head_keys[0]], params[head_keys[1]]), y))


def pretrain(
    spec: EncoderSpec,
    tasks: Sequence[TaskDataset],
    steps: int,
    seed: int,
    batch: int = 64,
    lr: float = 1e-3,
) -> tuple[ParameterMap, TaskHead, dict]:
    """Shared initialization trained on the pooled train splits.

    The pooled label space is the disjoint union of every task's classes; the
    resulting head is throwaway. Returns ``(theta_0, head, stats)`` where
    ``stats`` holds the pooled loss before and after training.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7]))
    theta = init_encoder(spec, rng)
    offsets = np.cumsum([0] + [t.n_classes for t in tasks])
    x = np.concatenate([t.x_train for t in tasks])
    y = np.concatenate([t.y_train + off for t, off in zip(tasks, offsets)])
    head = init_head(-1, spec.k, int(offsets[-1]), rng)
    keys = ("head.weight", "head.bias")
    params = _encoder_params(theta) | {keys[0]: head.weight, keys[1]: head.bias}
    before = _full_ce(params, keys, spec.layers, x, y)
    if steps == 0:
        return theta, head, {"loss_initial": before, "loss_final": before}
    _train(params, list(params), keys, spec.layers, x, y, steps, batch, lr, rng)
    after = _full_ce(params, keys, spec.layers, x, y)
    theta = theta.replace(params)
    return theta, TaskHead(-1, params[keys[0]], params[keys[1]]), {"loss_initial": before, "loss_final": after}


def finetune(
    theta0: ParameterMap,
    dataset: TaskDataset,
    steps: int,
    seed: int,
    batch: int = 32,
    lr: float = 1e-3,
    probe_steps: int = 300,
    train_encoder: bool = True,
) -> tuple[ParameterMap, TaskHead]:
    """Fit a head on frozen ``theta0`` features, then fine-tune the encoder under it.

    The head stays frozen while the encoder trains, so it remains a valid
    classifier for ``theta0`` and for any merge of fine-tuned encoders.
    ``train_encoder=False`` stops after the probe.
    """
    spec = spec_of(theta0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, dataset.task, 0xF1]))
    head = init_head(dataset.task, spec.k, dataset.n_classes, rng)
    keys = ("head.weight", "head.bias")
    params = _encoder_params(theta0) | {keys[0]: head.weight, keys[1]: head.bias}
    x, y = dataset.x_train, dataset.y_train
    _train(params, list(keys), keys, spec.layers, x, y, probe_steps, batch, lr, rng)
    head = TaskHead(dataset.task, params[keys[0]], params[keys[1]])
    if not train_encoder or steps == 0:
        return theta0, head
    encoder_keys = [k for k in params if k not in keys]
    _train(params, encoder_keys, keys, spec.layers, x, y, steps, batch, lr, rng)
    return theta0.replace(params, kind="finetuned", task=str(dataset.task)), head


def evaluate(theta: ParameterMap, head: TaskHead, inputs: np.ndarray, labels: np.ndarray, module=None) -> float:
    """Argmax accuracy. ``module`` optionally applies representation surgery first."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty split")
    z = extract_features(theta, inputs)
    if module is not None:
        from .surgery import apply_surgery

        z = apply_surgery(module, z)
    pred = np.argmax(head.logits(z), axis=1)
    return float(np.mean(pred == np.asarray(labels)))

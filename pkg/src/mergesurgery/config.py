"""Run configuration.

A config file is a JSON object whose keys mirror :class:`RunConfig`; nested
``model``, ``merge`` and ``surgery`` objects mirror their dataclasses. Any key
may be omitted. Precedence is command-line flag > file > default.

Example::

    {"seeds": [0, 1, 2], "tasks": 8,
     "model": {"d": 32, "hidden": 64, "k": 16, "layers": 3},
     "merge": {"method": "adamerging", "mode": "layer"},
     "surgery": {"rank": 16, "loss": "l1", "iterations": 1000}}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .merging import METHODS
from .surgery import SurgeryTrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    hidden: int = 64
    k: int = 16
    layers: int = 3
    classes_per_task: int = 4
    n_train: int = 400
    n_test: int = 400
    pretrain_steps: int = 300
    probe_steps: int = 300
    finetune_steps: int = 500
    batch: int = 32
    lr: float = 1e-3


@dataclass(frozen=True)
class MergeConfig:
    method: str = "task-arith"
    lam: float = 0.3
    trim: float = 0.2
    mode: str = "layer"
    steps: int = 500
    lr: float = 1e-3
    init: float = 0.3
    batch: int = 16


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    tasks: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    surgery: SurgeryTrainConfig = field(default_factory=SurgeryTrainConfig)
    methods: tuple[str, ...] = METHODS
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        m, g = self.model, self.merge
        if self.tasks < 2:
            raise ConfigError("tasks must be at least 2")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if min(m.d, m.hidden, m.k, m.layers, m.batch) < 1 or m.classes_per_task < 2:
            raise ConfigError("model sizes must be positive")
        if min(m.pretrain_steps, m.probe_steps, m.finetune_steps) < 0 or m.lr <= 0:
            raise ConfigError("training steps must be non-negative and lr positive")
        if m.n_train < m.classes_per_task or m.n_test < m.classes_per_task:
            raise ConfigError("each split needs at least one sample per class")
        if g.method not in METHODS:
            raise ConfigError(f"merge method must be one of {METHODS}, got {g.method!r}")
        if g.mode not in ("task", "layer"):
            raise ConfigError(f"merge mode must be task or layer, got {g.mode!r}")
        if not 0 < g.trim <= 1:
            raise ConfigError("trim must lie in (0, 1]")
        if g.steps < 0 or g.lr <= 0 or g.batch < 1:
            raise ConfigError("invalid AdaMerging optimizer settings")
        for name in self.methods:
            if name not in METHODS:
                raise ConfigError(f"unknown method {name!r} in grid")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _build(cls, data: dict[str, Any], where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict[str, Any]) -> RunConfig:
    data = dict(data)
    nested = {
        "model": (ModelConfig, data.pop("model", {})),
        "merge": (MergeConfig, data.pop("merge", {})),
        "surgery": (SurgeryTrainConfig, data.pop("surgery", {})),
    }
    parts = {name: _build(cls, d or {}, name) for name, (cls, d) in nested.items()}
    top = _build(RunConfig, data, "config")
    return dataclasses.replace(top, **parts).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return from_dict(data)


def with_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Apply command-line overrides; ``None`` means "not given"."""
    top, model, merge, surgery = {}, {}, {}, {}
    mapping = {
        "seed": (top, "seed"), "out": (top, "out"),
        "method": (merge, "method"), "lam": (merge, "lam"), "trim": (merge, "trim"), "mode": (merge, "mode"),
        "rank": (surgery, "rank"), "loss": (surgery, "loss"), "lr": (surgery, "lr"), "iters": (surgery, "iterations"),
        "batch": (surgery, "batch_size"), "ratio": (surgery, "ratio"), "regime": (surgery, "regime"),
    }
    for flag, value in flags.items():
        if value is None:
            continue
        target, key = mapping[flag]
        target[key] = value
    try:
        return dataclasses.replace(
            cfg,
            **top,
            model=dataclasses.replace(cfg.model, **model),
            merge=dataclasses.replace(cfg.merge, **merge),
            surgery=dataclasses.replace(cfg.surgery, **surgery),
        ).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

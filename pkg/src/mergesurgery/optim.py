"""Adam with bias correction, over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, NonFiniteError


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update. Returns new parameter arrays; ``state`` advances in place."""
    if params.keys() != grads.keys():
        raise DimensionError(f"parameter/gradient keys differ: {sorted(params)} vs {sorted(grads)}")
    b1, b2 = state.betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"optimizer state for {name!r} has shape {m.shape}, parameter has {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        new = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = new.astype(p.dtype)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"Adam produced non-finite values for {name!r}")
        out[name] = new
    return out

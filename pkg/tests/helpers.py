"""Finite-difference oracle and small fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from mergesurgery import autodiff as ad
from mergesurgery.checkpoint import ParameterMap

H = 1e-3
REL_TOL = 1e-4


def _at(f, x, i, value):
    old = x[i]
    x[i] = value
    out = np.asarray(f(x), dtype=np.float64).item()
    x[i] = old
    return out


def central_diff(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Fourth-order central differences of scalar ``f`` at float64 ``x``.

    The five-point stencil keeps truncation error near h**4, well under the
    tolerance even where the function curves sharply.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        c = x[i]
        g[i] = (8 * (_at(f, x, i, c + h) - _at(f, x, i, c - h)) - (_at(f, x, i, c + 2 * h) - _at(f, x, i, c - 2 * h))) / (12 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error; ``floor`` keeps exact-zero gradients from dividing roundoff by zero."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), floor)
    return float(num / den)


def tape_grads(build, *values):
    """Evaluate ``build(*vars)`` on a fresh tape and return the leaf gradients."""
    tape = ad.Tape()
    leaves = [tape.leaf(np.asarray(v, dtype=np.float64)) for v in values]
    out = build(*leaves)
    return tape.backward(out, leaves)


def away_from(rng, shape, kinks, margin):
    """Standard-normal draw with every entry at least ``margin`` from each kink."""
    x = rng.normal(size=shape)
    for _ in range(100):
        bad = np.zeros(shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(np.abs(x) - k) < margin if k else np.abs(x) < margin
        if not bad.any():
            return x
        x[bad] = rng.normal(size=int(bad.sum()))
    raise RuntimeError("could not sample away from kinks")


def vec_map(values: dict, **meta) -> ParameterMap:
    return ParameterMap([(k, np.asarray(v, dtype=np.float32)) for k, v in values.items()], meta)

"""Tape-based reverse-mode differentiation over numpy arrays.

Tensors are plain C-contiguous numpy arrays (float32 by default). Every op in
this module accepts either raw arrays or :class:`Var` handles. When no input
is a ``Var`` the op evaluates eagerly and returns an array, so frozen forward
passes and differentiable ones run through the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
SMOOTH_L1_BETA = 1.0
NORM_EPS = 1e-12
LOSS_KINDS = ("l1", "mse", "smooth_l1", "neg_cosine")


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateInputError(ValueError):
    pass


class TapeUsageError(RuntimeError):
    pass


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=dtype))
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    # maps output cotangent -> cotangent for each input (closes over saved activations)
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    is_leaf: bool = False


@dataclass(eq=False)
class Var:
    tape: "Tape"
    index: int
    value: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Tape:
    """Append-only record of operations; inputs always precede their consumers."""

    nodes: list[Node] = field(default_factory=list)

    def leaf(self, value, dtype=None) -> Var:
        value = np.asarray(value)
        value = as_tensor(value, dtype or (value.dtype if value.dtype.kind == "f" else DTYPE))
        self.nodes.append(Node("leaf", (), None, is_leaf=True))
        return Var(self, len(self.nodes) - 1, value)

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Var], vjp) -> Var:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced NaN or Inf")
        for v in inputs:
            if v.tape is not self:
                raise TapeUsageError("inputs recorded on different tapes")
        self.nodes.append(Node(op, tuple(v.index for v in inputs), vjp))
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each leaf in ``wrt``.

        Leaves the loss does not depend on get exact zeros.
        """
        if loss.tape is not self:
            raise TapeUsageError("loss belongs to another tape")
        if loss.value.size != 1:
            raise TapeUsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for i in range(loss.index, -1, -1):
            g = grads.pop(i, None) if not self.nodes[i].is_leaf else grads.get(i)
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for j, gj in zip(node.inputs, node.vjp(g)):
                if gj is None:
                    continue
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        out = []
        for v in wrt:
            if not self.nodes[v.index].is_leaf:
                raise TapeUsageError("gradients are only reported for leaves")
            g = grads.get(v.index)
            out.append(np.zeros_like(v.value) if g is None else np.asarray(g, dtype=v.value.dtype))
        return out


def _unwrap(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    # constants get a leaf node with no trainable meaning; backward just ignores them
    tape.nodes.append(Node("const", (), None))
    return Var(tape, len(tape.nodes) - 1, np.asarray(x))


def _emit(op, value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced NaN or Inf")
        return value
    return tape.record(op, value, [_lift(tape, x) for x in inputs], vjp)


def matmul(a, b):
    av, bv = _unwrap(a), _unwrap(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    out = av @ bv
    return _emit("matmul", out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = _unwrap(a), _unwrap(b)
    if av.shape != bv.shape:
        raise DimensionError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    return _emit("add", av + bv, (a, b), lambda g: (g, g))


def sub(a, b):
    av, bv = _unwrap(a), _unwrap(b)
    if av.shape != bv.shape:
        raise DimensionError(f"sub shape mismatch: {av.shape} vs {bv.shape}")
    return _emit("sub", av - bv, (a, b), lambda g: (g, -g))


def add_bias(x, b):
    """Row-wise bias: ``x`` is N×c, ``b`` has length c."""
    xv, bv = _unwrap(x), _unwrap(b)
    if xv.ndim != 2 or bv.shape != (xv.shape[1],):
        raise DimensionError(f"add_bias shape mismatch: {xv.shape} + {bv.shape}")
    return _emit("add_bias", xv + bv, (x, b), lambda g: (g, g.sum(axis=0)))


def scale(x, s):
    """``x`` times a scalar ``s`` (a 0-d or 1-element tensor)."""
    xv, sv = _unwrap(x), _unwrap(s)
    if np.size(sv) != 1:
        raise DimensionError(f"scale needs a scalar factor, got shape {np.shape(sv)}")
    sv_s = np.reshape(sv, ()).astype(xv.dtype)

    def vjp(g):
        gs = np.asarray(np.sum(g * xv, dtype=np.float64)).astype(np.result_type(sv))
        return g * sv_s, np.reshape(gs, np.shape(sv))

    return _emit("scale", xv * sv_s, (x, s), vjp)


def take(x, idx):
    """Single element of ``x`` as a 0-d tensor."""
    xv = _unwrap(x)

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[idx] = g
        return (gx,)

    return _emit("take", np.asarray(xv[idx]), (x,), vjp)


def relu(x):
    xv = _unwrap(x)
    mask = xv > 0
    return _emit("relu", np.where(mask, xv, 0).astype(xv.dtype), (x,), lambda g: (g * mask,))


def _mean(a: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(np.sum(a, dtype=np.float64) / a.size).astype(dtype)


def loss(kind: str, pred, target):
    """Mean-reduced distance between ``pred`` and ``target``.

    ``l1``, ``mse`` and ``smooth_l1`` average over every element;
    ``neg_cosine`` averages the negative cosine similarity over rows.
    Only ``pred`` receives a gradient.
    """
    pv, tv = _unwrap(pred), np.asarray(_unwrap(target))
    if pv.shape != tv.shape:
        raise DimensionError(f"loss shape mismatch: {pv.shape} vs {tv.shape}")
    if pv.size == 0:
        raise DegenerateInputError("loss over an empty batch")
    dt = pv.dtype
    diff = pv - tv
    n = diff.size
    if kind == "l1":
        val = _mean(np.abs(diff), dt)
        vjp = lambda g: (g * np.sign(diff) / n, None)
    elif kind == "mse":
        val = _mean(diff * diff, dt)
        vjp = lambda g: (g * 2.0 * diff / n, None)
    elif kind == "smooth_l1":
        beta = SMOOTH_L1_BETA
        ad = np.abs(diff)
        quad = ad < beta
        val = _mean(np.where(quad, 0.5 * diff * diff / beta, ad - 0.5 * beta), dt)
        vjp = lambda g: (g * np.where(quad, diff / beta, np.sign(diff)) / n, None)
    elif kind == "neg_cosine":
        if pv.ndim != 2:
            raise DimensionError("neg_cosine expects N×k inputs")
        pn = np.linalg.norm(pv.astype(np.float64), axis=1)
        tn = np.linalg.norm(tv.astype(np.float64), axis=1)
        if np.any(pn == 0) or np.any(tn == 0):
            raise DegenerateInputError("neg_cosine got a zero-norm row")
        dots = np.sum(pv.astype(np.float64) * tv, axis=1)
        cos = dots / (pn * tn)
        rows = pv.shape[0]
        val = np.asarray(-cos.sum() / rows).astype(dt)

        def vjp(g):
            # d cos / d p = t/(|p||t|) - cos * p/|p|^2
            dp = tv / (pn * tn)[:, None] - (cos / pn**2)[:, None] * pv
            return (-(g / rows) * dp).astype(dt), None

    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return _emit(f"loss_{kind}", val, (pred, target), vjp)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def entropy(logits):
    """Mean Shannon entropy of the row-wise softmax of ``logits``."""
    zv = _unwrap(logits)
    if zv.ndim != 2 or zv.shape[0] == 0:
        raise DimensionError(f"entropy expects a non-empty N×c matrix, got {zv.shape}")
    logp = _log_softmax(zv.astype(np.float64))
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    n = zv.shape[0]

    def vjp(g):
        # dH/dz_j = -p_j (log p_j + H)
        dz = -p * (logp + h[:, None])
        return ((g / n) * dz).astype(zv.dtype),

    return _emit("entropy", np.asarray(h.mean()).astype(zv.dtype), (logits,), vjp)


def cross_entropy(logits, labels):
    zv = _unwrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if zv.ndim != 2 or labels.shape != (zv.shape[0],) or zv.shape[0] == 0:
        raise DimensionError(f"cross_entropy shape mismatch: {zv.shape} vs labels {labels.shape}")
    logp = _log_softmax(zv.astype(np.float64))
    n = zv.shape[0]
    rows = np.arange(n)
    val = -logp[rows, labels].mean()

    def vjp(g):
        dz = np.exp(logp)
        dz[rows, labels] -= 1.0
        return ((g / n) * dz).astype(zv.dtype), None

    return _emit("cross_entropy", np.asarray(val).astype(zv.dtype), (logits, labels), vjp)


def total(terms):
    """Sum of scalar tensors."""
    terms = list(terms)
    if not terms:
        raise DegenerateInputError("sum of no terms")
    vals = [_unwrap(t) for t in terms]
    out = np.asarray(np.sum([np.float64(v) for v in vals])).astype(vals[0].dtype)
    return _emit("total", out, tuple(terms), lambda g: tuple(g for _ in terms))


def scalar_mul(x, c: float):
    """Multiply by a Python constant."""
    xv = _unwrap(x)
    return _emit("scalar_mul", (xv * c).astype(xv.dtype), (x,), lambda g: (g * c,))


def transpose(x):
    xv = _unwrap(x)
    if xv.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {xv.shape}")
    return _emit("transpose", np.ascontiguousarray(xv.T), (x,), lambda g: (g.T,))


def take_rows(x, rows):
    xv = _unwrap(x)
    rows = np.asarray(rows, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, rows, g)
        return (gx,)

    return _emit("take_rows", xv[rows], (x,), vjp)


def normalize_rows(x, eps: float = NORM_EPS):
    """Each row divided by its Euclidean norm, clamped below at ``eps``.

    The clamp keeps an all-zero row at zero instead of dividing by zero.
    """
    xv = _unwrap(x)
    if xv.ndim != 2:
        raise DimensionError(f"normalize_rows expects a matrix, got shape {xv.shape}")
    raw = np.sqrt(np.sum(xv.astype(np.float64) ** 2, axis=1, keepdims=True))
    clamped = raw < eps
    norm = np.maximum(raw, eps)
    y = (xv / norm).astype(xv.dtype)

    def vjp(g):
        proj = np.where(clamped, 0.0, np.sum(g * y, axis=1, keepdims=True))
        return ((g - y * proj) / norm).astype(xv.dtype),

    return _emit("normalize_rows", y, (x,), vjp)

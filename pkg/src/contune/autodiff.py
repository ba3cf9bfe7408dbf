"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays (0-, 1- or 2-D). Every op records a
backward closure on a define-by-run tape that is rebuilt each step; the
tape is discarded after ``backward``. Ops validate that finite inputs
produce finite outputs and raise :class:`~contune.errors.NonFiniteError`
otherwise.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
)

EPS_NORM = 1e-12

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus an optional gradient buffer and tape hooks."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small conveniences; the op functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _ensure_finite(out: np.ndarray, op: str):
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def constant(data) -> Tensor:
    """A leaf that never requires gradients."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data
    _ensure_finite(out_data, "add")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad)
        if b.requires_grad:
            _accum(b, out.grad)

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shapes {a.data.shape} vs {b.data.shape}")
    out_data = a.data - b.data
    _ensure_finite(out_data, "sub")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad)
        if b.requires_grad:
            _accum(b, -out.grad)

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data
    _ensure_finite(out_data, "mul")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad * b.data)
        if b.requires_grad:
            _accum(b, out.grad * a.data)

    return _make(out_data, (a, b), backward)


def mul_const(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c
    _ensure_finite(out_data, "mul_const")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad * c)

    return _make(out_data, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return mul_const(a, -1.0)


def smul(s: Tensor, a: Tensor) -> Tensor:
    """Scalar tensor times any-shape tensor."""
    if s.data.shape != ():
        raise DimensionError("smul: first operand must be a scalar tensor")
    out_data = s.data * a.data
    _ensure_finite(out_data, "smul")

    def backward(out):
        if s.requires_grad:
            _accum(s, np.asarray((out.grad * a.data).sum()))
        if a.requires_grad:
            _accum(a, out.grad * s.data)

    return _make(out_data, (s, a), backward)


def sdiv(a: Tensor, s: Tensor) -> Tensor:
    """Any-shape tensor divided by a scalar tensor."""
    if s.data.shape != ():
        raise DimensionError("sdiv: divisor must be a scalar tensor")
    if abs(float(s.data)) <= EPS_NORM:
        raise DegenerateInputError("sdiv: divisor magnitude below 1e-12")
    out_data = a.data / s.data
    _ensure_finite(out_data, "sdiv")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad / s.data)
        if s.requires_grad:
            _accum(s, np.asarray(-(out.grad * a.data).sum() / float(s.data) ** 2))

    return _make(out_data, (a, s), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul: both operands must be 2-D")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner extents differ ({a.data.shape} @ {b.data.shape})"
        )
    out_data = a.data @ b.data
    _ensure_finite(out_data, "matmul")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ out.grad)

    return _make(out_data, (a, b), backward)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(a.data.sum())
    _ensure_finite(out_data, "total")

    def backward(out):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(out.grad)))

    return _make(out_data, (a,), backward)


def mean_of(terms: list[Tensor]) -> Tensor:
    """Mean of a non-empty list of scalar tensors."""
    if not terms:
        raise ContractError("mean_of: empty term list")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return mul_const(acc, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# structure ops


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

    return _make(out_data, (a,), backward)


def cols(a: Tensor, j0: int, j1: int) -> Tensor:
    """Column slice [j0:j1] of a 2-D tensor."""
    out_data = a.data[:, j0:j1].copy()

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, j0:j1] = out.grad
            _accum(a, g)

    return _make(out_data, (a,), backward)


def hstack(parts: list[Tensor]) -> Tensor:
    widths = [p.data.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def backward(out):
        j = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, out.grad[:, j : j + w])
            j += w

    return _make(out_data, tuple(parts), backward)


def vstack(parts: list[Tensor]) -> Tensor:
    heights = [p.data.shape[0] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)

    def backward(out):
        i = 0
        for p, h in zip(parts, heights):
            if p.requires_grad:
                _accum(p, out.grad[i : i + h])
            i += h

    return _make(out_data, tuple(parts), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose: operand must be 2-D")
    out_data = a.data.T.copy()

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad.T)

    return _make(out_data, (a,), backward)


def pick(a: Tensor, i: int) -> Tensor:
    """Element i of a 1-D tensor, as a scalar tensor."""
    if a.data.ndim != 1:
        raise DimensionError("pick: operand must be 1-D")
    out_data = np.asarray(a.data[i])

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[i] = float(out.grad)
            _accum(a, g)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * phi
    _ensure_finite(out_data, "gelu")

    def backward(out):
        if a.requires_grad:
            d = phi + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accum(a, out.grad * d)

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    _ensure_finite(out_data, "exp")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad * out_data)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    _ensure_finite(out_data, "sigmoid")

    def backward(out):
        if a.requires_grad:
            _accum(a, out.grad * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def causal_softmax(scores: Tensor) -> Tensor:
    """Row-wise softmax over the causal prefix of a square score matrix.

    Masking and normalization are fused so no infinite intermediate is
    ever materialized; entries above the diagonal come out exactly zero.
    """
    s = scores.data
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError("causal_softmax: scores must be square")
    n = s.shape[0]
    mask = np.tril(np.ones((n, n)))
    shifted = np.where(mask > 0, s, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted) * mask
    out_data = e / e.sum(axis=1, keepdims=True)
    _ensure_finite(out_data, "causal_softmax")

    def backward(out):
        if scores.requires_grad:
            g = out.grad
            dot = (g * out_data).sum(axis=1, keepdims=True)
            _accum(scores, out_data * (g - dot))

    return _make(out_data, (scores,), backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError("softmax_cross_entropy: logits must be 2-D")
    t = np.asarray(targets, dtype=np.intp)
    if t.ndim != 1 or t.shape[0] != z.shape[0]:
        raise DimensionError("softmax_cross_entropy: one target per logit row")
    v = z.shape[1]
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"softmax_cross_entropy: target outside [0, {v})")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    out_data = np.asarray((logsumexp - shifted[rows, t]).mean())
    _ensure_finite(out_data, "softmax_cross_entropy")

    def backward(out):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[rows, t] -= 1.0
            _accum(logits, p * (float(out.grad) / n))

    return _make(out_data, (logits,), backward)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-D tensors, differentiable in both."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("cosine_sim: operands must be 1-D")
    if a.data.shape != b.data.shape:
        raise DimensionError("cosine_sim: lengths differ")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateInputError("cosine_sim: input norm below 1e-12")
    c = float(a.data @ b.data) / (na * nb)
    out_data = np.asarray(c)

    def backward(out):
        g = float(out.grad)
        if a.requires_grad:
            _accum(a, g * (b.data / (na * nb) - c * a.data / (na * na)))
        if b.requires_grad:
            _accum(b, g * (a.data / (na * nb) - c * b.data / (nb * nb)))

    return _make(out_data, (a, b), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes exactly zero gradient to its input."""
    return Tensor(a.data, requires_grad=False)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(loss: Tensor):
    """Populate grads of every requires_grad leaf ancestor of a scalar loss.

    Leaf (parameter) gradients accumulate across calls until cleared;
    interior tape nodes use per-call buffers that are released afterwards.
    """
    if loss.data.shape != ():
        raise ContractError("backward: loss must be a scalar tensor")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)
            node.grad = None


def finite_diff_grad(f, t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one tensor."""
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    base = t.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(t))
        flat[i] = keep - h
        fm = float(f(t))
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad

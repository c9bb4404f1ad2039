"""Reverse-mode automatic differentiation over numpy-valued nodes.

A Tape records an append-only list of primitive operations; node values are
numpy arrays (scalars are 0-d), so a forward pass through the compensation
and loss pipeline costs a few thousand vectorized ops rather than millions
of scalar ones. Reverse mode is the right shape here: the perturbation has
up to N x 12 leaf scalars feeding one scalar loss.

Every op in this module dispatches on its inputs: with at least one Node
argument it records onto that node's tape, with plain arrays it just
computes, so the same model code serves both the differentiable path and
cheap value-only evaluation.

A tape is confined to a single thread; independent tapes (one per scene or
attack instance) may run concurrently. Derivatives of sigmoid/tanh are
computed in stable form from the *input* so saturated values still pass
sign information to PGD instead of a hard zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class NumericError(RuntimeError):
    """Raised when backward hits an error node or a non-finite gradient."""


class Node:
    """One recorded value. Do not mutate ``value`` after creation."""

    __slots__ = ("tape", "index", "value", "parents", "vjps", "error")

    def __init__(self, tape, index, value, parents, vjps, error=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents  # tuple of parent node indices
        self.vjps = vjps  # tuple of callables, one per parent: g -> dparent
        self.error = error

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"

    # Operator sugar; constants on either side are fine.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)


class Tape:
    """Append-only operation record plus named parameter leaf slots."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.params: Dict[str, Node] = {}
        # derived named nodes (e.g. the polynomial translation table)
        self.aux: Dict[str, Node] = {}

    def _append(self, value, parents=(), vjps=(), error=None) -> Node:
        node = Node(self, len(self.nodes), np.asarray(value, dtype=float), tuple(parents), tuple(vjps), error)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Record an input leaf (gradient is accumulated but unnamed)."""
        return self._append(value)

    def param(self, name: str, value) -> Node:
        """Record a named parameter leaf group (e.g. delta translations)."""
        if name in self.params:
            raise ValueError(f"parameter slot {name!r} already registered")
        node = self._append(value)
        self.params[name] = node
        return node

    def __len__(self):
        return len(self.nodes)


def value_of(x) -> np.ndarray:
    """Numpy value of a Node or array-like."""
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=float)


def _tape_of(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, out, vjp_a: Callable, vjp_b: Callable, error=None):
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a.index)
        vjps.append(vjp_a)
    if isinstance(b, Node):
        parents.append(b.index)
        vjps.append(vjp_b)
    return tape._append(out, parents, vjps, error)


def _unary(x, out, vjp: Callable, error=None):
    if not isinstance(x, Node):
        return out
    return x.tape._append(out, (x.index,), (vjp,), error)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    va, vb = value_of(a), value_of(b)
    out = va + vb
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g, va.shape),
                   lambda g: _unbroadcast(g, vb.shape))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    out = va - vb
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g, va.shape),
                   lambda g: _unbroadcast(-g, vb.shape))


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g * vb, va.shape),
                   lambda g: _unbroadcast(g * va, vb.shape))


def div(a, b):
    va, vb = value_of(a), value_of(b)
    error = "division by zero" if np.any(vb == 0.0) else None
    with np.errstate(divide="ignore", invalid="ignore"):
        out = va / vb
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g / vb, va.shape),
                   lambda g: _unbroadcast(-g * va / (vb * vb), vb.shape),
                   error=error)


def neg(x):
    return _unary(x, -value_of(x), lambda g: -g)


def matvec3(m, x):
    """3x3 matrix times a 3-vector, or batched over rows of an (k, 3) array."""
    vm, vx = value_of(m), value_of(x)
    if vm.shape != (3, 3):
        raise ValueError(f"matvec3 expects a 3x3 matrix, got {vm.shape}")
    if vx.ndim == 1:
        out = vm @ vx
        return _binary(m, x, out,
                       lambda g: np.outer(g, vx),
                       lambda g: vm.T @ g)
    out = vx @ vm.T
    return _binary(m, x, out,
                   lambda g: g.T @ vx,
                   lambda g: g @ vm)


def matmul(a, b):
    """General 2-D matrix product (covers the 3x3 case)."""
    va, vb = value_of(a), value_of(b)
    out = va @ vb
    return _binary(a, b, out,
                   lambda g: g @ vb.T,
                   lambda g: va.T @ g)


def dot(a, b):
    va, vb = value_of(a), value_of(b)
    out = np.dot(va, vb)
    return _binary(a, b, out,
                   lambda g: g * vb,
                   lambda g: g * va)


def asum(x, axis=None):
    vx = value_of(x)
    out = vx.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, vx.shape).copy()
        g_exp = np.expand_dims(g, axis)
        return np.broadcast_to(g_exp, vx.shape).copy()

    return _unary(x, out, vjp)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    vx = np.asarray(value_of(x), dtype=float)
    out = _stable_sigmoid(vx)
    # derivative from the input, not from the (possibly saturated) output
    e = np.exp(-np.abs(vx))
    deriv = e / (1.0 + e) ** 2
    return _unary(x, out, lambda g: g * deriv)


def tanh(x):
    vx = np.asarray(value_of(x), dtype=float)
    out = np.tanh(vx)
    e = np.exp(-2.0 * np.abs(vx))
    deriv = 4.0 * e / (1.0 + e) ** 2
    return _unary(x, out, lambda g: g * deriv)


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    vx = value_of(x)
    error = "log of non-positive value" if np.any(vx <= 0.0) else None
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(vx)
    return _unary(x, out, lambda g: g / vx, error=error)


def sqrt(x):
    vx = value_of(x)
    error = "sqrt of negative value" if np.any(vx < 0.0) else None
    with np.errstate(invalid="ignore"):
        out = np.sqrt(vx)

    def vjp(g):
        # subgradient 0 at the origin keeps norms of coincident points finite
        with np.errstate(divide="ignore"):
            d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return g * d

    return _unary(x, out, vjp, error=error)


def power(x, k: float):
    """Elementwise x**k for a constant exponent k."""
    vx = value_of(x)
    error = None
    if np.any(vx < 0.0) and k != int(k):
        error = "fractional power of negative value"
    with np.errstate(invalid="ignore", divide="ignore"):
        out = vx ** k

    def vjp(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            d = k * vx ** (k - 1.0)
        # subgradient 0 at x=0 for k<1 (e.g. the outer 1/p root at zero)
        d = np.where(np.isfinite(d), d, 0.0)
        return g * d

    return _unary(x, out, vjp, error=error)


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes straight through (clamp-pass)."""
    out = np.clip(value_of(x), lo, hi)
    return _unary(x, out, lambda g: g)


def minimum(a, b):
    """Elementwise min; the subgradient follows the selected branch, ties
    broken toward the first argument."""
    va, vb = value_of(a), value_of(b)
    pick_a = va <= vb
    out = np.where(pick_a, va, vb)
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g * pick_a, np.asarray(va).shape),
                   lambda g: _unbroadcast(g * ~pick_a, np.asarray(vb).shape))


def maximum(a, b):
    va, vb = value_of(a), value_of(b)
    pick_a = va >= vb
    out = np.where(pick_a, va, vb)
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g * pick_a, np.asarray(va).shape),
                   lambda g: _unbroadcast(g * ~pick_a, np.asarray(vb).shape))


def absolute(x):
    vx = value_of(x)
    sign = np.sign(vx)
    return _unary(x, np.abs(vx), lambda g: g * sign)


def concat(parts: Sequence, axis: int = 0):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis) if values else np.zeros((0, 3))
    tape = _tape_of(*parts)
    if tape is None:
        return out
    parents, vjps = [], []
    offset = 0
    for p, v in zip(parts, values):
        width = v.shape[axis]
        if isinstance(p, Node):
            lo = offset

            def vjp(g, lo=lo, width=width):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, lo + width)
                return g[tuple(idx)]

            parents.append(p.index)
            vjps.append(vjp)
        offset += width
    return tape._append(out, parents, vjps)


def take(x, indices):
    """Select rows (axis 0); gradient scatter-adds back."""
    vx = value_of(x)
    idx = np.asarray(indices)
    out = vx[idx]

    def vjp(g):
        grad = np.zeros_like(vx)
        np.add.at(grad, idx, g)
        return grad

    return _unary(x, out, vjp)


def index0(x, i: int):
    """x[i] along axis 0 (one row / one slice)."""
    vx = value_of(x)
    out = vx[i]

    def vjp(g):
        grad = np.zeros_like(vx)
        grad[i] = g
        return grad

    return _unary(x, out, vjp)


def getcol(x, j: int):
    vx = value_of(x)
    out = vx[:, j]

    def vjp(g):
        grad = np.zeros_like(vx)
        grad[:, j] = g
        return grad

    return _unary(x, out, vjp)


def colvec(x):
    """Append a trailing singleton axis: (m,) -> (m, 1)."""
    vx = value_of(x)
    return _unary(x, vx[:, None], lambda g: g[:, 0])


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matvec-3": matvec3,
    "matmul-3": matmul,
    "dot": dot,
    "sum": asum,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "power": power,
    "clamp-pass": clamp,
    "min": minimum,
    "max": maximum,
    "abs": absolute,
    "concat": concat,
    "take": take,
}


def record(tape: Tape, primitive: str, *inputs, **kwargs):
    """Record one primitive by tag onto ``tape`` and return the new node.

    Plain-array inputs are lifted to leaves so the result is always a node
    of the given tape.
    """
    if primitive not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {primitive!r}")
    lifted = []
    for x in inputs:
        if isinstance(x, Node):
            if x.tape is not tape:
                raise ValueError("input node belongs to a different tape")
            lifted.append(x)
        elif np.isscalar(x) or isinstance(x, (np.ndarray, list, tuple)):
            lifted.append(tape.leaf(x) if primitive not in ("power", "clamp-pass") else x)
        else:
            lifted.append(x)
    return _PRIMITIVES[primitive](*lifted, **kwargs)


# ---------------------------------------------------------------------------
# backward


@dataclass
class GradientSet:
    """Gradients for the named parameter slots of one tape.

    ``by_slot`` maps slot name to an array shaped like the leaf. The delta
    view stacks translations and flattened rotation entries as N x 12.
    """

    by_slot: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def d_t(self) -> Optional[np.ndarray]:
        return self.by_slot.get("delta_t")

    @property
    def d_R(self) -> Optional[np.ndarray]:
        return self.by_slot.get("delta_R")

    @property
    def d_beta(self) -> Optional[np.ndarray]:
        return self.by_slot.get("beta")

    @property
    def d_delta(self) -> Optional[np.ndarray]:
        if self.d_t is None and self.d_R is None:
            return None
        d_t = self.d_t
        d_r = self.d_R
        if d_t is None:
            d_t = np.zeros((d_r.shape[0], 3))
        if d_r is None:
            d_r = np.zeros((d_t.shape[0], 3, 3))
        return np.concatenate([d_t, d_r.reshape(len(d_r), 9)], axis=1)


def backward(tape: Tape, loss: Node) -> GradientSet:
    """Reverse accumulation from a scalar loss node.

    Every leaf reachable from the loss gets its exact adjoint; unreachable
    leaves (including unused parameter slots) get exact zeros. Deterministic
    for a fixed tape. Raises NumericError when an error node (div by zero,
    log of non-positive, ...) lies on a path to the loss, or when a slot
    gradient comes out non-finite.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ValueError("loss must be a node of the given tape")
    if loss.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")

    reachable = np.zeros(len(tape.nodes), dtype=bool)
    stack = [loss.index]
    reachable[loss.index] = True
    while stack:
        i = stack.pop()
        node = tape.nodes[i]
        if node.error is not None:
            raise NumericError(f"error node on the loss path: {node.error}")
        for p in node.parents:
            if not reachable[p]:
                reachable[p] = True
                stack.append(p)

    adjoint: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    adjoint[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        if not reachable[i] or adjoint[i] is None:
            continue
        node = tape.nodes[i]
        g = adjoint[i]
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if adjoint[parent] is None:
                adjoint[parent] = np.array(contrib, dtype=float)
            else:
                adjoint[parent] = adjoint[parent] + contrib

    grads: Dict[str, np.ndarray] = {}
    for name, node in tape.params.items():
        g = adjoint[node.index]
        grads[name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=float)
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for slot {name!r}")
    return GradientSet(grads)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    """Outcome of a central-difference gradient check.

    ``max_rel_error`` covers only coordinates where the two one-sided
    differences agree (smooth points); indices flagged as non-smooth are
    excluded and reported in ``excluded``.
    """

    max_rel_error: float
    rel_errors: np.ndarray
    excluded: List[int]
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f, x, h: float = 1e-5) -> GradCheckResult:
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` maps a 1-D parameter vector to ``(value, gradient)``; per
    coordinate the relative error is |analytic - central| / (|central| +
    1e-12). Two classes of coordinate are excluded and reported rather than
    scored: kinks, where the forward and backward one-sided slopes disagree
    (e.g. an active clamp boundary), and coordinates whose derivative sits
    below the finite-difference cancellation floor on both sides, where
    central differences measure only roundoff.
    """
    x = np.asarray(x, dtype=float).ravel()
    val0, grad0 = f(x)
    val0 = float(val0)
    grad0 = np.asarray(grad0, dtype=float).ravel()
    if grad0.shape != x.shape:
        raise ValueError("analytic gradient shape does not match parameters")
    if not np.isfinite(val0) or not np.all(np.isfinite(grad0)):
        raise NumericError("non-finite evaluation in grad_check")

    numeric = np.zeros_like(x)
    rel = np.zeros_like(x)
    excluded: List[int] = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        fp = float(f(x + step)[0])
        fm = float(f(x - step)[0])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        central = (fp - fm) / (2.0 * h)
        d_plus = (fp - val0) / h
        d_minus = (val0 - fm) / h
        gap = abs(d_plus - d_minus)
        numeric[i] = central
        noise = 64.0 * np.finfo(float).eps * max(abs(fp), abs(fm), abs(val0), 1e-30) / (2.0 * h)
        if abs(central) < noise and abs(grad0[i]) < noise:
            excluded.append(i)
            continue
        if gap > 0.5 * abs(central) + 1e-6 * (1.0 + abs(val0)):
            excluded.append(i)
            continue
        rel[i] = abs(grad0[i] - central) / (abs(central) + 1e-12)
    smooth = [i for i in range(x.size) if i not in set(excluded)]
    max_rel = float(np.max(rel[smooth])) if smooth else 0.0
    return GradCheckResult(max_rel, rel, excluded, grad0, numeric)

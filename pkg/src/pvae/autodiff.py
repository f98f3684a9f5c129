"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: every operation on a `Tensor` whose inputs require
gradients records a backward closure, `backward()` walks the recorded graph
once in reverse topological order and accumulates gradients into the leaves.
Scalar losses only; the graph is freed during the backward pass, so there are
no higher-order derivatives.

Shape discipline is strict on purpose: elementwise ops require identical
shapes, the single exception being a scalar (0-d) operand combined with a
tensor.  Anything else (bias rows, covariance centering) goes through an
explicit shape op such as `broadcast_rows`, which keeps every gradient rule
auditable.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(RuntimeError):
    """An operation produced NaN or Inf, or a gradient went non-finite."""


_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _validate(data: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{where}: non-finite values in result")


class Tensor:
    """A numpy array plus an optional gradient and a backward closure.

    `data` is float32 or float64; `grad`, once materialized, always matches
    `data` in shape and dtype.  Gradients are never mutated in place: each
    accumulation rebinds `grad`, so aliasing a propagated array is safe.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(np.float64)
        _validate(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A constant view of this tensor's current values."""
        return Tensor(self.data.copy())

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; scalars are promoted to constants of matching dtype
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self, _dtype_hint=self.dtype)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    if a.data.shape == b.data.shape:
        return
    # scalar-with-tensor is the only implicit broadcast
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a broadcast gradient back onto a scalar operand
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape).astype(grad.dtype)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _reduce_to(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], None], op: str) -> Tensor:
    _validate(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b, *, _dtype_hint=None) -> Tensor:
    a = _as_tensor(a, _dtype_hint or (b.dtype if isinstance(b, Tensor) else None))
    b = _as_tensor(b, a.dtype)
    _check_elementwise(a, b, "add")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b, *, _dtype_hint=None) -> Tensor:
    a = _as_tensor(a, _dtype_hint or (b.dtype if isinstance(b, Tensor) else None))
    b = _as_tensor(b, a.dtype)
    _check_elementwise(a, b, "sub")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.dtype)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        _accumulate(a, g * bd)
        _accumulate(b, g * ad)

    return _result(ad * bd, (a, b), back, "mul")


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    ad, bd = a.data, b.data

    def back(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    return _result(ad @ bd, (a, b), back, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expects a 2-d tensor, got shape {a.data.shape}")

    def back(g):
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), back, "transpose")


def outer_product(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ValueError("outer_product: expects two 1-d tensors")
    if a.data.dtype != b.data.dtype:
        raise ValueError("outer_product: dtype mismatch")
    ad, bd = a.data, b.data

    def back(g):
        _accumulate(a, g @ bd)
        _accumulate(b, g.T @ ad)

    return _result(np.outer(ad, bd), (a, b), back, "outer_product")


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a 1-d tensor into n identical rows; gradient sums back over rows."""
    if v.data.ndim != 1:
        raise ValueError(f"broadcast_rows: expects a 1-d tensor, got shape {v.data.shape}")
    if n < 1:
        raise ValueError("broadcast_rows: n must be >= 1")

    def back(g):
        _accumulate(v, g.sum(axis=0))

    return _result(np.broadcast_to(v.data, (n, v.data.shape[0])).copy(), (v,), back, "broadcast_rows")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    ad = a.data

    def back(g):
        _accumulate(a, g / ad)

    return _result(np.log(ad), (a,), back, "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out_data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g * (0.5 / out_data))

    return _result(out_data, (a,), back, "sqrt")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise ValueError("reciprocal: zero input")
    out_data = 1.0 / a.data

    def back(g):
        _accumulate(a, -g * out_data * out_data)

    return _result(out_data, (a,), back, "reciprocal")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), back, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # piecewise form avoids exp overflow for large |x|
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), back, "sigmoid")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)
    mask = a.data > 0

    def back(g):
        _accumulate(a, g * mask)

    return _result(out_data, (a,), back, "relu")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def back(g):
        _accumulate(a, g * (2.0 * ad))

    return _result(ad * ad, (a,), back, "square")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    mask = a.data > floor

    def back(g):
        _accumulate(a, g * mask)

    return _result(np.maximum(a.data, floor), (a,), back, "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.data.shape

    if axis is None:
        def back(g):
            _accumulate(a, np.broadcast_to(g, shape).copy())

        return _result(np.sum(a.data), (a,), back, "sum")

    def back(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), shape).copy())

    return _result(np.sum(a.data, axis=axis), (a,), back, "sum")


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    if axis is None:
        def back(g):
            _accumulate(a, np.broadcast_to(g / count, shape).copy())

        return _result(np.mean(a.data), (a,), back, "mean")

    def back(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g / count, axis), shape).copy())

    return _result(np.mean(a.data, axis=axis), (a,), back, "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input")
    dt = tensors[0].data.dtype
    if any(t.data.dtype != dt for t in tensors):
        raise ValueError("concat: dtype mismatch")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), back, "concat")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start:stop) of a matrix (or elements of a vector)."""
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ValueError(f"slice_rows: [{start}:{stop}) out of range for {a.data.shape}")
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        _accumulate(a, full)

    return _result(a.data[start:stop].copy(), (a,), back, "slice_rows")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The loss must be scalar.  Each node is visited exactly once, in reverse
    topological order; graph edges are dropped as they are consumed, so a
    second backward through the same graph is not possible.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad (no graph recorded)")

    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        fn = node._backward
        if fn is None:
            continue
        g = node.grad
        if g is None:
            # a recorded node whose output never reached the loss
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError("backward: non-finite gradient")
        fn(g)
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    passed: bool

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check: {status} (max rel err {self.max_rel_error:.3e} "
                f"over {self.checked} elements, tol {self.tol:.1e})")


def grad_check(f, xs, step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare backward gradients of scalar f against central differences.

    `xs` is a Tensor or a sequence of Tensors; `f` is called as `f(*xs)` and
    must be deterministic (freeze any noise draws before checking).  Relative
    error uses |a - b| / max(|a|, |b|, 1e-8).  Failures are reported, not
    raised.
    """
    if isinstance(xs, Tensor):
        xs = (xs,)
    xs = tuple(xs)
    for x in xs:
        # perturbation below writes through a flat view; needs contiguity
        if not x.data.flags.c_contiguous:
            x.data = x.data.copy()
        x.zero_grad()

    out = f(*xs)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ValueError("grad_check: f must return a scalar Tensor")
    backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    max_rel = 0.0
    checked = 0
    for x, a_grad in zip(xs, analytic):
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_plus = f(*xs).item()
                flat[i] = orig - step
                f_minus = f(*xs).item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            ana = float(a_grad.reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            max_rel = max(max_rel, rel)
            checked += 1

    for x in xs:
        x.zero_grad()
    return GradCheckReport(max_rel_error=max_rel, tol=tol, checked=checked,
                           passed=max_rel < tol)

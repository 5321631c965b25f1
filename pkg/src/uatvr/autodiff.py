"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
record their parents and a backward closure; node ids come from a global
counter so creation order is a valid topological order and :meth:`Tensor.backward`
simply walks the reachable nodes by descending id.

Non-differentiable kinks (``max`` and ``clamp``) route the subgradient to the
first maximal index in row-major scan order and to the interior side of a clamp.
"""

from __future__ import annotations

import builtins
import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphError",
    "FDResult",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "take",
    "exp",
    "log",
    "sum",
    "mean",
    "max",
    "clamp",
    "softmax",
    "logsumexp",
    "layer_norm",
    "l2_normalize",
    "gelu",
    "where_rows",
    "attention",
    "finite_difference_check",
]

_ids = itertools.count()
# When not None, kink ops append their branch decisions here (used by the
# finite-difference checker to detect tie-adjacent coordinates).
_kink_trace: list | None = None


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected {expected}, got {actual}")


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, seed=None) -> None:
        """Accumulate gradients into ``.grad`` of every reachable leaf that requires grad."""
        if seed is None:
            if self.data.size != 1:
                raise GraphError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.shape:
            raise ShapeError("backward seed", self.shape, seed.shape)

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.id in nodes or not t.requires_grad:
                continue
            nodes[t.id] = t
            stack.extend(t._parents)

        grads: dict[int, np.ndarray] = {self.id: seed}
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    if _kink_trace is not None:
        _kink_trace.append(inside.copy())
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def where_rows(a: Tensor, keep: np.ndarray) -> Tensor:
    """Zero the entries where ``keep`` (broadcastable bool) is False.

    Uses ``np.where`` rather than a multiply so dropped entries are exactly +0.0.
    """
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, a.data, 0.0).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (_unbroadcast(np.where(keep, g, 0.0), a.shape),), "where")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, (a,), backward, "gelu")


# --- shape ops ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"(..., n, k) @ (..., k, m)", (a.shape, b.shape))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", "broadcastable batch dims", (a.shape, b.shape)) from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", "ndim >= 2", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", tuple(shape), a.shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError("concat", xs[0].shape, x.shape)
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _make(out, xs, backward, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), backward, "slice")


def take(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D ``table`` by integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("take", "2-D table", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take: id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), backward, "take")


# --- reductions --------------------------------------------------------------

def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def max(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max over ``axis``; the subgradient goes to the first maximal index."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    if _kink_trace is not None:
        _kink_trace.append(idx.copy())

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _make(out, (a,), backward, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    # the shift is a constant; the gradient of the composite is exact for any shift
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    s = sum(exp(sub(a, shift)), axis=axis, keepdims=True)
    return reshape(add(log(s), shift), np.squeeze(s.data, axis=axis).shape)


# --- normalization -----------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", (x.shape[-1],), (gain.shape, bias.shape))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row (last axis) by ``max(||row||, eps)``."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    active = norm > eps

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(active, (g - out * proj) / denom, g / denom),)

    return _make(out, (x,), backward, "l2_normalize")


# --- composite ---------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``key_mask`` is a boolean array broadcastable to ``(..., 1, L_k)``; False keys
    receive zero weight.
    """
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k)), Tensor(np.asarray(1.0 / math.sqrt(d), dtype=q.dtype)))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e9).astype(q.dtype)
        scores = add(scores, Tensor(bias))
    return matmul(softmax(scores, axis=-1), v)


# --- graph wrapper -----------------------------------------------------------

class Graph:
    """A named-input computation with explicit forward / backward phases.

    ``fn`` receives keyword Tensors and returns a Tensor or a mapping of
    name to Tensor. Graphs are re-entrant: each :meth:`forward` rebuilds the
    tape, so repeated evaluation on identical inputs is bit-identical.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]]):
        self.fn = fn
        self._inputs: dict[str, Tensor] | None = None
        self._outputs: dict[str, Tensor] | None = None

    def forward(self, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self._inputs = {k: Tensor(np.array(v, copy=True), requires_grad=True) for k, v in inputs.items()}
        out = self.fn(**self._inputs)
        if isinstance(out, Tensor):
            out = {"out": out}
        self._outputs = dict(out)
        return {k: v.data for k, v in self._outputs.items()}

    def backward(self, seed: np.ndarray | None = None, output: str | None = None) -> dict[str, np.ndarray]:
        if self._outputs is None:
            raise GraphError("backward called before forward")
        name = output if output is not None else next(iter(self._outputs))
        for t in self._inputs.values():
            t.grad = None
        self._outputs[name].backward(seed)
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._inputs.items()}


# --- finite differences ------------------------------------------------------

@dataclass
class FDResult:
    max_rel_error: float
    errors: dict[str, np.ndarray] = field(default_factory=dict)
    kinks: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[str, tuple[int, ...]] | None = None


@contextmanager
def _trace_kinks():
    global _kink_trace
    prev, _kink_trace = _kink_trace, []
    try:
        yield _kink_trace
    finally:
        _kink_trace = prev


def _kink_signature(trace: list) -> bytes:
    return b"".join(np.ascontiguousarray(t).tobytes() for t in trace)


def finite_difference_check(
    fn: Callable[..., Tensor],
    point: np.ndarray | Mapping[str, np.ndarray],
    eps: float = 1e-4,
    names: Iterable[str] | None = None,
    order: int = 4,
    coords: Mapping[str, Sequence[tuple[int, ...]]] | None = None,
) -> FDResult:
    """Compare reverse-mode gradients of a scalar ``fn`` with central differences.

    ``point`` is an array (passed positionally) or a mapping of keyword inputs.
    ``order=4`` uses the five-point stencil ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``;
    ``order=2`` the plain ``(f(x+h) - f(x-h)) / 2h``. Per coordinate the error is
    ``|analytic - central| / max(1e-12, |analytic| + |central|)``.

    Coordinates whose perturbation flips a max argmax or a clamp branch are
    reported in ``kinks`` and excluded from ``max_rel_error``. ``coords``
    restricts the check to listed indices per input (unchecked entries stay 0).
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    single = not isinstance(point, Mapping)
    inputs = {"x": np.asarray(point, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    call = (lambda kw: fn(kw["x"])) if single else (lambda kw: fn(**kw))

    def evaluate(values):
        with _trace_kinks() as trace:
            out = call({k: Tensor(v) for k, v in values.items()})
        return float(out.data), _kink_signature(trace)

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    with _trace_kinks() as trace:
        out = call(leaves)
    base_sig = _kink_signature(trace)
    if out.data.size != 1:
        raise ShapeError("finite_difference_check", "scalar output", out.shape)
    out.backward()

    steps = (1, -1) if order == 2 else (2, 1, -1, -2)
    result = FDResult(max_rel_error=0.0)
    check = list(names) if names is not None else list(inputs)
    if coords is not None:
        check = [n for n in check if n in coords]
    for name in check:
        base = inputs[name]
        analytic = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(base)
        errs = np.zeros_like(base)
        for idx in (coords[name] if coords is not None else np.ndindex(base.shape)):
            idx = tuple(int(i) for i in idx)
            values = dict(inputs)
            f = {}
            kink = False
            for s in steps:
                shifted = base.copy()
                shifted[idx] += s * eps
                values[name] = shifted
                f[s], sig = evaluate(values)
                kink |= sig != base_sig
            if kink:
                result.kinks.append((name, idx))
                continue
            if order == 2:
                central = (f[1] - f[-1]) / (2 * eps)
            else:
                central = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * eps)
            a = float(analytic[idx])
            errs[idx] = abs(a - central) / builtins.max(1e-12, abs(a) + abs(central))
            if errs[idx] > result.max_rel_error:
                result.max_rel_error = float(errs[idx])
                result.worst = (name, idx)
        result.errors[name] = errs
    return result

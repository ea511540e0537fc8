"""Reverse-mode autodiff on float32 numpy arrays.

Every differentiable operation records its parents and an adjoint
closure on the result; ``backward()`` walks the recording in reverse
topological order. Values are stored in float32 while matmul and
reductions accumulate in float64, which keeps desk-scale runs
reproducible across machines. Ops never mutate their inputs and every
result is checked for NaN/inf on the spot.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from vistok.errors import NumericFault, ShapeError

_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling loops etc.)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(kind: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NumericFault(f"{kind}: non-finite value in output")


class Tensor:
    """A float32 array plus an optional tape record."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = "leaf"
        self._parents = ()
        self._bwd = None

    # -- construction of op results ------------------------------------
    @classmethod
    def _result(cls, data, op, parents, bwd):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._op = op
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._op = op
            out._parents = ()
            out._bwd = None
        return out

    # -- basic introspection ---------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"expected a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- backward ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError("backward", f"seed must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward: output does not depend on any tracked tensor")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is None:
                continue
            grads = node._bwd(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("division only by python scalars")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand actually had."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.astype(np.float32).reshape(shape)


def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64)


def _mm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """matmul with float64 accumulation, float32 result."""
    return np.matmul(_f64(a), _f64(b)).astype(np.float32)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"need >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    try:
        data = _mm64(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}: {exc}") from None
    _check_finite("matmul", data)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    if bd.ndim == 2:
        # the dense-layer case: both adjoints collapse to single flat gemms
        def bwd(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = gb = None
            if need_a:
                ga = _mm64(g2, bd.T).reshape(ad.shape)
            if need_b:
                gb = _mm64(ad.reshape(-1, ad.shape[-1]).T, g2)
            return ga, gb
    else:
        def bwd(g):
            ga = gb = None
            if need_a:
                ga = _unbroadcast(_mm64(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if need_b:
                gb = _unbroadcast(_mm64(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

    return Tensor._result(data, "matmul", (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.shape} + {b.shape}") from None
    _check_finite("add", data)
    a_shape, b_shape = a.data.shape, b.data.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        return (_unbroadcast(g, a_shape) if need_a else None,
                _unbroadcast(g, b_shape) if need_b else None)

    return Tensor._result(data, "add", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"cannot broadcast {a.shape} * {b.shape}") from None
    _check_finite("mul", data)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return Tensor._result(data, "mul", (a, b), bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    f = np.float32(factor)
    data = a.data * f
    _check_finite("scale", data)

    def bwd(g):
        return (g * f,)

    return Tensor._result(data, "scale", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    _check_finite("exp", data)

    def bwd(g):
        return (g * data,)

    return Tensor._result(data, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    _check_finite("log", data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return Tensor._result(data, "log", (a,), bwd)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data
    _check_finite("square", data)
    ad = a.data

    def bwd(g):
        return (g * ad * np.float32(2.0),)

    return Tensor._result(data, "square", (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(u)
    data = (0.5 * x * (1.0 + th)).astype(np.float32)
    _check_finite("gelu", data)

    def bwd(g):
        sech2 = 1.0 - th * th
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + th) + 0.5 * x * sech2 * du
        return ((g * local).astype(np.float32),)

    return Tensor._result(data, "gelu", (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    data = (e / s).astype(np.float32)
    _check_finite("softmax", data)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((data * (g - inner)).astype(np.float32),)

    return Tensor._result(data, "softmax", (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    sh = (x - m).astype(np.float64)
    lse = np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    data = (sh - lse).astype(np.float32)
    _check_finite("log_softmax", data)
    p = np.exp(data)

    def bwd(g):
        gsum = g.sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((g - p * gsum).astype(np.float32),)

    return Tensor._result(data, "log_softmax", (a,), bwd)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x64 = _f64(a.data)
    mu = x64.mean(axis=axis, keepdims=True)
    var = np.square(x64 - mu).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y64 = (x64 - mu) * inv
    data = y64.astype(np.float32)
    _check_finite("layer_norm", data)

    def bwd(g):
        g64 = _f64(g)
        gm = g64.mean(axis=axis, keepdims=True)
        gym = (g64 * y64).mean(axis=axis, keepdims=True)
        return (((g64 - gm - y64 * gym) * inv).astype(np.float32),)

    return Tensor._result(data, "layer_norm", (a,), bwd)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """x / ||x|| along ``axis``; a zero vector maps to zero."""
    x64 = _f64(a.data)
    norm = np.sqrt(np.square(x64).sum(axis=axis, keepdims=True) + 1e-24)
    y64 = x64 / norm
    data = y64.astype(np.float32)
    _check_finite("l2_normalize", data)

    def bwd(g):
        g64 = _f64(g)
        inner = (g64 * y64).sum(axis=axis, keepdims=True)
        return (((g64 - y64 * inner) / norm).astype(np.float32),)

    return Tensor._result(data, "l2_normalize", (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot view {a.shape} as {shape}") from None
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return Tensor._result(data, "reshape", (a,), bwd)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", f"axes {axes} invalid for shape {a.shape}")
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return Tensor._result(data, "permute", (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._result(data, "concat", tuple(tensors), bwd)


def _normalize_key(key, shape):
    """Turn indexing into a tuple of slices plus the axes to squeeze."""
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise ShapeError("slice", f"too many indices for shape {shape}")
    slices = []
    squeeze = []
    for ax, k in enumerate(key):
        if isinstance(k, int):
            n = shape[ax]
            if k < 0:
                k += n
            if not 0 <= k < n:
                raise ShapeError("slice", f"index {k} out of range for axis {ax} of {shape}")
            slices.append(slice(k, k + 1))
            squeeze.append(ax)
        elif isinstance(k, slice):
            slices.append(k)
        else:
            raise ShapeError("slice", f"unsupported index {k!r}")
    while len(slices) < len(shape):
        slices.append(slice(None))
    return tuple(slices), tuple(squeeze)


def slice_(a: Tensor, key) -> Tensor:
    slices, squeeze = _normalize_key(key, a.data.shape)
    data = a.data[slices]
    if squeeze:
        data = data.reshape(tuple(n for i, n in enumerate(data.shape) if i not in squeeze))
    old_shape = a.data.shape
    kept = a.data[slices].shape

    def bwd(g):
        out = np.zeros(old_shape, dtype=np.float32)
        out[slices] = g.reshape(kept)
        return (out,)

    return Tensor._result(data, "slice", (a,), bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-d table; gradient scatters back with repeats summed."""
    if table.ndim != 2:
        raise ShapeError("gather_rows", f"table must be 2-d, got {table.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows", f"indices must be integers, got {idx.dtype}")
    k = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ShapeError("gather_rows", f"index out of range for table with {k} rows")
    data = table.data[idx]
    tshape = table.data.shape
    d = tshape[1]

    def bwd(g):
        out = np.zeros(tshape, dtype=np.float32)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, d))
        return (out,)

    return Tensor._result(data, "gather_rows", (table,), bwd)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    m = np.asarray(mask, dtype=bool)
    try:
        mb = np.broadcast_to(m, a.data.shape)
    except ValueError:
        raise ShapeError("masked_fill", f"mask {m.shape} does not broadcast to {a.shape}") from None
    data = np.where(mb, np.float32(value), a.data)
    _check_finite("masked_fill", data)

    def bwd(g):
        return (np.where(mb, np.float32(0.0), g),)

    return Tensor._result(data, "masked_fill", (a,), bwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    _check_finite("reduce_sum", data)
    in_shape = a.data.shape
    axes = _norm_axes(axis, a.ndim)

    def bwd(g):
        return (_spread(g, in_shape, axes, keepdims),)

    return Tensor._result(data, "reduce_sum", (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    _check_finite("reduce_mean", data)
    in_shape = a.data.shape
    inv = np.float32(1.0 / count)

    def bwd(g):
        return (_spread(g * inv, in_shape, axes, keepdims),)

    return Tensor._result(data, "reduce_mean", (a,), bwd)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _spread(g, in_shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape).astype(np.float32)


def st_copy(values: np.ndarray, surrogate: Tensor) -> Tensor:
    """Forward the given values; route the gradient to the surrogate untouched.

    The straight-through estimator in one primitive: the output carries
    ``values`` bit-exactly while backward treats the op as identity on
    ``surrogate``.
    """
    vals = np.asarray(values, dtype=np.float32)
    if vals.shape != surrogate.shape:
        raise ShapeError("st_copy", f"values {vals.shape} vs surrogate {surrogate.shape}")
    _check_finite("st_copy", vals)

    def bwd(g):
        return (g,)

    return Tensor._result(vals.copy(), "st_copy", (surrogate,), bwd)


def constant(value, shape=None) -> Tensor:
    arr = np.asarray(value, dtype=np.float32)
    if shape is not None:
        arr = np.broadcast_to(arr, shape).copy()
    return Tensor(arr)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient is identity inside the range, zero outside."""
    low = masked_fill(a, a.data < lo, lo)
    return masked_fill(low, a.data > hi, hi)


# ---------------------------------------------------------------------------
# generic dispatch
# ---------------------------------------------------------------------------

_UNARY = {
    "exp": exp,
    "log": log,
    "square": square,
    "gelu": gelu,
}


def forward_primitive(kind: str, inputs, attrs=None) -> Tensor:
    """Apply one primitive by name. Unknown kinds are rejected."""
    attrs = dict(attrs or {})
    ins = list(inputs)
    if kind in _UNARY:
        return _UNARY[kind](ins[0])
    if kind == "matmul":
        return matmul(ins[0], ins[1])
    if kind == "add":
        return add(ins[0], ins[1])
    if kind == "mul":
        return mul(ins[0], ins[1])
    if kind == "scale":
        return scale(ins[0], attrs["factor"])
    if kind == "softmax":
        return softmax(ins[0], attrs.get("axis", -1))
    if kind == "log_softmax":
        return log_softmax(ins[0], attrs.get("axis", -1))
    if kind == "layer_norm":
        return layer_norm(ins[0], attrs.get("axis", -1), attrs.get("eps", 1e-5))
    if kind == "l2_normalize":
        return l2_normalize(ins[0], attrs.get("axis", -1))
    if kind == "reshape":
        return reshape(ins[0], attrs["shape"])
    if kind == "permute":
        return permute(ins[0], attrs["axes"])
    if kind == "concat":
        return concat(ins, attrs.get("axis", 0))
    if kind == "slice":
        return slice_(ins[0], attrs["key"])
    if kind == "gather_rows":
        return gather_rows(ins[0], attrs["indices"])
    if kind == "masked_fill":
        return masked_fill(ins[0], attrs["mask"], attrs["value"])
    if kind == "reduce_sum":
        return reduce_sum(ins[0], attrs.get("axis"), attrs.get("keepdims", False))
    if kind == "reduce_mean":
        return reduce_mean(ins[0], attrs.get("axis"), attrs.get("keepdims", False))
    if kind == "st_copy":
        return st_copy(attrs["values"], ins[0])
    raise ValueError(f"forward_primitive: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def check_gradient(f, x: Tensor, eps: float = 1e-3) -> float:
    """Compare backward() against central differences at ``x``.

    ``f`` must map a Tensor to a scalar Tensor and be deterministic.
    Returns the worst coordinate error |analytic - numeric| / max(1, |analytic|).
    The divisor for each difference is the perturbation actually realized
    in float32, not the nominal eps.
    """
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    y = f(probe)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ShapeError("check_gradient", "function under test must return a scalar")
    y.backward()
    if probe.grad is None:
        raise NumericFault("check_gradient: no gradient reached the input")
    analytic = probe.grad.astype(np.float64).reshape(-1)

    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(eps)
            hi_x = flat[i]
            hi = float(f(Tensor(base.reshape(x.shape))).data.reshape(()))
            flat[i] = orig - np.float32(eps)
            lo_x = flat[i]
            lo = float(f(Tensor(base.reshape(x.shape))).data.reshape(()))
            flat[i] = orig
            span = float(hi_x) - float(lo_x)
            if span == 0.0:
                raise NumericFault("check_gradient: perturbation underflowed")
            numeric = (hi - lo) / span
            if not math.isfinite(numeric):
                raise NumericFault("check_gradient: non-finite finite-difference")
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            if err > worst:
                worst = err
    return worst

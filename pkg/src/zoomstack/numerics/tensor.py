"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is an immutable wrapper around a float64 ``ndarray``.
Primitive operations record themselves on the innermost active
:class:`Tape` when at least one operand requires a gradient; outside a tape
they are plain numpy calls and hold no history.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import CapabilityError, DimensionError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "grad",
    "as_tensor",
    "tape_active",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "avg_pool2d",
    "upsample_nearest2d",
    "layer_norm",
    "softmax",
    "concat",
    "stack",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "silu",
    "relu",
    "abs_",
    "clip",
    "where_const",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    # Live/peak instance counters; used to compare resident-tensor footprints
    # of the backprop and backprop-free guidance paths.
    live = 0
    peak = 0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        Tensor.live += 1
        if Tensor.live > Tensor.peak:
            Tensor.peak = Tensor.live

    def __del__(self):
        Tensor.live -= 1

    @classmethod
    def reset_peak(cls) -> None:
        cls.peak = cls.live

    # -- views -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def tape_active() -> bool:
    return bool(_stack())


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; every primitive evaluated inside the block whose
    inputs require gradients is appended in execution order, which is a
    topological order of the computation graph.
    """

    constructed = 0

    def __init__(self):
        Tape.constructed += 1
        self.nodes: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        if seed is None:
            if target.size != 1:
                raise DimensionError(f"gradient of non-scalar target with shape {target.shape} needs a seed")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if node.vjp is None:
                raise CapabilityError(f"primitive '{node.op}' has no derivative rule")
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = np.zeros_like(s.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient")
            out.append(g)
        return out


def grad(f: Callable[..., Tensor], inputs: Sequence) -> list[np.ndarray]:
    """Gradient of scalar ``f(*inputs)`` with respect to each input."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = f(*leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise DimensionError("grad() needs a scalar-valued function")
    return tape.gradient(out, leaves)


def _make(data, inputs: tuple, vjp, op: str) -> Tensor:
    st = _stack()
    if st and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        st[-1].nodes.append(_Node(op, inputs, out, vjp))
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise CapabilityError("tensor-valued exponents are not supported")
    ad = a.data
    p = float(exponent)
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def where_const(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask itself is constant."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(m, g, 0.0), sa), _unbroadcast(np.where(m, 0.0, g), sb)),
        "where",
    )


def clip(a, lo: float, hi: float) -> Tensor:
    # Export-only: deliberately carries no derivative rule.
    a = as_tensor(a)
    return _make(np.clip(a.data, lo, hi), (a,), None, "clip")


# -- structural ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(index)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    n = len(ts)
    return _make(
        out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack"
    )


# -- reductions -------------------------------------------------------------------


def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (np.array(_expand_like(g, shape, axis, keepdims)),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size / max(out.size, 1)
    return _make(
        out, (a,), lambda g: (np.array(_expand_like(g, shape, axis, keepdims)) / n,), "mean"
    )


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), vjp, "matmul")


# -- convolution and pooling (NHWC) ----------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (N, Ho, Wo, C, kh, kw) -> (N, Ho, Wo, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho, wo, kh * kw * c)


def _col2im(cols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = xshape
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    cc = cols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cc[:, :, :, i, j, :]
    if pad:
        out = out[:, pad : pad + h, pad : pad + w, :]
    return out


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """``x``: (N, H, W, Cin); ``w``: (kh, kw, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d shapes incompatible: x {x.shape}, w {w.shape}")
    kh, kw, cin, cout = w.shape
    xd, wd = x.data, w.data
    cols = _im2col(xd, kh, kw, stride, pad)
    wm = wd.reshape(kh * kw * cin, cout)
    out = cols @ wm

    def vjp(g):
        gw = (cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, cout)).reshape(wd.shape)
        gx = _col2im(g @ wm.T, xd.shape, kh, kw, stride, pad)
        return gx, gw

    return _make(out, (x, w), vjp, "conv2d")


def conv_transpose2d(x, w, stride: int = 2, pad: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` in its input.

    ``x``: (N, Hi, Wi, Cin); ``w``: (kh, kw, Cout, Cin).  The output has
    spatial size ``(Hi - 1) * stride - 2 * pad + kh``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[3]:
        raise DimensionError(f"conv_transpose2d shapes incompatible: x {x.shape}, w {w.shape}")
    kh, kw, cout, cin = w.shape
    n, hi, wi, _ = x.shape
    ho = (hi - 1) * stride - 2 * pad + kh
    wo = (wi - 1) * stride - 2 * pad + kw
    if _conv_out(ho, kh, stride, pad) != hi or _conv_out(wo, kw, stride, pad) != wi:
        raise DimensionError("conv_transpose2d geometry is not invertible for these sizes")
    xd, wd = x.data, w.data
    wm = wd.reshape(kh * kw * cout, cin)
    oshape = (n, ho, wo, cout)
    out = _col2im(xd @ wm.T, oshape, kh, kw, stride, pad)

    def vjp(g):
        gcols = _im2col(g, kh, kw, stride, pad)
        gx = gcols @ wm
        gw = (gcols.reshape(-1, gcols.shape[-1]).T @ xd.reshape(-1, cin)).reshape(wd.shape)
        return gx, gw

    return _make(out, (x, w), vjp, "conv_transpose2d")


def avg_pool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k),)

    return _make(out, (x,), vjp, "avg_pool2d")


def upsample_nearest2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=1), k, axis=2)

    def vjp(g):
        return (g.reshape(n, h, k, w, k, c).sum(axis=(2, 4)),)

    return _make(out, (x,), vjp, "upsample_nearest2d")


# -- normalisation and attention ---------------------------------------------------


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), vjp, "layer_norm")


def group_norm(x, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalise (B, H, W, C) over space and ``C / groups`` channels per group."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if c % groups:
        raise ValueError(f"{c} channels do not split into {groups} groups")
    xd = x.data.reshape(b, h, w, groups, c // groups)
    axes = (1, 2, 4)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        g = g.reshape(y.shape)
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return ((inv * (g - gm - y * gy)).reshape(b, h, w, c),)

    return _make(y.reshape(b, h, w, c), (x,), vjp, "group_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), vjp, "softmax")

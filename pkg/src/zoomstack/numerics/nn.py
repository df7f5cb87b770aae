"""Minimal layer library on top of :mod:`zoomstack.numerics.tensor`.

Layers keep their parameters as :class:`Tensor` attributes with
``requires_grad=True``; :meth:`Module.named_parameters` walks attributes in
definition order so parameter naming (and therefore checkpoints) is stable.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict, prefix: str = "", strict: bool = True) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            key = prefix + name
            if key not in state:
                if strict:
                    raise KeyError(f"missing parameter {key}")
                continue
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{key}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily exclude all parameters from gradient tracking."""
        params = self.parameters()
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, saved):
                p.requires_grad = flag


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, zero: bool = False):
        std = 0.0 if zero else 1.0 / math.sqrt(d_in)
        self.w = Parameter(_normal(rng, (d_in, d_out), std))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=None, zero=False):
        pad = k // 2 if pad is None else pad
        std = 0.0 if zero else 1.0 / math.sqrt(k * k * c_in)
        self.w = Parameter(_normal(rng, (k, k, c_in, c_out), std))
        self.b = Parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return T.conv2d(x, self.w, self.stride, self.pad) + self.b


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng, k=4, stride=2, pad=1):
        std = 1.0 / math.sqrt(k * k * c_in / (stride * stride))
        self.w = Parameter(_normal(rng, (k, k, c_out, c_in), std))
        self.b = Parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return T.conv_transpose2d(x, self.w, self.stride, self.pad) + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        self.eps = eps
        if affine:
            self.gain = Parameter(np.ones(dim))
            self.shift = Parameter(np.zeros(dim))
        else:
            self.gain = self.shift = None

    def __call__(self, x):
        y = T.layer_norm(x, self.eps)
        if self.gain is not None:
            y = y * self.gain + self.shift
        return y


class GroupNorm(Module):
    """Per-sample normalisation over space and channel groups of (B, H, W, C) maps."""

    def __init__(self, dim: int, groups: int = 8, eps: float = 1e-5):
        self.groups = groups
        self.eps = eps
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))

    def __call__(self, x):
        return T.group_norm(x, self.groups, self.eps) * self.gain + self.shift


class Attention(Module):
    """Multi-head attention; self-attention when ``context`` is omitted."""

    def __init__(self, dim: int, heads: int, rng, context_dim: int | None = None, zero_out: bool = False):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        cdim = context_dim or dim
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(cdim, dim, rng, bias=False)
        self.v = Linear(cdim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng, zero=zero_out)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x, context=None, key_mask: np.ndarray | None = None):
        ctx = x if context is None else context
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        if key_mask is not None:
            # key_mask: (B, Lk) with True for attendable slots.
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e9)[:, None, None, :]
            scores = scores + bias
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, d_out: int | None = None, zero_out: bool = False):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out or dim, rng, zero=zero_out)

    def __call__(self, x):
        return self.fc2(T.silu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block."""

    def __init__(self, dim: int, heads: int, rng, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def __call__(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask=key_mask)
        return x + self.mlp(self.ln2(x))


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)

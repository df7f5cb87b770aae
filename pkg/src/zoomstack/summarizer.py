"""Summarizer: variable-size descriptor grid + scale -> fixed-length tokens.

Packed descriptor tokens (row-major, padded to ``cap`` slots with a learned
padding token) plus one magnification token are projected, given learned
per-slot position embeddings, run through a pre-norm transformer encoder and
layer-normalised per token.  Every scale and grid size therefore lands in the
same ``(cap + 1, hidden)`` token space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DimensionError, DomainError
from .numerics import nn
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import Tensor
from .pyramid import DESCRIPTOR_DIM, EmbeddingGrid

FINAL_EPS = 1e-12


@dataclass
class ConditionTokens:
    tokens: np.ndarray  # (cap + 1, hidden)
    scale: int
    mask: np.ndarray  # (cap,) bool, True for real descriptor slots


def pack_tokens(grid: EmbeddingGrid, cap: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Row-major flattening of grid cells into the leading ``cap`` slots.

    Padding slots are zero here; the network substitutes its learned padding
    token for every slot where ``mask`` is False.
    """
    n = grid.rows * grid.cols
    if n > cap:
        raise ContractViolation(f"grid {grid.rows}x{grid.cols} exceeds the {cap}-slot cap; pool it first")
    slots = np.zeros((cap, grid.dim))
    slots[:n] = grid.values.reshape(n, grid.dim)
    mask = np.zeros(cap, dtype=bool)
    mask[:n] = True
    return slots, mask


def pack_batch(grids: np.ndarray, grid_shape: np.ndarray, cap: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Pack zero-padded ``(B, side, side, D)`` dataset grids with their true shapes."""
    b, _, _, d = grids.shape
    slots = np.zeros((b, cap, d))
    mask = np.zeros((b, cap), dtype=bool)
    for i, (r, c) in enumerate(np.asarray(grid_shape)):
        n = int(r) * int(c)
        if n > cap:
            raise ContractViolation(f"grid {r}x{c} exceeds the {cap}-slot cap")
        slots[i, :n] = grids[i, :r, :c].reshape(n, d)
        mask[i, :n] = True
    return slots, mask


class SummarizerNet(nn.Module):
    def __init__(
        self,
        dim_in: int = DESCRIPTOR_DIM,
        hidden: int = 64,
        heads: int = 4,
        layers: int = 4,
        n_scales: int = 4,
        cap: int = 16,
        mask_padding: bool = False,
        seed: int = 0,
    ):
        r = rngmod.stream(seed, "init")
        self.dim_in, self.hidden, self.n_scales, self.cap = dim_in, hidden, n_scales, cap
        self.mask_padding = mask_padding
        self.proj = nn.Linear(dim_in, hidden, r)
        self.scale_table = nn.Parameter(r.standard_normal((n_scales, hidden)))
        self.pad_token = nn.Parameter(r.standard_normal(hidden) * 0.5)
        self.pos = nn.Parameter(r.standard_normal((cap + 1, hidden)) * 0.1)
        self.blocks = [nn.TransformerBlock(hidden, heads, r) for _ in range(layers)]

    @property
    def n_tokens(self) -> int:
        return self.cap + 1

    def forward(self, slots, mask: np.ndarray, scales) -> Tensor:
        """Batched tokens ``(B, cap + 1, hidden)``; ``slots`` may be a Tensor."""
        scales = np.atleast_1d(np.asarray(scales, dtype=np.int64))
        if np.any(scales < 1) or np.any(scales > self.n_scales):
            raise DomainError(f"scale outside [1, {self.n_scales}]: {scales}")
        slots = T.as_tensor(slots)
        if slots.ndim != 3 or slots.shape[1:] != (self.cap, self.dim_in):
            raise DimensionError(f"slots shape {slots.shape} != (B, {self.cap}, {self.dim_in})")
        mask = np.asarray(mask, dtype=bool)
        b = slots.shape[0]
        h = self.proj(slots)
        pad = T.reshape(self.pad_token, (1, 1, self.hidden))
        h = T.where_const(mask[:, :, None], h, pad)
        mag = T.reshape(self.scale_table[scales - 1], (b, 1, self.hidden))
        h = T.concat([h, mag], axis=1) + self.pos
        key_mask = None
        if self.mask_padding:
            key_mask = np.concatenate([mask, np.ones((b, 1), dtype=bool)], axis=1)
        for blk in self.blocks:
            h = blk(h, key_mask=key_mask)
        return T.layer_norm(h, FINAL_EPS)

    __call__ = forward


def summarize(net: SummarizerNet, grid: EmbeddingGrid) -> ConditionTokens:
    slots, mask = pack_tokens(grid, net.cap)
    out = net(slots[None], mask[None], [grid.scale])
    return ConditionTokens(tokens=out.data[0], scale=grid.scale, mask=mask)


def summarize_batch(net: SummarizerNet, grids: np.ndarray, grid_shape: np.ndarray, scales) -> np.ndarray:
    slots, mask = pack_batch(grids, grid_shape, net.cap)
    return net(slots, mask, scales).data

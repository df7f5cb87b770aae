"""Conditioning diffusion model over summarizer token sets.

A transformer denoises noisy ``(n_tokens, H_c)`` token sets.  Scale and
timestep enter as two extra tokens appended to the sequence; only the
``n_tokens`` content positions are projected back to token space.

Diffusion runs on tokens standardised per scale with the statistics of the
training token cache.  For unit-variance data the best linear noise estimate
is ``sqrt(1 - alpha_bar_t) c_t``; the network output ``F`` enters as
``sqrt(1 - alpha_bar_t) c_t + sqrt(alpha_bar_t) F``.  The implied clean estimate
is then ``sqrt(alpha_bar_t) c_t - sqrt(1 - alpha_bar_t) F``, which stays bounded
at high t, and an untrained net samples the per-scale Gaussian fit.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError
from .numerics import nn
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import Tensor
from .sampler import ddim_sample
from .schedule import NoiseSchedule
from .summarizer import ConditionTokens


class CdmNet(nn.Module):
    def __init__(
        self,
        n_tokens: int = 17,
        token_dim: int = 64,
        hidden: int = 128,
        layers: int = 4,
        heads: int = 4,
        n_scales: int = 4,
        temb_dim: int = 64,
        seed: int = 0,
    ):
        r = rngmod.stream(seed, "init")
        self.n_tokens, self.token_dim, self.hidden = n_tokens, token_dim, hidden
        self.n_scales, self.temb_dim = n_scales, temb_dim
        self.inp = nn.Linear(token_dim, hidden, r)
        self.pos = nn.Parameter(r.standard_normal((n_tokens + 2, hidden)) * 0.1)
        self.scale_table = nn.Parameter(r.standard_normal((n_scales, hidden)))
        self.time_mlp = nn.MLP(temb_dim, hidden, r, d_out=hidden)
        self.blocks = [nn.TransformerBlock(hidden, heads, r) for _ in range(layers)]
        self.ln_out = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, token_dim, r, zero=True)
        self.token_mean = np.zeros((n_scales, n_tokens, token_dim))
        self.token_std = np.ones((n_scales, n_tokens, token_dim))

    def _scale_index(self, scales, b: int) -> np.ndarray:
        scales = np.broadcast_to(np.asarray(scales, dtype=np.int64), (b,))
        if np.any(scales < 1) or np.any(scales > self.n_scales):
            raise DomainError(f"scale outside [1, {self.n_scales}]")
        return scales - 1

    def fit_standardization(self, tokens: np.ndarray, scales, floor: float = 1e-3) -> None:
        """Per-scale, per-position mean and std of a token cache."""
        tokens = np.asarray(tokens, dtype=np.float64)
        k = self._scale_index(scales, len(tokens))
        for i in range(self.n_scales):
            part = tokens[k == i]
            if len(part):
                self.token_mean[i] = part.mean(axis=0)
                self.token_std[i] = np.maximum(part.std(axis=0), floor)

    def standardize(self, tokens, scales) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        k = self._scale_index(scales, len(tokens))
        return (tokens - self.token_mean[k]) / self.token_std[k]

    def unstandardize(self, x, scales) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        k = self._scale_index(scales, len(x))
        return x * self.token_std[k] + self.token_mean[k]

    def state_dict(self, prefix: str = "") -> dict:
        out = super().state_dict(prefix)
        out[prefix + "token_mean"] = self.token_mean.copy()
        out[prefix + "token_std"] = self.token_std.copy()
        return out

    def load_state_dict(self, state: dict, prefix: str = "", strict: bool = True) -> None:
        super().load_state_dict(state, prefix, strict)
        for name in ("token_mean", "token_std"):
            if prefix + name in state:
                setattr(self, name, np.asarray(state[prefix + name], dtype=np.float64).copy())
            elif strict:
                raise KeyError(f"missing {prefix + name}")

    def forward(self, c_t, t, scales) -> Tensor:
        c_t = T.as_tensor(c_t)
        if c_t.ndim != 3 or c_t.shape[1:] != (self.n_tokens, self.token_dim):
            raise DimensionError(f"token batch {c_t.shape} != (B, {self.n_tokens}, {self.token_dim})")
        b = c_t.shape[0]
        scales = self._scale_index(scales, b) + 1
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        h = self.inp(c_t)
        st = T.reshape(self.scale_table[scales - 1], (b, 1, self.hidden))
        tt = T.reshape(self.time_mlp(Tensor(nn.timestep_embedding(t, self.temb_dim))), (b, 1, self.hidden))
        h = T.concat([h, st, tt], axis=1) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.out(self.ln_out(h[:, : self.n_tokens]))

    __call__ = forward

    def predict_noise(self, c_t, t, scales, s: NoiseSchedule | None = None) -> Tensor:
        """Gaussian baseline ``sqrt(1 - ab) c_t`` plus ``sqrt(ab)`` times the network output."""
        s = s or NoiseSchedule()
        c = T.as_tensor(c_t)
        resid = self.forward(c, t, scales)
        ab = s.alpha_bar[np.broadcast_to(np.asarray(t, dtype=np.int64), (c.shape[0],))].reshape(-1, 1, 1)
        return resid * Tensor(np.sqrt(ab)) + Tensor(np.sqrt(1.0 - ab) * c.data)


def cdm_epsilon(net: CdmNet, c_t, t, scale, s: NoiseSchedule | None = None) -> np.ndarray:
    """Predicted noise for one standardised ``(n, H_c)`` set or a batch."""
    c = np.asarray(c_t, dtype=np.float64)
    single = c.ndim == 2
    out = net.predict_noise(c[None] if single else c, t, scale, s).data
    return out[0] if single else out


def sample_token_arrays(net: CdmNet, scale: int, n: int, steps: int = 50, seed: int = 0, s: NoiseSchedule | None = None) -> np.ndarray:
    s = s or NoiseSchedule()

    def eps_fn(z, t):
        return net.predict_noise(z, t, scale, s).data

    x = ddim_sample(eps_fn, s, (n, net.n_tokens, net.token_dim), steps=steps, seed=seed)
    return net.unstandardize(x, scale)


def sample_conditions(net: CdmNet, scale: int, n: int, steps: int = 50, seed: int = 0, s: NoiseSchedule | None = None) -> list[ConditionTokens]:
    """``n`` token sets for ``scale`` via deterministic DDIM in token space."""
    tokens = sample_token_arrays(net, scale, n, steps, seed, s)
    mask = np.zeros(net.n_tokens - 1, dtype=bool)
    return [ConditionTokens(tokens=tk, scale=scale, mask=mask) for tk in tokens]

"""Conditional noise predictor, classifier-free guidance, Gaussian oracle.

The toy U-Net works on (B, h, w, C_z) latents: two resolution levels with
32 and 64 channels, residual blocks with an additive timestep embedding,
cross-attention to condition tokens at the bottleneck and at the output
level, and a zero-initialised output projection.  Convolutional blocks use
group normalisation over space, so the per-position amplitude of ``z_t``
survives to the output (a per-position layer norm would discard it, and the
near-identity map ``eps ~ z_t`` at large t becomes hard to fit).  Decoder blocks, indexed for
feature extraction, are:

    0: bottleneck after cross-attention   (h/2 x w/2 x 64)
    1: upsampled + skip-merged res block  (h x w x 32)
    2: output-level cross-attention       (h x w x 32)
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, NumericalError
from .numerics import nn
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import Tensor
from .schedule import NoiseSchedule
from .summarizer import ConditionTokens

DECODER_BLOCKS = 3
DEFAULT_FEATURE_BLOCK = 0
DEFAULT_FEATURE_T = 100


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, rng):
        self.norm1 = nn.GroupNorm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng)
        self.temb = nn.Linear(temb_dim, c_out, rng)
        self.norm2 = nn.GroupNorm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x, temb):
        b = temb.shape[0]
        h = self.conv1(T.silu(self.norm1(x)))
        h = h + T.reshape(self.temb(temb), (b, 1, 1, -1))
        h = self.conv2(T.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class CrossAttnBlock(nn.Module):
    def __init__(self, dim: int, ctx_dim: int, heads: int, rng):
        self.ln = nn.LayerNorm(dim)
        self.attn = nn.Attention(dim, heads, rng, context_dim=ctx_dim)

    def __call__(self, x, ctx):
        b, h, w, c = x.shape
        seq = T.reshape(x, (b, h * w, c))
        seq = seq + self.attn(self.ln(seq), context=ctx)
        return T.reshape(seq, (b, h, w, c))


class DenoiserNet(nn.Module):
    def __init__(
        self,
        latent_channels: int = 4,
        channels: tuple[int, int] = (32, 64),
        ctx_dim: int = 64,
        n_tokens: int = 17,
        temb_dim: int = 64,
        heads: int = 4,
        seed: int = 0,
    ):
        r = rngmod.stream(seed, "init")
        c1, c2 = channels
        self.latent_channels = latent_channels
        self.channels = (c1, c2)
        self.ctx_dim, self.n_tokens, self.temb_dim = ctx_dim, n_tokens, temb_dim
        self.time_mlp = nn.MLP(temb_dim, 2 * temb_dim, r)
        self.null_tokens = nn.Parameter(r.standard_normal((n_tokens, ctx_dim)) * 0.1)
        self.conv_in = nn.Conv2d(latent_channels, c1, 3, r)
        self.rb_in = ResBlock(c1, c1, temb_dim, r)
        self.down = nn.Conv2d(c1, c2, 3, r, stride=2, pad=1)
        self.rb_mid = ResBlock(c2, c2, temb_dim, r)
        self.attn_mid = CrossAttnBlock(c2, ctx_dim, heads, r)
        self.up = nn.ConvTranspose2d(c2, c1, r)
        self.rb_up = ResBlock(2 * c1, c1, temb_dim, r)
        self.attn_out = CrossAttnBlock(c1, ctx_dim, heads, r)
        self.norm_out = nn.GroupNorm(c1)
        self.conv_out = nn.Conv2d(c1, latent_channels, 3, r, zero=True)

    def block_channels(self, block: int) -> int:
        if not 0 <= block < DECODER_BLOCKS:
            raise DomainError(f"decoder block must be in [0, {DECODER_BLOCKS - 1}], got {block}")
        return self.channels[1] if block == 0 else self.channels[0]

    def context(self, tokens, drop: np.ndarray | None = None) -> Tensor:
        """Batched context; ``tokens=None`` or ``drop[i]`` selects the null condition."""
        null = T.reshape(self.null_tokens, (1, self.n_tokens, self.ctx_dim))
        if tokens is None:
            return null
        tokens = T.as_tensor(tokens)
        if tokens.shape[1:] != (self.n_tokens, self.ctx_dim):
            raise DimensionError(f"condition tokens {tokens.shape[1:]} != ({self.n_tokens}, {self.ctx_dim})")
        if drop is None:
            return tokens
        return T.where_const(np.asarray(drop, dtype=bool)[:, None, None], null, tokens)

    def forward(self, z, t, ctx: Tensor, return_blocks: bool = False):
        z = T.as_tensor(z)
        if z.ndim != 4 or z.shape[3] != self.latent_channels or z.shape[1] % 2 or z.shape[2] % 2:
            raise DimensionError(f"latent batch shape {z.shape} incompatible with the denoiser")
        b = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        if ctx.shape[0] != b:
            ctx = ctx + Tensor(np.zeros((b, 1, 1)))
        temb = self.time_mlp(Tensor(nn.timestep_embedding(t, self.temb_dim)))
        h0 = self.rb_in(self.conv_in(z), temb)
        h = self.rb_mid(self.down(h0), temb)
        b0 = self.attn_mid(h, ctx)
        b1 = self.rb_up(T.concat([self.up(b0), h0], axis=3), temb)
        b2 = self.attn_out(b1, ctx)
        out = self.conv_out(T.silu(self.norm_out(b2)))
        if return_blocks:
            return out, (b0, b1, b2)
        return out

    __call__ = forward


def _tokens(c):
    if c is None:
        return None
    if isinstance(c, ConditionTokens):
        return c.tokens[None]
    c = np.asarray(c, dtype=np.float64)
    return c[None] if c.ndim == 2 else c


def _latent_batch(z_t):
    z = np.asarray(z_t, dtype=np.float64)
    if z.ndim == 3:
        return z[None], True
    if z.ndim != 4:
        raise DimensionError(f"latent must be (h, w, C) or (B, h, w, C), got {z.shape}")
    return z, False


def epsilon(net: DenoiserNet, z_t, t, c=None) -> np.ndarray:
    """Predicted noise for one latent or a batch.

    ``c`` is ConditionTokens, a token array ``(n, H_c)`` / ``(B, n, H_c)``, or
    None for the unconditional path.
    """
    z, single = _latent_batch(z_t)
    out = net(z, t, net.context(_tokens(c))).data
    return out[0] if single else out


def guided_epsilon(net: DenoiserNet, z_t, t, c, w: float = 2.0) -> np.ndarray:
    """Classifier-free guidance ``eps_u + w (eps_c - eps_u)``."""
    if c is None:
        return epsilon(net, z_t, t, None)
    if w == 1.0:
        return epsilon(net, z_t, t, c)
    eps_u = epsilon(net, z_t, t, None)
    if w == 0.0:
        return eps_u
    eps_c = epsilon(net, z_t, t, c)
    return eps_u + w * (eps_c - eps_u)


def extract_features(net: DenoiserNet, z_t, t: int = DEFAULT_FEATURE_T, c=None, block: int = DEFAULT_FEATURE_BLOCK) -> np.ndarray:
    """Spatially averaged activation of decoder ``block``; length = its channel count."""
    net.block_channels(block)
    z, single = _latent_batch(z_t)
    _, blocks = net(z, t, net.context(_tokens(c)), return_blocks=True)
    feats = blocks[block].data.mean(axis=(1, 2))
    return feats[0] if single else feats


class GaussianOracle:
    """Gaussian latent prior with closed-form posterior mean.

    ``cov`` is either per-coordinate variances (same shape as ``mu``) or a full
    ``(d, d)`` covariance over the flattened latent.
    """

    def __init__(self, mu, cov):
        self.mu = np.asarray(mu, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        d = self.mu.size
        self.diagonal = cov.shape == self.mu.shape
        if not self.diagonal and cov.shape != (d, d):
            raise DimensionError(f"covariance shape {cov.shape} matches neither {self.mu.shape} nor ({d}, {d})")
        if self.diagonal and np.any(cov < 0):
            raise DomainError("variances must be non-negative")
        if not self.diagonal and np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-12:
            raise DomainError("covariance must be positive semi-definite")
        self.cov = cov

    def posterior_mean(self, s: NoiseSchedule, z_t, t) -> np.ndarray:
        ab = s.alpha_bar[s.check_t(t)]
        z_t = np.asarray(z_t, dtype=np.float64)
        lead = z_t.shape[: z_t.ndim - self.mu.ndim]
        r = z_t - np.sqrt(ab) * self.mu
        if self.diagonal:
            denom = ab * self.cov + (1.0 - ab)
            if np.any(denom <= 0):
                raise NumericalError(f"singular posterior system at t={t}")
            return self.mu + np.sqrt(ab) * self.cov / denom * r
        d = self.mu.size
        m = ab * self.cov + (1.0 - ab) * np.eye(d)
        try:
            sol = np.linalg.solve(m, r.reshape(-1, d).T).T
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular posterior system at t={t}") from exc
        return self.mu + np.sqrt(ab) * (sol @ self.cov.T).reshape(lead + self.mu.shape)


def oracle_epsilon(o: GaussianOracle, s: NoiseSchedule, z_t, t) -> np.ndarray:
    """Bayes-optimal noise prediction for Gaussian data."""
    ab = s.alpha_bar[s.check_t(t)]
    return (np.asarray(z_t) - np.sqrt(ab) * o.posterior_mean(s, z_t, t)) / np.sqrt(1.0 - ab)

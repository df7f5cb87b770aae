"""Latent codecs mapping (N, H, W, 3) images to (N, H/f, W/f, C_z) latents.

``OrthogonalLinearCodec`` acts independently on each f x f x 3 pixel block:
``Dec(z) = Q z + b`` with ``Q^T Q = I``, so its Jacobian is exactly
orthogonal.  ``LearnedConvCodec`` is a small trained conv autoencoder.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError
from .numerics import nn
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import Tensor


def _batched(x: np.ndarray, rank: int):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


class Codec:
    kind: str
    f_vae: int
    latent_channels: int
    # Scalar multiplying raw encoder outputs so that latents have unit variance.
    latent_scale: float = 1.0

    def _check_image(self, x: np.ndarray, strict: bool):
        if x.shape[-1] != 3 or x.shape[1] % self.f_vae or x.shape[2] % self.f_vae:
            raise DimensionError(f"image shape {x.shape} incompatible with f_vae={self.f_vae}")
        if strict and (x.min() < 0.0 or x.max() > 1.0):
            raise DomainError("pixel values must lie in [0, 1]")

    def _check_latent(self, z: np.ndarray):
        if z.shape[-1] != self.latent_channels:
            raise DimensionError(f"latent has {z.shape[-1]} channels, codec expects {self.latent_channels}")

    def encode(self, image, strict: bool = True) -> np.ndarray:
        """Latent for an image or batch.  ``strict=False`` skips the [0, 1]
        range check, for perturbed images inside guidance loops."""
        x, single = _batched(image, 4)
        self._check_image(x, strict)
        z = self.encode_t(Tensor(x)).data
        return z[0] if single else z

    def decode(self, latent) -> np.ndarray:
        z, single = _batched(latent, 4)
        self._check_latent(z)
        x = self.decode_t(Tensor(z)).data
        return x[0] if single else x

    def encode_t(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def decode_t(self, z: Tensor) -> Tensor:
        raise NotImplementedError

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return h // self.f_vae, w // self.f_vae, self.latent_channels


class OrthogonalLinearCodec(Codec):
    kind = "orthogonal-linear"

    def __init__(self, f_vae: int = 4, latent_channels: int | None = None, seed: int = 0, bias: float = 0.5):
        block = f_vae * f_vae * 3
        c = block if latent_channels is None else latent_channels
        if not 1 <= c <= block:
            raise DomainError(f"latent_channels must be in [1, {block}]")
        g = rngmod.stream(seed, "init").standard_normal((block, block))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))[None, :]
        self.f_vae = f_vae
        self.latent_channels = c
        self.Q = np.ascontiguousarray(q[:, :c])
        self.bias = np.full(block, float(bias))

    @property
    def exact(self) -> bool:
        return self.latent_channels == self.Q.shape[0]

    def _blocks(self, x):
        n, h, w, c = x.shape
        f = self.f_vae
        return x.reshape(n, h // f, f, w // f, f, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // f, w // f, f * f * c)

    def _unblocks(self, b):
        n, h, w, _ = b.shape
        f = self.f_vae
        return b.reshape(n, h, w, f, f, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * f, w * f, 3)

    def encode_t(self, x: Tensor) -> Tensor:
        return T.matmul(self._blocks(x) - self.bias, Tensor(self.Q))

    def decode_t(self, z: Tensor) -> Tensor:
        return self._unblocks(T.matmul(z, Tensor(self.Q.T)) + self.bias)

    def state_dict(self, prefix="codec/"):
        return {prefix + "Q": self.Q, prefix + "bias": self.bias}


class LearnedConvCodec(Codec, nn.Module):
    """Two stride-2 convs down, two stride-2 transposed convs up.

    ``encode = latent_scale * enc(x)`` and ``decode(z) = dec(z / latent_scale)``;
    the scale is fixed after training (see :func:`calibrate_latent_scale`).
    """

    kind = "learned-conv"

    def __init__(self, latent_channels: int = 4, hidden: int = 64, seed: int = 0):
        r = rngmod.stream(seed, "init")
        self.f_vae = 4
        self.latent_channels = latent_channels
        self.enc1 = nn.Conv2d(3, hidden, 3, r, stride=2, pad=1)
        self.enc2 = nn.Conv2d(hidden, latent_channels, 3, r, stride=2, pad=1)
        self.dec1 = nn.ConvTranspose2d(latent_channels, hidden, r)
        self.dec2 = nn.ConvTranspose2d(hidden, 3, r)
        self.latent_scale = 1.0

    def raw_encode_t(self, x: Tensor) -> Tensor:
        return self.enc2(T.silu(self.enc1(x - 0.5)))

    def raw_decode_t(self, z: Tensor) -> Tensor:
        return self.dec2(T.silu(self.dec1(z))) + 0.5

    def encode_t(self, x: Tensor) -> Tensor:
        return self.raw_encode_t(x) * self.latent_scale

    def decode_t(self, z: Tensor) -> Tensor:
        return self.raw_decode_t(z * (1.0 / self.latent_scale))

    def state_dict(self, prefix="codec/"):
        out = nn.Module.state_dict(self, prefix)
        out[prefix + "latent_scale"] = np.array([self.latent_scale])
        return out

    def load_state_dict(self, state, prefix="codec/", strict=True):
        nn.Module.load_state_dict(self, state, prefix, strict)
        if prefix + "latent_scale" in state:
            self.latent_scale = float(np.asarray(state[prefix + "latent_scale"]).reshape(-1)[0])


def calibrate_latent_scale(codec: LearnedConvCodec, images: np.ndarray) -> float:
    """Set ``latent_scale`` so encoded ``images`` have unit overall variance."""
    codec.latent_scale = 1.0
    z = codec.encode(images, strict=False)
    codec.latent_scale = float(1.0 / z.std())
    return codec.latent_scale


def codec_from_state(state: dict, meta: dict, prefix: str = "codec/") -> Codec:
    kind = meta.get("codec_kind", "learned-conv")
    if kind == "orthogonal-linear":
        q = state[prefix + "Q"]
        f = int(round(np.sqrt(q.shape[0] / 3)))
        codec = OrthogonalLinearCodec(f_vae=f, latent_channels=q.shape[1])
        codec.Q = q.copy()
        codec.bias = state[prefix + "bias"].copy()
        return codec
    codec = LearnedConvCodec(latent_channels=int(meta.get("latent_channels", 4)), hidden=int(meta.get("codec_hidden", 64)))
    codec.load_state_dict(state, prefix=prefix)
    return codec


def codec_meta(codec: Codec) -> dict:
    meta = {"codec_kind": codec.kind, "latent_channels": codec.latent_channels, "f_vae": codec.f_vae}
    if isinstance(codec, LearnedConvCodec):
        meta["codec_hidden"] = codec.enc1.w.shape[3]
    return meta


def reconstruction_rmse(codec: Codec, images: np.ndarray) -> float:
    x = np.asarray(images, dtype=np.float64)
    return float(np.sqrt(np.mean((codec.decode(codec.encode(x)) - x) ** 2)))

"""Training loops: codec, joint denoiser + summarizer, conditioning diffusion model.

All loops are single-threaded and draw every random quantity from named
seeded streams, so a (config, seed) pair reproduces its checkpoint bitwise.
Logs are line-delimited JSON.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import Codec, LearnedConvCodec, calibrate_latent_scale
from .errors import ConfigError, ContractViolation, DivergenceError
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.io import save_checkpoint
from .numerics.optim import EMA, Adam, warmup_constant
from .numerics.tensor import Tape, Tensor
from .pyramid import PyramidDataset
from .schedule import NoiseSchedule
from .summarizer import pack_batch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup: int = 500
    batch: int = 32
    steps: int = 4000
    p_drop: float = 0.1
    seed: int = 0
    ckpt_every: int = 0
    log_every: int = 50
    # Sample a scale uniformly first, then a record within it (ablation only).
    rebalance: bool = False
    # Restrict training records to these scales (None: all scales).
    scales: tuple | None = None
    # Decay of an exponential moving average of the weights, loaded at the
    # end of training (0 disables it).
    ema: float = 0.0

    def __post_init__(self):
        if self.warmup > self.steps:
            raise ConfigError(f"warmup {self.warmup} exceeds total steps {self.steps}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1)")
        if self.batch < 1 or self.steps < 0 or self.lr <= 0:
            raise ConfigError("batch >= 1, steps >= 0 and lr > 0 are required")
        if self.scales is not None:
            self.scales = tuple(int(s) for s in self.scales)
        if not 0.0 <= self.ema < 1.0:
            raise ConfigError("ema must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    dropped: int = 0
    samples: int = 0

    @property
    def drop_fraction(self) -> float:
        return self.dropped / self.samples if self.samples else 0.0


def param_digest(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class JsonlLog:
    def __init__(self, path=None):
        self.fh = open(path, "w") if path else None

    def write(self, entry: dict):
        if self.fh:
            self.fh.write(json.dumps(entry) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _finite_or_abort(value: float, step: int, on_abort=None):
    if not np.isfinite(value):
        if on_abort is not None:
            on_abort()
        raise DivergenceError(f"non-finite training loss at step {step}", step=step)


# -- codec ----------------------------------------------------------------------------


def train_codec(
    images: np.ndarray,
    codec: LearnedConvCodec,
    cfg: TrainConfig,
    adjoint_weight: float = 0.003,
    probe_step: float = 1e-3,
    log_path=None,
) -> TrainResult:
    """Reconstruction loss plus an adjoint-consistency penalty.

    The penalty compares ``<v, J_enc u>`` with ``<J_dec v, u>`` for random
    probes ``u`` (pixels) and ``v`` (latents), both directional derivatives
    taken by forward differences of step ``probe_step``.  Driving it to zero
    makes ``J_enc = J_dec^T``, which together with reconstruction makes the
    decoder Jacobian orthogonal.  Afterwards the latent scale is calibrated
    to unit latent variance.
    """
    images = np.asarray(images, dtype=np.float64)
    params = codec.parameters()
    opt = Adam(params, lr=cfg.lr)
    data = rngmod.stream(cfg.seed, "data")
    probe = rngmod.stream(cfg.seed, "probe")
    codec.latent_scale = 1.0
    log = JsonlLog(log_path)
    result = TrainResult()
    h = probe_step
    for step in range(cfg.steps):
        x_np = images[data.integers(0, len(images), cfg.batch)]
        x = Tensor(x_np)
        u = probe.standard_normal(x_np.shape)
        with Tape() as tape:
            z = codec.raw_encode_t(x)
            r = codec.raw_decode_t(z)
            rec = T.mean((r - x) * (r - x))
            v = probe.standard_normal(z.shape)
            ju = (codec.raw_encode_t(x + h * u) - z) * (1.0 / h)
            jv = (codec.raw_decode_t(z + h * v) - r) * (1.0 / h)
            gap = T.sum_(ju * v, axis=(1, 2, 3)) - T.sum_(jv * u, axis=(1, 2, 3))
            adj = T.mean(gap * gap) * (1.0 / float(np.prod(z.shape[1:])))
            loss = rec + adj * adjoint_weight
        value = loss.item()
        _finite_or_abort(value, step)
        opt.step(tape.gradient(loss, params), lr=warmup_constant(step, cfg.lr, cfg.warmup))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            entry = {"step": step, "loss": value, "recon": rec.item(), "adjoint": adj.item()}
            result.history.append(entry)
            log.write(entry)
    calibrate_latent_scale(codec, images)
    log.write({"latent_scale": codec.latent_scale})
    log.close()
    return result


def encode_patches(codec: Codec, patches: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([codec.encode(patches[i : i + chunk]) for i in range(0, len(patches), chunk)])


# -- joint denoiser + summarizer --------------------------------------------------------


def _record_pool(dataset: PyramidDataset, cfg: TrainConfig) -> np.ndarray:
    idx = np.arange(len(dataset))
    if cfg.scales is not None:
        idx = idx[np.isin(dataset.scales, cfg.scales)]
    if idx.size == 0:
        raise ConfigError("no training records for the requested scales")
    return idx


def _draw(pool: np.ndarray, record_scales: np.ndarray, cfg: TrainConfig, data) -> np.ndarray:
    if not cfg.rebalance:
        return pool[data.integers(0, len(pool), cfg.batch)]
    scales = np.unique(record_scales[pool])
    picked = scales[data.integers(0, len(scales), cfg.batch)]
    out = np.empty(cfg.batch, dtype=np.int64)
    for i, sc in enumerate(picked):
        members = pool[record_scales[pool] == sc]
        out[i] = members[data.integers(0, len(members))]
    return out


def ldm_loss(denoiser, summarizer, latents, dataset, idx, t, eps, s: NoiseSchedule, drop=None):
    """Per-batch denoising loss tensor and per-sample losses (numpy)."""
    z0 = latents[idx]
    ab = s.alpha_bar[t].reshape(-1, 1, 1, 1)
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    slots, mask = pack_batch(dataset.grids[idx], dataset.grid_shape[idx], summarizer.cap)
    tokens = summarizer(slots, mask, dataset.scales[idx])
    pred = denoiser(Tensor(z_t), t, denoiser.context(tokens, drop))
    diff = pred - eps
    sq = diff * diff
    per = sq.data.mean(axis=(1, 2, 3))
    return T.mean(sq), per


def train_ldm(
    dataset: PyramidDataset,
    codec: Codec,
    denoiser,
    summarizer,
    cfg: TrainConfig,
    s: NoiseSchedule | None = None,
    latents: np.ndarray | None = None,
    log_path=None,
    ckpt_dir=None,
) -> TrainResult:
    """Joint denoiser + summarizer training with whole-set condition dropout."""
    s = s or NoiseSchedule()
    codec_digest = param_digest(codec) if hasattr(codec, "named_parameters") else None
    if latents is None:
        latents = encode_patches(codec, dataset.patches)
    params = denoiser.parameters() + summarizer.parameters()
    opt = Adam(params, lr=cfg.lr)
    data = rngmod.stream(cfg.seed, "data")
    noise = rngmod.stream(cfg.seed, "noise")
    dropout = rngmod.stream(cfg.seed, "dropout")
    pool = _record_pool(dataset, cfg)
    ema = EMA(params, cfg.ema) if cfg.ema else None
    log = JsonlLog(log_path)
    result = TrainResult()
    last_good = {}

    def dump_last_good():
        if ckpt_dir is not None and last_good:
            save_checkpoint(Path(ckpt_dir) / "last_good.zckp", last_good, {"kind": "ldm"})

    for step in range(cfg.steps):
        idx = _draw(pool, dataset.scales, cfg, data)
        t = noise.integers(1, s.T + 1, cfg.batch)
        eps = noise.standard_normal((cfg.batch,) + latents.shape[1:])
        drop = dropout.random(cfg.batch) < cfg.p_drop
        with Tape() as tape:
            loss, per = ldm_loss(denoiser, summarizer, latents, dataset, idx, t, eps, s, drop)
        value = loss.item()
        _finite_or_abort(value, step, dump_last_good)
        opt.step(tape.gradient(loss, params), lr=warmup_constant(step, cfg.lr, cfg.warmup))
        if ema is not None:
            ema.update()
        result.dropped += int(drop.sum())
        result.samples += cfg.batch
        if ckpt_dir is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            last_good = {**denoiser.state_dict("denoiser/"), **summarizer.state_dict("summarizer/")}
            dump_last_good()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            sc = dataset.scales[idx]
            by_scale = {int(k): float(per[sc == k].mean()) for k in np.unique(sc)}
            entry = {"step": step, "loss": value, "scale_loss": by_scale, "dropped": int(drop.sum())}
            result.history.append(entry)
            log.write(entry)
    log.close()
    if ema is not None:
        ema.copy_to()
    if codec_digest is not None and param_digest(codec) != codec_digest:
        raise ContractViolation("codec parameters changed during denoiser training")
    return result


def validation_loss(
    denoiser,
    summarizer,
    latents: np.ndarray,
    dataset: PyramidDataset,
    idx=None,
    t: int | None = 500,
    seed: int = 1234,
    s: NoiseSchedule | None = None,
    repeats: int = 1,
    chunk: int = 128,
) -> float:
    """Mean conditional denoising MSE with fixed noise; ``t=None`` draws t uniformly."""
    s = s or NoiseSchedule()
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    g = rngmod.stream(seed, "noise")
    total, count = 0.0, 0
    for _ in range(repeats):
        for a in range(0, len(idx), chunk):
            part = idx[a : a + chunk]
            tt = np.full(len(part), t) if t is not None else g.integers(1, s.T + 1, len(part))
            eps = g.standard_normal((len(part),) + latents.shape[1:])
            _, per = ldm_loss(denoiser, summarizer, latents, dataset, part, tt, eps, s)
            total += float(per.sum())
            count += len(part)
    return total / count


# -- conditioning diffusion model --------------------------------------------------------


def token_cache(dataset: PyramidDataset, summarizer, chunk: int = 128) -> np.ndarray:
    """Summarizer tokens for every record, shape (N, n_tokens, H_c)."""
    out = []
    for a in range(0, len(dataset), chunk):
        sl = slice(a, a + chunk)
        slots, mask = pack_batch(dataset.grids[sl], dataset.grid_shape[sl], summarizer.cap)
        out.append(summarizer(slots, mask, dataset.scales[sl]).data)
    return np.concatenate(out)


def cdm_loss(cdm, tokens, scales, t, eps, s: NoiseSchedule):
    """Denoising loss on tokens standardised with the CDM's cache statistics."""
    ab = s.alpha_bar[t].reshape(-1, 1, 1)
    c_t = np.sqrt(ab) * cdm.standardize(tokens, scales) + np.sqrt(1.0 - ab) * eps
    diff = cdm.predict_noise(Tensor(c_t), t, scales, s) - eps
    sq = diff * diff
    return T.mean(sq), sq.data.mean(axis=(1, 2))


def train_cdm(
    dataset: PyramidDataset,
    summarizer,
    cdm,
    cfg: TrainConfig,
    s: NoiseSchedule | None = None,
    frozen_digest: str | None = None,
    log_path=None,
) -> TrainResult:
    """Denoising objective over cached token sets; the summarizer must be frozen.

    ``frozen_digest`` is the summarizer digest recorded when LDM training
    finished; a mismatch means the summarizer was modified afterwards.
    """
    s = s or NoiseSchedule()
    before = param_digest(summarizer)
    if frozen_digest is not None and frozen_digest != before:
        raise ContractViolation("summarizer differs from the frozen post-LDM state")
    with summarizer.frozen():
        tokens = token_cache(dataset, summarizer)
    if param_digest(summarizer) != before:
        raise ContractViolation("summarizer parameters changed while caching tokens")
    result = _train_cdm_on_tokens(tokens, dataset.scales, cdm, cfg, s, log_path)
    if param_digest(summarizer) != before:
        raise ContractViolation("summarizer parameters changed during CDM training")
    result.history.append({"token_cache": int(len(tokens))})
    return result


def _train_cdm_on_tokens(tokens, scales, cdm, cfg: TrainConfig, s: NoiseSchedule, log_path=None) -> TrainResult:
    cdm.fit_standardization(tokens, scales)
    params = cdm.parameters()
    opt = Adam(params, lr=cfg.lr)
    ema = EMA(params, cfg.ema) if cfg.ema else None
    data = rngmod.stream(cfg.seed, "data")
    noise = rngmod.stream(cfg.seed, "noise")
    log = JsonlLog(log_path)
    result = TrainResult()
    pool = np.arange(len(tokens))
    for step in range(cfg.steps):
        idx = _draw(pool, np.asarray(scales), cfg, data)
        t = noise.integers(1, s.T + 1, cfg.batch)
        eps = noise.standard_normal((cfg.batch,) + tokens.shape[1:])
        with Tape() as tape:
            loss, _ = cdm_loss(cdm, tokens[idx], scales[idx], t, eps, s)
        value = loss.item()
        _finite_or_abort(value, step)
        opt.step(tape.gradient(loss, params), lr=warmup_constant(step, cfg.lr, cfg.warmup))
        if ema is not None:
            ema.update()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            entry = {"step": step, "loss": value}
            result.history.append(entry)
            log.write(entry)
    log.close()
    if ema is not None:
        ema.copy_to()
    return result


def cdm_validation_loss(cdm, tokens, scales, seed: int = 1234, s: NoiseSchedule | None = None, chunk: int = 128) -> float:
    s = s or NoiseSchedule()
    g = rngmod.stream(seed, "noise")
    total = 0.0
    for a in range(0, len(tokens), chunk):
        part = slice(a, a + chunk)
        n = len(tokens[part])
        t = g.integers(1, s.T + 1, n)
        eps = g.standard_normal((n,) + tokens.shape[1:])
        _, per = cdm_loss(cdm, tokens[part], scales[part], t, eps, s)
        total += float(per.sum())
    return total / len(tokens)

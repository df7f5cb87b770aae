"""DDIM sampling and linear-constraint guidance in latent space.

A *predictor* is any callable ``eps_fn(z, t) -> eps`` on a latent batch
``(B, h, w, C)``; :func:`denoiser_predictor` and :func:`oracle_predictor`
build them from a trained network or a Gaussian oracle.

Guidance minimises ``C = ||A arrange(Dec(z0_hat)) - y||^2`` before every
DDIM step.  The error direction ``e`` on ``z0_hat`` is either the true
gradient (backprop through the decoder) or its forward-only estimate
``[Enc(Dec(z0) + zeta e_img) - Enc(Dec(z0))] / zeta`` with
``e_img = A^T (A Dec(z0) - y)``.  It is pulled back to ``z_t`` by a finite
difference of the clean estimate, and ``z_t`` moves against it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .codec import Codec
from .denoiser import GaussianOracle, guided_epsilon, oracle_epsilon
from .errors import CapabilityError, DimensionError, DivergenceError, DomainError
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import Tape, Tensor
from .resample import DownsampleOp, PatchGrid, apply, apply_t, apply_transpose, arrange, arrange_batch, split_batch
from .schedule import NoiseSchedule, estimate_clean

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class GuidanceConfig:
    delta: float = 0.005
    zeta: float = 0.005
    K: int = 1
    lam: float = 0.5
    steps: int = 50
    w: float = 2.0
    eta: float = 0.0
    kernel: str = "average"
    # "approx" (forward-only) or "exact" (backprop through the decoder).
    mode: str = "approx"
    # Multiplier on e_img.  None selects factor**2, which turns A^T into the
    # upsampling that A inverts (A (f^2 A^T) = I for average pooling).
    adjoint_gain: float | None = None
    # Guidance only for timesteps in [guide_t_min, guide_t_max].
    guide_t_min: int = 0
    guide_t_max: int = 1000
    # Joint sampling: decode the context estimate every `context_refresh` steps.
    context_refresh: int = 1
    # Joint sampling: also pull the context towards the downsampled details.
    bidirectional: bool = False
    # Divide each latent's pulled-back step by max(1, rho^2), rho = |g| / |e|.
    # A learned denoiser's clean estimate amplifies z_t perturbations by up
    # to 1 / sqrt(alpha_bar_t); undamped, lam * g then overshoots and diverges.
    damping: bool = True

    def __post_init__(self):
        if self.delta <= 0 or self.zeta <= 0:
            raise DomainError("delta and zeta must be positive")
        if self.K < 1 or self.steps < 1 or self.context_refresh < 1:
            raise DomainError("K, steps and context_refresh must be >= 1")
        if self.mode not in ("approx", "exact"):
            raise DomainError(f"unknown guidance mode {self.mode!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise DomainError("eta must lie in [0, 1]")

    def gain(self, factor: int) -> float:
        return float(factor * factor) if self.adjoint_gain is None else float(self.adjoint_gain)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Measurement:
    """Pixel-space target ``y`` for ``A arrange(x)`` over a ``rows x cols`` grid."""

    y: np.ndarray
    op: DownsampleOp
    rows: int = 1
    cols: int = 1

    def forward(self, images: np.ndarray) -> np.ndarray:
        """``A arrange(images)`` for an (N, H, W, 3) batch; returns (Y, X, 3)."""
        return apply(self.op, arrange_batch(images, self.rows, self.cols))[0]

    def residual(self, images: np.ndarray) -> np.ndarray:
        r = self.forward(images) - self.y
        if r.shape != self.y.shape:
            raise DimensionError(f"measurement {self.y.shape} vs forward map {r.shape}")
        return r

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        """``A^T r`` split back into the (N, H, W, 3) patch batch."""
        return split_batch(apply_transpose(self.op, r[None]), self.rows, self.cols)


# -- DDIM -------------------------------------------------------------------------


def ddim_timesteps(T_: int, steps: int) -> list[tuple[int, int]]:
    """``steps`` evenly spaced (t, t_prev) pairs from ``T_`` down to 0."""
    if not 1 <= steps <= T_:
        raise DomainError(f"DDIM step count must be in [1, {T_}]")
    ts = np.round(np.linspace(T_, 0, steps + 1)).astype(int)
    return [(int(a), int(b)) for a, b in zip(ts[:-1], ts[1:])]


def ddim_sigma(s: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab, ab_prev = s.alpha_bar[t], s.alpha_bar[t_prev]
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)))


def ddim_step(s: NoiseSchedule, z_t, z0_hat, eps_hat, t: int, t_prev: int, eta: float = 0.0, rng=None) -> np.ndarray:
    if not 0 <= t_prev < t <= s.T:
        raise DomainError(f"invalid DDIM step {t} -> {t_prev}")
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    if t_prev == 0:
        return z0_hat.copy()
    sigma = ddim_sigma(s, t, t_prev, eta)
    ab_prev = s.alpha_bar[t_prev]
    out = np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev - sigma**2) * np.asarray(eps_hat)
    if sigma > 0:
        if rng is None:
            raise DomainError("stochastic DDIM (eta > 0) needs a noise generator")
        out = out + sigma * rng.standard_normal(out.shape)
    return out


def _check_finite(x: np.ndarray, t: int, what: str):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what} at timestep {t}", step=t)


def ddim_sample(eps_fn: EpsFn, s: NoiseSchedule, shape, steps: int = 50, eta: float = 0.0, seed: int = 0, z_T=None) -> np.ndarray:
    noise = rngmod.stream(seed, "noise")
    z = noise.standard_normal(shape) if z_T is None else np.array(z_T, dtype=np.float64)
    for t, tp in ddim_timesteps(s.T, steps):
        eps = eps_fn(z, t)
        z0 = estimate_clean(s, z, t, eps)
        z = ddim_step(s, z, z0, eps, t, tp, eta, noise)
        _check_finite(z, t, "latent")
    return z


# -- predictors ---------------------------------------------------------------------


def denoiser_predictor(net, tokens=None, w: float = 2.0) -> EpsFn:
    """Guided predictor; ``tokens`` is (n, H_c), (B, n, H_c) or None (unconditional)."""

    def eps_fn(z, t):
        return guided_epsilon(net, z, t, tokens, w)

    return eps_fn


def oracle_predictor(oracle: GaussianOracle, s: NoiseSchedule) -> EpsFn:
    def eps_fn(z, t):
        return oracle_epsilon(oracle, s, z, t)

    return eps_fn


# -- error directions ----------------------------------------------------------------


def constraint(codec: Codec, z0_hat, m: Measurement) -> float:
    r = m.residual(codec.decode(_batch(z0_hat)))
    return float(np.sum(r * r))


def _batch(z):
    z = np.asarray(z, dtype=np.float64)
    return z[None] if z.ndim == 3 else z


def exact_error_direction(codec: Codec, z0_hat, m: Measurement) -> np.ndarray:
    """``grad_{z0} ||A arrange(Dec(z0)) - y||^2`` by reverse mode through the decoder."""
    z0 = np.asarray(z0_hat, dtype=np.float64)
    zb = Tensor(_batch(z0), requires_grad=True)
    with Tape() as tape:
        try:
            x = codec.decode_t(zb)
        except NotImplementedError as exc:
            raise CapabilityError(f"codec {codec.kind!r} has no differentiable decode path") from exc
        d = apply_t(m.op, arrange_batch(x, m.rows, m.cols)) - m.y[None]
        c = T.sum_(d * d)
    (g,) = tape.gradient(c, [zb])
    return g.reshape(z0.shape)


def codec_error_approx(codec: Codec, z0_hat, m: Measurement, zeta: float = 0.005, gain: float = 1.0) -> np.ndarray:
    """Forward-only estimate of half the exact error direction.

    ``[Enc(Dec(z0) + zeta g e_img) - Enc(Dec(z0))] / zeta`` with
    ``e_img = A^T (A Dec(z0) - y)`` and ``g = gain``.
    """
    if zeta <= 0:
        raise DomainError("zeta must be positive")
    z0 = np.asarray(z0_hat, dtype=np.float64)
    x = codec.decode(_batch(z0))
    e_img = gain * m.adjoint(m.residual(x))
    if not np.any(e_img):
        return np.zeros_like(z0)
    base = codec.encode(x, strict=False)
    e = (codec.encode(x + zeta * e_img, strict=False) - base) / zeta
    return e.reshape(z0.shape)


def _direction(codec, z0, m, cfg: GuidanceConfig) -> np.ndarray:
    gain = cfg.gain(m.op.factor)
    if cfg.mode == "exact":
        # The forward-only estimate omits the gradient's factor 2 and, for a
        # decoder ``Dec(z) = dec(z / k)`` with isometric ``dec``, equals
        # ``k^2 / 2`` times the gradient; rescale so both modes share lam.
        k2 = codec.latent_scale**2
        return 0.5 * k2 * gain * exact_error_direction(codec, z0, m)
    return codec_error_approx(codec, z0, m, cfg.zeta, gain)


def _amplification(g: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Per-latent ``max(1, (|g| / |e|)^2)``, shaped to broadcast over ``g``."""
    axes = tuple(range(1, g.ndim))
    ge = np.sum(g * g, axis=axes, keepdims=True)
    ee = np.sum(e * e, axis=axes, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ee > 0, ge / ee, 1.0)
    return np.maximum(ratio, 1.0)


def _guide(eps_fn, s, codec, z, t, m, cfg, record):
    """One guidance update of ``z_t``; returns the new ``z_t``."""
    eps = eps_fn(z, t)
    z0 = estimate_clean(s, z, t, eps)
    e = _direction(codec, z0, m, cfg)
    zd = z + cfg.delta * e
    g = (estimate_clean(s, zd, t, eps_fn(zd, t)) - z0) / cfg.delta
    if cfg.damping:
        g = g / _amplification(g, e)
    z_new = z - cfg.lam * g
    _check_finite(z_new, t, "guided latent")
    if record is not None:
        before = constraint(codec, z0, m)
        after = constraint(codec, estimate_clean(s, z_new, t, eps_fn(z_new, t)), m)
        record.append({"t": t, "c_before": before, "c_after": after})
    return z_new


# -- guided solve for a fixed measurement -----------------------------------------------------


@dataclass
class SolveResult:
    latent: np.ndarray
    image: np.ndarray
    residual_rmse: float
    trajectory: list = field(default_factory=list)


def _guided_at(cfg: GuidanceConfig, t: int) -> bool:
    return cfg.lam != 0.0 and cfg.guide_t_min <= t <= cfg.guide_t_max


def guided_ddim_solve(
    eps_fn: EpsFn,
    codec: Codec,
    m: Measurement,
    cfg: GuidanceConfig,
    s: NoiseSchedule | None = None,
    seed: int = 0,
    latent_shape=None,
    record_constraint: bool = False,
) -> SolveResult:
    """Guided DDIM for a fixed measurement over a ``m.rows x m.cols`` latent grid."""
    s = s or NoiseSchedule()
    if latent_shape is None:
        ph = m.y.shape[0] * m.op.factor // m.rows
        pw = m.y.shape[1] * m.op.factor // m.cols
        latent_shape = (m.rows * m.cols,) + codec.latent_shape(ph, pw)
    noise = rngmod.stream(seed, "noise")
    z = noise.standard_normal(latent_shape)
    record = [] if record_constraint else None
    traj = []
    for t, tp in ddim_timesteps(s.T, cfg.steps):
        if _guided_at(cfg, t):
            for _ in range(cfg.K):
                z = _guide(eps_fn, s, codec, z, t, m, cfg, record)
        eps = eps_fn(z, t)
        z0 = estimate_clean(s, z, t, eps)
        z = ddim_step(s, z, z0, eps, t, tp, cfg.eta, noise)
        _check_finite(z, t, "latent")
        traj.append({"t": t, "residual_rmse": _rmse(m.residual(codec.decode(z0)))})
    image = codec.decode(z)
    res = _rmse(m.residual(image))
    if record is not None:
        for entry, c in zip(traj, _group(record, cfg)):
            entry["guidance"] = c
    return SolveResult(latent=z, image=image, residual_rmse=res, trajectory=traj)


def _group(record, cfg):
    return [record[i : i + cfg.K] for i in range(0, len(record), cfg.K)]


def _rmse(r) -> float:
    return float(np.sqrt(np.mean(np.square(r))))


# -- joint multi-scale sampling ---------------------------------------------


@dataclass
class JointResult:
    details: PatchGrid  # decoded detail patches
    context: np.ndarray  # decoded context image
    detail_latents: np.ndarray
    context_latent: np.ndarray
    residual_rmse: float
    trajectory: list = field(default_factory=list)


def joint_multiscale_sample(
    eps_detail: EpsFn,
    eps_context: EpsFn,
    codec: Codec,
    scale_gap: int,
    cfg: GuidanceConfig,
    s: NoiseSchedule | None = None,
    seed: int = 0,
    latent_hw: tuple[int, int] = (8, 8),
) -> JointResult:
    """Co-sample a ``2^gap x 2^gap`` grid of detail patches and one context patch.

    Every DDIM step advances both; before it, the detail latents are guided
    towards the current context estimate ``Dec(z0_hat^L)`` under
    ``A = DownsampleOp(2^gap)``.
    """
    if scale_gap < 1:
        raise DomainError("context scale must be coarser than the detail scale")
    s = s or NoiseSchedule()
    side = 2**scale_gap
    op = DownsampleOp(side, cfg.kernel)
    lh, lw = latent_hw
    shape = (lh, lw, codec.latent_channels)
    noise = rngmod.stream(seed, "noise")
    z = noise.standard_normal((side * side,) + shape)
    zl = noise.standard_normal((1,) + shape)
    y = None
    traj = []
    for k, (t, tp) in enumerate(ddim_timesteps(s.T, cfg.steps)):
        eps_l = eps_context(zl, t)
        z0l = estimate_clean(s, zl, t, eps_l)
        if y is None or k % cfg.context_refresh == 0:
            y = codec.decode(z0l)[0]
        m = Measurement(y, op, side, side)
        if _guided_at(cfg, t):
            for _ in range(cfg.K):
                z = _guide(eps_detail, s, codec, z, t, m, cfg, None)
            if cfg.bidirectional:
                zl = _guide_context(eps_context, s, codec, zl, z, eps_detail, t, m, cfg)
                eps_l = eps_context(zl, t)
                z0l = estimate_clean(s, zl, t, eps_l)
        eps = eps_detail(z, t)
        z0 = estimate_clean(s, z, t, eps)
        traj.append({"t": t, "residual_rmse": _rmse(m.residual(codec.decode(z0)))})
        z = ddim_step(s, z, z0, eps, t, tp, cfg.eta, noise)
        zl = ddim_step(s, zl, z0l, eps_l, t, tp, cfg.eta, noise)
        _check_finite(z, t, "detail latent")
        _check_finite(zl, t, "context latent")
    details = codec.decode(z)
    context = codec.decode(zl)[0]
    res = _rmse(Measurement(context, op, side, side).residual(details))
    return JointResult(PatchGrid(side, side, details), context, z, zl, res, traj)


def _guide_context(eps_context, s, codec, zl, z, eps_detail, t, m, cfg):
    """Pull the context latent towards ``A arrange(Dec(z0_hat))`` (experimental)."""
    z0 = estimate_clean(s, z, t, eps_detail(z, t))
    target = m.forward(codec.decode(z0))
    eps_l = eps_context(zl, t)
    z0l = estimate_clean(s, zl, t, eps_l)
    x = codec.decode(z0l)
    base = codec.encode(x, strict=False)
    e = (codec.encode(x + cfg.zeta * (x - target[None]), strict=False) - base) / cfg.zeta
    zd = zl + cfg.delta * e
    g = (estimate_clean(s, zd, t, eps_context(zd, t)) - z0l) / cfg.delta
    if cfg.damping:
        g = g / _amplification(g, e)
    return zl - cfg.lam * g


# -- super-resolution and seam repair -----------------------------------------------------


def super_resolve(
    eps_fn: EpsFn,
    codec: Codec,
    low_res: np.ndarray,
    factor: int,
    cfg: GuidanceConfig,
    patch: int = 32,
    s: NoiseSchedule | None = None,
    seed: int = 0,
) -> SolveResult:
    """Upsample ``low_res`` by ``factor`` with guided DDIM over output tiles.

    The output is a grid of ``patch``-sized tiles solved together as one
    latent batch (``eps_fn`` sees all tiles, so per-tile conditions go in its
    token batch) under the fixed measurement ``y = low_res``.
    """
    low_res = np.asarray(low_res, dtype=np.float64)
    h, w = low_res.shape[:2]
    if (h * factor) % patch or (w * factor) % patch:
        raise DimensionError(f"{h}x{w} x{factor} does not tile into {patch}-pixel patches")
    rows, cols = h * factor // patch, w * factor // patch
    m = Measurement(low_res, DownsampleOp(factor, cfg.kernel), rows, cols)
    shape = (rows * cols,) + codec.latent_shape(patch, patch)
    out = guided_ddim_solve(eps_fn, codec, m, cfg, s, seed=seed, latent_shape=shape)
    hi = arrange(PatchGrid(rows, cols, out.image))
    return SolveResult(latent=out.latent, image=hi, residual_rmse=out.residual_rmse, trajectory=out.trajectory)


def seam_gradient(image: np.ndarray, rows: int, cols: int) -> float:
    """Mean absolute pixel difference across internal patch borders."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    ph, pw = h // rows, w // cols
    diffs = [np.abs(image[:, c * pw] - image[:, c * pw - 1]) for c in range(1, cols)]
    diffs += [np.abs(image[r * ph] - image[r * ph - 1]) for r in range(1, rows)]
    return float(np.mean(diffs)) if diffs else 0.0


def repair_seams(
    eps_fn: EpsFn,
    codec: Codec,
    grid: PatchGrid,
    t_renoise: int,
    width: int,
    s: NoiseSchedule | None = None,
    steps: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Re-noise and re-denoise patch-sized windows centred on internal borders.

    Only pixels within ``width`` of a border change; the replacement weight
    ramps linearly from 1 at the border to 0 at distance ``width``.
    Returns the repaired arranged image.
    """
    s = s or NoiseSchedule()
    s.check_t(t_renoise)
    image = arrange(grid)
    if width <= 0 or (grid.rows == 1 and grid.cols == 1):
        return image
    ph, pw = grid.patches.shape[1:3]
    if width > min(ph, pw) // 2:
        raise DomainError("strip width must not exceed half a patch")
    h, w = image.shape[:2]
    out = image.copy()
    noise = rngmod.stream(seed, "noise")
    windows = []
    for r in range(grid.rows):
        for c in range(1, grid.cols):
            windows.append((r * ph, c * pw - pw // 2, "v", c * pw))
    for r in range(1, grid.rows):
        for c in range(grid.cols):
            windows.append((r * ph - ph // 2, c * pw, "h", r * ph))
    for r in range(1, grid.rows):
        for c in range(1, grid.cols):
            windows.append((r * ph - ph // 2, c * pw - pw // 2, "x", (r * ph, c * pw)))
    if not windows:
        return image
    crops = np.stack([image[y0 : y0 + ph, x0 : x0 + pw] for y0, x0, _, _ in windows])
    z0 = codec.encode(np.clip(crops, 0.0, 1.0))
    ab = s.alpha_bar[t_renoise]
    z = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise.standard_normal(z0.shape)
    ts = np.round(np.linspace(t_renoise, 0, steps + 1)).astype(int)
    for t, tp in zip(ts[:-1], ts[1:]):
        eps = eps_fn(z, int(t))
        zh = estimate_clean(s, z, int(t), eps)
        z = ddim_step(s, z, zh, eps, int(t), int(tp))
        _check_finite(z, int(t), "seam latent")
    fixed = codec.decode(z)
    yy, xx = np.mgrid[0:ph, 0:pw]
    for (y0, x0, kind, border), patch in zip(windows, fixed):
        if kind == "v":
            dist = np.abs(xx + x0 - border + 0.5)
        elif kind == "h":
            dist = np.abs(yy + y0 - border + 0.5)
        else:
            by, bx = border
            dist = np.minimum(np.abs(yy + y0 - by + 0.5), np.abs(xx + x0 - bx + 0.5))
        wgt = np.clip(1.0 - (dist - 0.5) / width, 0.0, 1.0)[..., None]
        region = out[y0 : y0 + ph, x0 : x0 + pw]
        region[...] = np.where(wgt > 0, (1.0 - wgt) * region + wgt * patch, region)
    return out


# -- manifests ---------------------------------------------------------------------------


def run_manifest(kind: str, cfg: GuidanceConfig, seed: int, residual: float, trajectory=None, **extra) -> dict:
    out = {"kind": kind, "seed": seed, "guidance": cfg.to_json(), "residual_rmse": residual}
    if trajectory is not None:
        out["trajectory"] = trajectory
    out.update(extra)
    return out


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))

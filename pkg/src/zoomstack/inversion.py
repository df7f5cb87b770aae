"""Condition inversion: fit a descriptor grid to an image under a frozen model.

Each step draws one (t, eps) pair with ``t`` on a linear annealing schedule,
evaluates the denoising loss of the frozen denoiser conditioned on
``summarize(u, scale)`` plus a cosine-similarity prior over grid cells, and
takes one Adam step on ``u`` only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, DomainError, NumericalError
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.io import save_zten
from .numerics.optim import Adam
from .numerics.tensor import Tape, Tensor
from .pyramid import EmbeddingGrid
from .schedule import NoiseSchedule
from .summarizer import pack_tokens


@dataclass
class InversionConfig:
    n: int = 200
    t_hi: int = 950
    t_lo: int = 50
    lam_prior: float = 0.01
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    init_noise: float = 0.01
    seed: int = 0
    # Guidance scale for sampling with the inferred grid.  The fit is against
    # the plain conditional prediction, so 1.0 uses the grid as it was fitted.
    w: float = 1.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.n < 1 or not 1 <= self.t_lo <= self.t_hi:
            raise DomainError("inversion needs n >= 1 and 1 <= t_lo <= t_hi")


def anneal_t(k: int, cfg: InversionConfig) -> int:
    """``round(t_hi - k (t_hi - t_lo) / (n - 1))``."""
    if not 0 <= k < cfg.n:
        raise DomainError(f"step {k} outside [0, {cfg.n})")
    if cfg.n == 1:
        return cfg.t_hi
    return int(round(cfg.t_hi - k * (cfg.t_hi - cfg.t_lo) / (cfg.n - 1)))


def _check_norms(norms: np.ndarray):
    bad = np.flatnonzero(norms.reshape(-1) == 0.0)
    if bad.size:
        raise NumericalError(f"zero-norm descriptor in grid cell {int(bad[0])}")


def prior_penalty(u) -> float:
    """Negative mean pairwise cosine similarity over grid cells (0 for one cell)."""
    values = u.values if isinstance(u, EmbeddingGrid) else np.asarray(u)
    return float(prior_penalty_t(Tensor(values)).data)


def prior_penalty_t(u: Tensor) -> Tensor:
    r, c, d = u.shape
    n = r * c
    if n < 2:
        return Tensor(np.zeros(()))
    flat = T.reshape(u, (n, d))
    norms = np.sqrt((flat.data * flat.data).sum(axis=1))
    _check_norms(norms)
    unit = flat / T.sqrt(T.sum_(flat * flat, axis=1, keepdims=True))
    gram = T.matmul(unit, T.transpose(unit))
    off = T.sum_(gram) - T.sum_(T.mul(gram, Tensor(np.eye(n))))
    return off * (-1.0 / (n * (n - 1)))


@dataclass
class InversionResult:
    grid: EmbeddingGrid
    losses: list = field(default_factory=list)
    timesteps: list = field(default_factory=list)


def grid_side(scale: int, cap_side: int = 4) -> int:
    return min(2 ** (scale - 1), cap_side)


def infer_conditions(
    denoiser,
    summarizer,
    codec,
    image: np.ndarray,
    scale: int,
    cfg: InversionConfig | None = None,
    init_mean: np.ndarray | None = None,
    s: NoiseSchedule | None = None,
    cap_side: int = 4,
) -> InversionResult:
    """Optimise the descriptor grid ``u`` for ``image`` at ``scale``.

    ``init_mean`` is the per-cell starting descriptor (defaults to zeros, the
    mean of normalised descriptors).
    """
    cfg = cfg or InversionConfig()
    s = s or NoiseSchedule()
    side = grid_side(scale, cap_side)
    d = summarizer.dim_in
    mean = np.zeros(d) if init_mean is None else np.asarray(init_mean, dtype=np.float64)
    init_rng = rngmod.stream(cfg.seed, "init")
    u0 = np.broadcast_to(mean, (side, side, d)) + cfg.init_noise * init_rng.standard_normal((side, side, d))
    u = Tensor(u0, requires_grad=True)
    z0 = codec.encode(image)[None]
    noise = rngmod.stream(cfg.seed, "noise")
    opt = Adam([u], lr=cfg.lr, betas=cfg.betas)
    _, mask = pack_tokens(EmbeddingGrid(u0, scale), summarizer.cap)
    n_cells = side * side
    losses, ts = [], []
    with denoiser.frozen(), summarizer.frozen():
        for k in range(cfg.n):
            t = anneal_t(k, cfg)
            eps = noise.standard_normal(z0.shape)
            ab = s.alpha_bar[t]
            z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
            with Tape() as tape:
                flat = T.reshape(u, (1, n_cells, d))
                if n_cells < summarizer.cap:
                    flat = T.concat([flat, Tensor(np.zeros((1, summarizer.cap - n_cells, d)))], axis=1)
                tokens = summarizer(flat, mask[None], [scale])
                pred = denoiser(Tensor(z_t), [t], denoiser.context(tokens))
                diff = pred - eps
                loss = T.mean(diff * diff) + prior_penalty_t(u) * cfg.lam_prior
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite inversion loss at step {k}", step=k)
            (g,) = tape.gradient(loss, [u])
            opt.step([g])
            losses.append(value)
            ts.append(t)
    return InversionResult(EmbeddingGrid(u.data.copy(), scale), losses, ts)


def save_inversion(path, result: InversionResult, cfg: InversionConfig, **extra) -> None:
    """ZTEN grid plus a JSON sidecar with the loss trajectory and settings."""
    path = Path(path)
    save_zten(path, result.grid.values)
    side = {
        "scale": result.grid.scale,
        "config": asdict(cfg),
        "losses": result.losses,
        "timesteps": result.timesteps,
    }
    side.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2))

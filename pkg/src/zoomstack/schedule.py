"""Noise schedule, forward corruption and the Tweedie clean estimate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule.

    Tables are indexed by timestep ``t`` in ``0..T`` with ``alpha_bar[0] = 1``;
    entry 0 of ``betas`` is unused and set to 0.
    """

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)
    beta_tilde: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.steps < 1 or not 0 < self.beta_start < self.beta_end < 1:
            raise DomainError("schedule needs steps >= 1 and 0 < beta_start < beta_end < 1")
        betas = np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.steps)])
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        beta_tilde = np.zeros_like(betas)
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * betas[1:]
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bar", alpha_bar), ("beta_tilde", beta_tilde)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.steps

    def to_json(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise DomainError(f"timestep out of range [1, {self.steps}]: {t}")
        return t


def _per_sample(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    # Scalar tables broadcast; per-sample tables align with the leading axis.
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - 1))


def diffuse(s: NoiseSchedule, z0, t, eps) -> np.ndarray:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` may be per-sample."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DomainError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    ab = _per_sample(s.alpha_bar[s.check_t(t)], z0)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def estimate_clean(s: NoiseSchedule, z_t, t, eps_hat) -> np.ndarray:
    """Tweedie estimate ``(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``."""
    z_t = np.asarray(z_t, dtype=np.float64)
    ab = _per_sample(s.alpha_bar[s.check_t(t)], z_t)
    return (z_t - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)

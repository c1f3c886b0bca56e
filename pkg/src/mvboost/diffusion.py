"""Variance-preserving noise schedules, forward noising and the
partial-strength refinement driver.

Refinement noises renders to ``t = round(s * T)`` and walks back to 0 with the
deterministic DDIM update (eta = 0), asking a pluggable denoiser for the clean
estimate at every sub-timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .core import MultiViewSet, ParameterError, Rng, sample_standard_normal

ALPHA_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine_vp"

    def __post_init__(self):
        if len(self.alpha) != self.T + 1 or len(self.sigma) != self.T + 1:
            raise ParameterError("schedule tables must hold T + 1 entries")


def build_schedule(T: int = 1000, kind: str = "cosine_vp") -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be an integer >= 1, got {T}")
    T = int(T)
    t = np.arange(T + 1)
    if kind == "cosine_vp":
        alpha = np.maximum(np.cos(t / T * np.pi / 2), ALPHA_FLOOR)
    elif kind == "linear_vp":
        # DDPM betas 1e-4 .. 0.02, stretched so the endpoint matches T = 1000
        betas = np.linspace(1e-4, 0.02, T) * (1000.0 / T)
        betas = np.minimum(betas, 0.999)
        alpha = np.sqrt(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    alpha[0] = 1.0
    if np.any(np.diff(alpha[1:]) >= 0) or alpha[1] >= 1.0:
        raise ParameterError(f"T={T} too large: alpha is no longer strictly decreasing")
    sigma = np.sqrt(1.0 - alpha * alpha)
    sigma[0] = 0.0
    return NoiseSchedule(T, alpha, sigma, kind)


def strength_to_timestep(s: float, T: int) -> int:
    if not 0.0 <= s <= 1.0:
        raise ParameterError(f"strength {s} outside [0, 1]")
    return int(min(max(round(s * T), 0), T))


def add_noise(x: np.ndarray, t: int, schedule: NoiseSchedule, rng: Rng) -> np.ndarray:
    """alpha_t * x + sigma_t * eps with fresh standard normal eps."""
    x = np.asarray(x, dtype=np.float64)
    eps = sample_standard_normal(rng, x.size).reshape(x.shape)
    return noise_with(x, t, schedule, eps)


def noise_with(x: np.ndarray, t: int, schedule: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    if not 0 <= t <= schedule.T:
        raise ParameterError(f"timestep {t} outside [0, {schedule.T}]")
    if t == 0:
        return np.array(x, dtype=np.float64, copy=True)
    return schedule.alpha[t] * x + schedule.sigma[t] * eps


class Denoiser(Protocol):
    """Predicts clean views from noised ones.

    ``noise`` is the noise component the driver knows to be present in
    ``noised`` (the forward sample on the first call, the DDIM-implied noise
    afterwards).  A denoiser may ignore it.
    """

    def __call__(self, noised: np.ndarray, condition: np.ndarray, t: int,
                 schedule: NoiseSchedule, noise: np.ndarray | None = None) -> np.ndarray: ...


@dataclass
class RefineConfig:
    strength: float = 0.95
    steps: int = 1
    schedule: NoiseSchedule = field(default_factory=build_schedule)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ParameterError(f"strength {self.strength} outside [0, 1]")
        if self.strength > 0 and self.steps < 1:
            raise ParameterError("steps must be >= 1 when strength > 0")


def sub_timesteps(t: int, steps: int) -> np.ndarray:
    """Strictly decreasing integer timesteps from t down to 0."""
    taus = np.round(np.linspace(t, 0, steps + 1)).astype(int)
    return np.unique(taus)[::-1]


def refine(renders: MultiViewSet, condition: np.ndarray, config: RefineConfig,
           denoiser: Denoiser, rng: Rng | None = None) -> MultiViewSet:
    if renders.stage_tag != "rendered":
        raise ParameterError(f"refine expects rendered views, got {renders.stage_tag!r}")
    condition = np.asarray(condition, dtype=np.float64)
    if condition.shape != renders.images.shape[1:]:
        raise ParameterError(f"condition shape {condition.shape} != view shape {renders.images.shape[1:]}")
    sched = config.schedule
    t = strength_to_timestep(config.strength, sched.T)
    if t == 0:
        return renders.with_images(renders.images.copy(), "refined")
    rng = rng or Rng(config.seed)
    x0_in = renders.images
    eps = np.stack([sample_standard_normal(rng.split(i), x0_in[i].size).reshape(x0_in[i].shape)
                    for i in range(len(renders))])
    x = noise_with(x0_in, t, sched, eps)
    taus = sub_timesteps(t, config.steps)
    for a, b in zip(taus[:-1], taus[1:]):
        x0 = np.asarray(denoiser(x, condition, int(a), sched, noise=eps), dtype=np.float64)
        if x0.shape != x.shape:
            raise ParameterError("denoiser changed the view stack shape")
        eps = (x - sched.alpha[a] * x0) / sched.sigma[a]
        x = x0 if b == 0 else sched.alpha[b] * x0 + sched.sigma[b] * eps
    return renders.with_images(np.clip(x, 0.0, 1.0), "refined")


class IdentityDenoiser:
    """Returns the clipped signal estimate x_t / alpha_t."""

    def __call__(self, noised, condition, t, schedule, noise=None):
        return np.clip(noised / schedule.alpha[t], 0.0, 1.0)

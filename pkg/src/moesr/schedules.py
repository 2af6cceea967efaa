"""Per-expert diffusion noise schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; alpha_bar is indexed 0..T with alpha_bar[0]=1."""

    timesteps: int
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def t_max(self) -> int:
        return self.timesteps


def linear_schedule(timesteps: int, beta_min: float = 1e-4,
                    beta_max: float = 0.02) -> NoiseSchedule:
    if timesteps < 1:
        raise ValueError("schedule needs at least one step")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("betas must satisfy 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, timesteps)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(timesteps, betas, alpha_bars)


def _check_t(schedule: NoiseSchedule, t: int):
    if not (0 <= t <= schedule.timesteps):
        raise ValueError(
            f"timestep {t} outside [0, {schedule.timesteps}]")


def forward_noise(z0: Tensor, t: int, schedule: NoiseSchedule,
                  rng: np.random.Generator):
    """Noising z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps; at t=0 the
    convention abar=1 returns z0 exactly.  Returns (z_t, eps)."""
    _check_t(schedule, t)
    ab = schedule.alpha_bars[t]
    eps = Tensor(rng.standard_normal(z0.shape))
    z_t = z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)
    return z_t, eps


def estimate_clean(z_t: Tensor, eps_hat: Tensor, t: int,
                   schedule: NoiseSchedule) -> Tensor:
    """Invert the noising equation for the clean latent given a noise
    estimate: (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    _check_t(schedule, t)
    ab = schedule.alpha_bars[t]
    if ab <= 0.0:
        raise ZeroDivisionError("alpha_bar reached zero; cannot invert")
    return (z_t - eps_hat * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))


def ddim_step(z_t: Tensor, eps_hat: Tensor, t: int, t_next: int,
              schedule: NoiseSchedule) -> Tensor:
    """Deterministic (eta=0) update from t to t_next < t."""
    z0_hat = estimate_clean(z_t, eps_hat, t, schedule)
    if t_next == 0:
        return z0_hat
    ab = schedule.alpha_bars[t_next]
    return z0_hat * np.sqrt(ab) + eps_hat * np.sqrt(1.0 - ab)

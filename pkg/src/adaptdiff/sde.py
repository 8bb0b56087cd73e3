"""Variance-preserving SDE with a linear rate schedule, plus its discretized reverse sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "NoiseSchedule",
    "ReverseSamplerConfig",
    "forward_marginal",
    "reverse_step",
    "sample_prior",
    "reverse_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    beta0: float = 0.05
    beta1: float = 20.0

    def __post_init__(self):
        if not 0 < self.beta0 < self.beta1:
            raise ValueError("schedule needs 0 < beta0 < beta1")

    @staticmethod
    def _check(t, lo_open: bool = False):
        t = np.asarray(t, dtype=np.float64)
        bad = (t <= 0) if lo_open else (t < 0)
        if np.any(bad | (t > 1)):
            raise ValueError(f"time outside {'(0, 1]' if lo_open else '[0, 1]'}: {t}")
        return t

    def beta(self, t):
        t = self._check(t)
        return self.beta0 + (self.beta1 - self.beta0) * t

    def cum_beta(self, t):
        """Closed-form integral of the rate from 0 to t."""
        t = self._check(t)
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def lambda_t(self, t):
        """Variance of the forward marginal around its mean, 1 - exp(-cum_beta(t))."""
        t = self._check(t, lo_open=True)
        return -np.expm1(-self.cum_beta(t))

    def alpha(self, t):
        """Mean coefficient exp(-cum_beta(t)/2)."""
        return np.exp(-0.5 * self.cum_beta(t))


def forward_marginal(x0, t, eps, schedule: NoiseSchedule = NoiseSchedule()):
    """Corrupt ``x0`` to time ``t`` with standard-normal ``eps``.

    ``t`` may be a scalar or one time per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t == 0):
        lam = np.where(t == 0, 0.0, schedule.lambda_t(np.where(t == 0, 1.0, t)))
    else:
        lam = schedule.lambda_t(t)
    a = schedule.alpha(t)
    if t.ndim:
        a = a.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
        lam = lam.reshape(a.shape)
    return x0 * a + np.sqrt(lam) * eps


@dataclass(frozen=True)
class ReverseSamplerConfig:
    steps: int = 50
    temperature: float = 1.5
    # False drops z at the final step (t = 1/N).
    noise_at_every_step: bool = True
    # Ablation: also divide every per-step z by sqrt(temperature).
    temper_step_noise: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def reverse_step(x_t, t: float, score, config: ReverseSamplerConfig, gen: Optional[np.random.Generator],
                 schedule: NoiseSchedule = NoiseSchedule(), add_noise: bool = True):
    """Move from ``t`` to ``t - 1/N``: x + (b/N)(x/2 + score) + sqrt(b/N) z."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h = float(schedule.beta(t)) / config.steps
    out = x_t + h * (0.5 * x_t + np.asarray(score))
    if add_noise and gen is not None:
        z = gen.standard_normal(x_t.shape)
        if config.temper_step_noise:
            z = z / np.sqrt(config.temperature)
        out = out + np.sqrt(h) * z
    return out


def sample_prior(shape, temperature: float, gen: np.random.Generator):
    """Draw x_1 ~ N(0, I / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return gen.standard_normal(shape) / np.sqrt(temperature)


def reverse_sample(
    score_fn: Callable[[np.ndarray, float], np.ndarray],
    x1,
    config: ReverseSamplerConfig,
    gen: np.random.Generator,
    schedule: NoiseSchedule = NoiseSchedule(),
    callback: Optional[Callable[[int, float, np.ndarray, np.ndarray], None]] = None,
):
    """Run all N reverse steps from ``x1`` and return x_0.

    ``callback(step_index, t, x_t, score)`` sees the state before each update.
    """
    x = np.asarray(x1, dtype=np.float64)
    n = config.steps
    for i in range(n, 0, -1):
        t = i / n
        s = score_fn(x, t)
        if callback is not None:
            callback(n - i, t, x, s)
        noisy = config.noise_at_every_step or i > 1
        x = reverse_step(x, t, s, config, gen, schedule, add_noise=noisy)
    return x

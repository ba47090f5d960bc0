"""Variance-exploding SDE: geometric noise schedule and reverse-time updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 0.01
SIGMA_MAX = 378.0
TRAIN_T_MIN = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    N: int = 2000

    def __post_init__(self):
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be positive")
        if not self.sigma_max > self.sigma_min:
            raise ValueError("sigma_max must exceed sigma_min")
        if self.N < 2:
            raise ValueError("N must be at least 2")

    def sigma(self, t):
        return sigma(self, t)

    def sigma_at(self, i: int) -> float:
        """Discrete level ``i`` in ``0..N-1``; both endpoints are exact."""
        if not 0 <= i <= self.N - 1:
            raise IndexError(f"step index {i} outside 0..{self.N - 1}")
        if i == 0:
            return float(self.sigma_min)
        if i == self.N - 1:
            return float(self.sigma_max)
        return float(sigma(self, i / (self.N - 1)))

    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma_at(i) for i in range(self.N)])

    def to_dict(self) -> dict:
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "N": self.N}


def sigma(sched: NoiseSchedule, t):
    """``sigma_min * (sigma_max / sigma_min) ** t`` for ``t`` in [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or np.any(np.isnan(t_arr)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    out = sched.sigma_min * (sched.sigma_max / sched.sigma_min) ** t_arr
    # pin the endpoints so rounding in the power never moves them
    out = np.where(t_arr == 0, sched.sigma_min, np.where(t_arr == 1, sched.sigma_max, out))
    return float(out) if np.ndim(out) == 0 else out


def perturb(x0, t, z, sched: NoiseSchedule):
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs z {z.shape}")
    s = sigma(sched, t)
    if np.ndim(s):
        s = np.reshape(s, s.shape + (1,) * (x0.ndim - np.ndim(s)))
    return x0 + s * z


def tweedie_denoise(x_t, sigma_t, score_value):
    """Posterior-mean estimate ``x_t + sigma_t**2 * score``."""
    return x_t + sigma_t**2 * score_value


def predictor_step(x, i: int, score_value, z, sched: NoiseSchedule):
    """Reverse-diffusion (ancestral VE) move from level ``i`` to ``i - 1``."""
    if not 1 <= i <= sched.N - 1:
        raise IndexError(f"predictor step index {i} outside 1..{sched.N - 1}")
    var = sched.sigma_at(i) ** 2 - sched.sigma_at(i - 1) ** 2
    return x + var * score_value + math.sqrt(var) * z


def final_denoise(x, score_value, sched: NoiseSchedule):
    """Noise-free move from the lowest level to sigma = 0."""
    return x + sched.sigma_min**2 * score_value


def corrector_step(x, sigma_t, score_value, z, snr: float = 0.16):
    """One annealed-Langevin step.

    Returns ``(x_new, zero_score)``; when the score vanishes identically the
    step size is undefined and ``x`` is returned unchanged with the flag set.
    ``sigma_t`` is accepted for interface symmetry; the step size is set by
    the signal-to-noise ratio alone.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    g = float(np.linalg.norm(score_value))
    if g == 0.0:
        return x, True
    eps = 2.0 * (snr * float(np.linalg.norm(z)) / g) ** 2
    return x + eps * score_value + math.sqrt(2.0 * eps) * z, False


def corrector_step_batch(x, score_value, z, snr: float = 0.16):
    """Per-slice corrector over a ``(B, h, w)`` stack; norms are per slice.

    Returns ``(x_new, zero_mask)``.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    axes = tuple(range(1, x.ndim))
    g = np.sqrt(np.sum(score_value * score_value, axis=axes))
    zn = np.sqrt(np.sum(z * z, axis=axes))
    zero = g == 0.0
    eps = 2.0 * (snr * zn / np.where(zero, 1.0, g)) ** 2
    eps = np.where(zero, 0.0, eps).reshape((-1,) + (1,) * (x.ndim - 1))
    return x + eps * score_value + np.sqrt(2.0 * eps) * z, zero

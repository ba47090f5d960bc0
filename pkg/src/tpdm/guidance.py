"""Measurement-consistency gradients through the Tweedie estimate."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .operators import residual_grad
from .sde import sigma as sigma_of
from .sde import tweedie_denoise


class GuidanceMode(enum.Enum):
    EXACT_VJP = "exact_vjp"
    IDENTITY_JACOBIAN = "identity_jacobian"


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 1.0
    mode: GuidanceMode = GuidanceMode.EXACT_VJP
    normalize_residual: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError("guidance lambda must be finite and positive")
        object.__setattr__(self, "mode", GuidanceMode(self.mode))


def _norms(r):
    axes = (-2, -1)
    return np.sqrt(np.sum(np.abs(r) ** 2, axis=axes))


def guidance_from_score(model, op, x, y, t, sig, score, cfg: GuidanceConfig, vjp=None, return_residual=False):
    """Gradient of ``||A(x0_hat(x)) - y||^2`` given a precomputed score at ``x``.

    ``vjp`` may be a closure computing ``J^T v`` at ``x``; otherwise
    ``model.vjp`` is called.  Works on single slices or stacks.  With
    ``return_residual`` the summed squared residual is returned as well.
    """
    x0_hat = tweedie_denoise(x, sig, score)
    resid = op.apply(x0_hat) - y
    u = 2.0 * op.adjoint(resid)
    if cfg.mode is GuidanceMode.EXACT_VJP:
        if vjp is None and hasattr(model, "denoiser_vjp"):
            g = model.denoiser_vjp(x, t, u)
        else:
            jt = vjp(u) if vjp is not None else model.vjp(x, t, u)
            g = u + sig**2 * jt
    else:
        g = u
    if cfg.normalize_residual:
        n = _norms(resid)
        n = np.reshape(n, np.shape(n) + (1, 1))
        g = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
    if return_residual:
        return g, float(np.sum(np.abs(resid) ** 2))
    return g


def dps_grad(model, op, x, y, t, cfg: GuidanceConfig):
    sig = sigma_of(model.schedule, t)
    return guidance_from_score(model, op, x, y, t, sig, model.eval(x, t), cfg)


def dps_update(x_prime, grad, lam: float):
    return x_prime - lam * grad


__all__ = [
    "GuidanceConfig",
    "GuidanceMode",
    "dps_grad",
    "dps_update",
    "guidance_from_score",
    "residual_grad",
]

"""Synthetic ellipsoid phantoms and retrospective measurement simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .operators import (
    IdentityOperator,
    KSpaceOperator,
    MergeVariant,
    RadonGeometry,
    RadonOperator,
    ZMergeOperator,
    poisson_mask,
    zmerge_apply,
)
from .volume import SliceAxis, Volume3D, all_slices


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_ellipsoids: int = 6
    seed: int = 0
    intensity_range: tuple[float, float] = (0.2, 1.0)

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"phantom shape must be >= 8 per axis, got {self.shape}")
        if self.n_ellipsoids < 0:
            raise ValueError("n_ellipsoids must be non-negative")


def _rotation(g: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(g.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _cosine_ramp(d: np.ndarray) -> np.ndarray:
    """1 inside, 0 outside, raised-cosine transition over one voxel of signed distance."""
    return np.where(d <= -0.5, 1.0, np.where(d >= 0.5, 0.0, 0.5 * (1.0 - np.sin(np.pi * d))))


def make_phantom(spec: PhantomSpec) -> Volume3D:
    """Sum of randomly rotated ellipsoids with soft 1-voxel edges, clipped to [0, 1].

    The first ellipsoid is a large body that the others sit inside; later
    ones are smaller structures.
    """
    shape = tuple(spec.shape)
    vol = np.zeros(shape)
    if spec.n_ellipsoids == 0:
        return Volume3D(vol)
    g = rng.generator(spec.seed, rng.TAG_PHANTOM)
    n = np.array(shape, dtype=np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(s) - (s - 1) / 2.0 for s in shape], indexing="ij"), axis=-1)
    lo, hi = spec.intensity_range
    for k in range(spec.n_ellipsoids):
        if k == 0:
            radii = n / 2.0 * g.uniform(0.6, 0.85, 3)
            centre = g.uniform(-0.05, 0.05, 3) * n
            value = g.uniform(lo, lo + 0.25 * (hi - lo))
        else:
            radii = n / 2.0 * g.uniform(0.12, 0.4, 3)
            centre = g.uniform(-0.3, 0.3, 3) * n
            value = g.uniform(lo, hi)
        rot = _rotation(g)
        local = (grid - centre) @ rot
        rho = np.sqrt(np.sum((local / radii) ** 2, axis=-1))
        # signed distance along the ray from the centre, in voxels
        scale = np.sqrt(np.sum(local**2, axis=-1)) / np.maximum(rho, 1e-12)
        dist = (rho - 1.0) * scale
        vol += value * _cosine_ramp(dist)
    return Volume3D(np.clip(vol, 0.0, 1.0))


@dataclass(frozen=True)
class Task:
    """``kind`` is one of ``zsr`` (uses ``M``), ``csmri`` (``R``, ``mask_seed``,
    ``center_frac``, ``per_slice_masks``) or ``svct`` (``n_angles``)."""

    kind: str
    M: int = 1
    R: float = 8.0
    mask_seed: int = 0
    center_frac: float = 1.0 / 16
    per_slice_masks: bool = False
    n_angles: int = 12

    def __post_init__(self):
        if self.kind not in ("zsr", "csmri", "svct"):
            raise ValueError(f"unknown task {self.kind!r}")
        if self.M < 1 or self.R < 1 or self.n_angles < 1:
            raise ValueError(f"invalid task parameters: {self}")

    def to_dict(self) -> dict:
        if self.kind == "zsr":
            return {"kind": "zsr", "M": self.M}
        if self.kind == "csmri":
            return {
                "kind": "csmri",
                "R": self.R,
                "mask_seed": self.mask_seed,
                "center_frac": self.center_frac,
                "per_slice_masks": self.per_slice_masks,
            }
        return {"kind": "svct", "n_angles": self.n_angles}


class StackedKSpaceOperator:
    """k-space operator with a distinct mask per Axis3 plane (batched input only)."""

    def __init__(self, masks):
        self.ops = [KSpaceOperator(m) for m in masks]
        self.in_shape = self.out_shape = self.ops[0].in_shape
        self.complex = True

    def select(self, index: slice) -> "StackedKSpaceOperator":
        out = StackedKSpaceOperator.__new__(StackedKSpaceOperator)
        out.ops = self.ops[index]
        out.in_shape, out.out_shape, out.complex = self.in_shape, self.out_shape, True
        return out

    def apply(self, x):
        return np.stack([op.apply(s) for op, s in zip(self._pick(x), x)])

    def adjoint(self, m):
        return np.stack([op.adjoint(s) for op, s in zip(self._pick(m), m)])

    def _pick(self, x):
        if x.ndim != 3 or len(x) != len(self.ops):
            raise ValueError("per-slice masks need the full stack of planes")
        return self.ops


def make_operator(task: Task, shape):
    """Guidance operator for ``task`` acting on Axis3 planes of ``shape``."""
    d1, d2, d3 = shape
    if task.kind == "zsr":
        if task.M == 1:
            return IdentityOperator((d1, d2))
        return ZMergeOperator((d1, d2), task.M, MergeVariant.ROOTM, "rows")
    if task.kind == "csmri":
        if task.per_slice_masks:
            return StackedKSpaceOperator(
                [poisson_mask((d1, d2), task.R, task.center_frac, task.mask_seed + j) for j in range(d3)]
            )
        return KSpaceOperator(poisson_mask((d1, d2), task.R, task.center_frac, task.mask_seed))
    if d1 != d2:
        raise ValueError("sparse-view CT needs square Axis3 planes")
    return RadonOperator(RadonGeometry(task.n_angles, d1))


def simulate_measurement(vol: Volume3D, task: Task, noise_sigma: float = 0.0, noise_seed: int = 0, op=None):
    """Measure every Axis3 plane of ``vol``.

    Returns ``(Y, op)`` with ``Y`` shaped ``(h', w', d3)``.  For ``zsr`` the
    planes are degraded with the mean merge and ``Y`` is then rescaled by
    ``sqrt(M)`` so that it matches the root-M guidance operator exactly.
    """
    data = np.asarray(vol.data, dtype=np.float64)
    op = op or make_operator(task, data.shape)
    planes = all_slices(data, SliceAxis.AXIS3)
    if task.kind == "zsr":
        Y = zmerge_apply(planes, task.M, MergeVariant.MEAN, "rows") * math.sqrt(task.M)
    else:
        Y = op.apply(planes)
    if noise_sigma > 0:
        g = rng.generator(noise_seed, rng.TAG_NOISE)
        n = g.standard_normal(Y.shape)
        if np.iscomplexobj(Y):
            n = (n + 1j * g.standard_normal(Y.shape)) / math.sqrt(2.0)
            if isinstance(op, StackedKSpaceOperator):
                n = n * np.stack([o.mask.mask for o in op.ops])
            elif hasattr(op, "mask"):
                n = n * op.mask.mask
        Y = Y + noise_sigma * n
    elif noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    return np.ascontiguousarray(np.moveaxis(Y, 0, 2)), op

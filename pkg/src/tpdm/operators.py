"""Per-slice linear measurement operators and their adjoints.

Every operator maps a slice ``(h, w)`` -- or a stack ``(B, h, w)`` -- to a
measurement ``(h', w')`` (resp. ``(B, h', w')``).  Adjoints are taken with
respect to the real inner product ``Re <a, b>``, so the k-space adjoint
returns a real slice.
"""

from __future__ import annotations

import enum
import math

import numpy as np
import scipy.sparse as sp

from . import rng


class MergeVariant(enum.Enum):
    MEAN = "mean"
    ROOTM = "rootm"


def _check_shape(arr, shape, what):
    if arr.shape[-2:] != tuple(shape):
        raise ValueError(f"{what} shape {arr.shape[-2:]} does not match operator shape {tuple(shape)}")


class IdentityOperator:
    def __init__(self, shape):
        self.in_shape = self.out_shape = tuple(shape)
        self.complex = False

    def apply(self, x):
        _check_shape(x, self.in_shape, "input")
        return np.array(x, copy=True)

    def adjoint(self, m):
        _check_shape(m, self.out_shape, "measurement")
        return np.array(m, copy=True)


# --------------------------------------------------------------- slice merge


def _merge_scale(M: int, variant: MergeVariant) -> float:
    return 1.0 / M if variant is MergeVariant.MEAN else 1.0 / math.sqrt(M)


def zmerge_apply(s, M: int, variant: MergeVariant = MergeVariant.MEAN, merge_axis: str = "rows"):
    """Merge groups of ``M`` consecutive rows (or columns) into one line."""
    s = np.asarray(s)
    if M < 1:
        raise ValueError("merge size must be >= 1")
    ax = s.ndim - 2 if merge_axis == "rows" else s.ndim - 1
    n = s.shape[ax]
    if n % M:
        raise ValueError(f"extent {n} along {merge_axis} is not divisible by merge size {M}")
    shape = s.shape[:ax] + (n // M, M) + s.shape[ax + 1 :]
    return s.reshape(shape).sum(axis=ax + 1) * _merge_scale(M, variant)


def zmerge_adjoint(m, M: int, variant: MergeVariant = MergeVariant.MEAN, merge_axis: str = "rows"):
    """Broadcast each merged line back onto its ``M`` source lines."""
    m = np.asarray(m)
    if M < 1:
        raise ValueError("merge size must be >= 1")
    ax = m.ndim - 2 if merge_axis == "rows" else m.ndim - 1
    return np.repeat(m, M, axis=ax) * _merge_scale(M, variant)


class ZMergeOperator:
    def __init__(self, in_shape, M: int, variant: MergeVariant = MergeVariant.ROOTM, merge_axis: str = "rows"):
        if merge_axis not in ("rows", "cols"):
            raise ValueError("merge_axis must be 'rows' or 'cols'")
        h, w = in_shape
        if (h if merge_axis == "rows" else w) % M:
            raise ValueError(f"extent along {merge_axis} not divisible by merge size {M}")
        self.M, self.variant, self.merge_axis = M, MergeVariant(variant), merge_axis
        self.in_shape = (h, w)
        self.out_shape = (h // M, w) if merge_axis == "rows" else (h, w // M)
        self.complex = False

    def apply(self, x):
        _check_shape(x, self.in_shape, "input")
        return zmerge_apply(x, self.M, self.variant, self.merge_axis)

    def adjoint(self, m):
        _check_shape(m, self.out_shape, "measurement")
        return zmerge_adjoint(m, self.M, self.variant, self.merge_axis)


# --------------------------------------------------------------- k-space


def fft2c(x):
    """Centered orthonormal 2D DFT over the last two axes."""
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


def ifft2c(k):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


class KSpaceMask:
    def __init__(self, mask, R: float = 1.0, center: tuple[int, int] = (0, 0), seed: int = 0):
        self.mask = np.asarray(mask, dtype=bool)
        self.R = R
        self.center = tuple(center)
        self.seed = seed

    @property
    def shape(self):
        return self.mask.shape

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def kspace_apply(s, mask):
    m = mask.mask if isinstance(mask, KSpaceMask) else np.asarray(mask, dtype=bool)
    _check_shape(np.asarray(s), m.shape, "slice")
    return fft2c(s) * m


def kspace_adjoint(k, mask):
    m = mask.mask if isinstance(mask, KSpaceMask) else np.asarray(mask, dtype=bool)
    _check_shape(np.asarray(k), m.shape, "measurement")
    return ifft2c(np.asarray(k) * m).real


class KSpaceOperator:
    def __init__(self, mask):
        self.mask = mask if isinstance(mask, KSpaceMask) else KSpaceMask(mask)
        self.in_shape = self.out_shape = self.mask.shape
        self.complex = True

    def apply(self, x):
        return kspace_apply(x, self.mask)

    def adjoint(self, m):
        return kspace_adjoint(m, self.mask)


class MaskInfeasibleError(ValueError):
    pass


def _dart_throw(shape, r0: float, order, center_block) -> np.ndarray:
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    d_max = math.hypot(cy, cx) or 1.0
    mask = center_block.copy()
    for flat in order:
        y, x = divmod(int(flat), w)
        if mask[y, x]:
            continue
        r = r0 * (1.0 + math.hypot(y - cy, x - cx) / d_max)
        ri = int(math.ceil(r))
        y0, y1, x0, x1 = max(0, y - ri), min(h, y + ri + 1), max(0, x - ri), min(w, x + ri + 1)
        win = mask[y0:y1, x0:x1]
        if win.any():
            yy, xx = np.nonzero(win)
            if np.min((yy + y0 - y) ** 2 + (xx + x0 - x) ** 2) < r * r:
                continue
        mask[y, x] = True
    return mask


def poisson_mask(shape, R: float, center_frac: float = 1.0 / 16, seed: int = 0, max_iter: int = 60) -> KSpaceMask:
    """Variable-density Poisson-disc k-space mask with a fully sampled center.

    The minimum spacing grows linearly with distance from the k-space center,
    ``r(d) = r0 * (1 + d / d_max)``; ``r0`` is bisected until the kept
    fraction lands in ``[0.8 / R, 1.2 / R]``.
    """
    h, w = shape
    if R < 1:
        raise ValueError("acceleration R must be >= 1")
    if not 0 <= center_frac < 1:
        raise ValueError("center_frac must lie in [0, 1)")
    ch, cw = math.ceil(center_frac * h), math.ceil(center_frac * w)
    center = np.zeros((h, w), dtype=bool)
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    center[y0 : y0 + ch, x0 : x0 + cw] = True
    if R == 1:
        return KSpaceMask(np.ones((h, w), dtype=bool), R, (ch, cw), seed)
    lo_frac, hi_frac = 0.8 / R, 1.2 / R
    if center.mean() > hi_frac:
        raise MaskInfeasibleError(f"center block alone keeps {center.mean():.3f} > {hi_frac:.3f} for R={R}")
    order = rng.generator(seed, rng.TAG_MASK).permutation(h * w)
    target = 1.0 / R
    lo, hi = 0.0, float(max(h, w))
    for _ in range(max_iter):
        r0 = 0.5 * (lo + hi)
        mask = _dart_throw((h, w), r0, order, center)
        frac = mask.mean()
        if lo_frac <= frac <= hi_frac:
            return KSpaceMask(mask, R, (ch, cw), seed)
        if frac > target:
            lo = r0
        else:
            hi = r0
    raise MaskInfeasibleError(f"could not reach kept fraction 1/{R} on a {h}x{w} grid")


# --------------------------------------------------------------- radon


class RadonGeometry:
    """Parallel-beam geometry: ``n_angles`` uniform angles over [0, pi)."""

    def __init__(self, n_angles: int, size: int):
        if n_angles < 1 or size < 1:
            raise ValueError("n_angles and size must be positive")
        self.n_angles = n_angles
        self.size = size
        self.angles = np.arange(n_angles) * (np.pi / n_angles)


def _radon_matrix(geom: RadonGeometry) -> sp.csr_matrix:
    n = geom.size
    c = (n - 1) / 2.0
    support = (np.arange(n)[:, None] - c) ** 2 + (np.arange(n)[None, :] - c) ** 2 <= (n / 2.0) ** 2
    s = np.arange(n) - c
    u = np.arange(n) - c
    S, U = np.meshgrid(s, u, indexing="ij")  # (detector, sample)
    rows, cols, vals = [], [], []
    det_index = np.broadcast_to(np.arange(n)[:, None], S.shape)
    for a, th in enumerate(geom.angles):
        ct, st = math.cos(th), math.sin(th)
        px = S * ct - U * st + c
        py = S * st + U * ct + c
        # snap float noise so grid-aligned angles sample pixel centres exactly
        px = np.where(np.abs(px - np.round(px)) < 1e-9, np.round(px), px)
        py = np.where(np.abs(py - np.round(py)) < 1e-9, np.round(py), py)
        x0, y0 = np.floor(px).astype(int), np.floor(py).astype(int)
        fx, fy = px - x0, py - y0
        ray = a * n + det_index
        for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < n) & (xx >= 0) & (xx < n) & (wgt > 0)
            ok[ok] &= support[yy[ok], xx[ok]]
            rows.append(ray[ok])
            cols.append(yy[ok] * n + xx[ok])
            vals.append(wgt[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_angles * n, n * n),
    )
    return mat.tocsr()


class RadonOperator:
    def __init__(self, geom: RadonGeometry):
        self.geom = geom
        self.in_shape = (geom.size, geom.size)
        self.out_shape = (geom.n_angles, geom.size)
        self.complex = False
        self.matrix = _radon_matrix(geom)
        self.matrix_t = self.matrix.T.tocsr()

    def _batched(self, mat, x, out_shape):
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-2]
        flat = x.reshape(-1, x.shape[-2] * x.shape[-1]).T
        return np.ascontiguousarray((mat @ flat).T).reshape(lead + out_shape)

    def apply(self, x):
        _check_shape(np.asarray(x), self.in_shape, "slice")
        return self._batched(self.matrix, x, self.out_shape)

    def adjoint(self, m):
        _check_shape(np.asarray(m), self.out_shape, "sinogram")
        return self._batched(self.matrix_t, m, self.in_shape)


def radon_apply(s, geom: RadonGeometry):
    s = np.asarray(s)
    if s.shape[-1] != s.shape[-2]:
        raise ValueError(f"radon projection needs a square slice, got {s.shape[-2:]}")
    return RadonOperator(geom).apply(s)


def radon_adjoint(sino, geom: RadonGeometry):
    return RadonOperator(geom).adjoint(sino)


# --------------------------------------------------------------- shared


def residual_grad(op, x_hat, y):
    """``grad_x ||A x - y||^2`` at ``x_hat``, i.e. ``2 A^*(A x_hat - y)``."""
    return 2.0 * op.adjoint(op.apply(x_hat) - y)


def operator_norm_sq(op, iters: int = 50, seed: int = 0) -> float:
    """Largest eigenvalue of ``A^* A`` by power iteration."""
    x = rng.generator(seed, rng.TAG_NOISE).standard_normal(op.in_shape)
    lam = 0.0
    for _ in range(iters):
        x = op.adjoint(op.apply(x))
        lam = float(np.linalg.norm(x))
        if lam == 0:
            return 0.0
        x = x / lam
    return lam


def least_squares_adjoint(op, y):
    """Adjoint reconstruction ``c A^* y`` with ``c`` fitted in measurement space.

    Fourier (complex) measurements use ``c = 1``, i.e. plain zero filling.
    """
    back = op.adjoint(y)
    if getattr(op, "complex", False):
        return back
    fwd = op.apply(back)
    axes = tuple(range(-2, 0))
    num = np.sum(np.real(np.conj(fwd) * y), axis=axes)
    den = np.sum(np.abs(fwd) ** 2, axis=axes)
    c = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return back * np.reshape(c, np.shape(c) + (1, 1))

"""3D PSNR and per-direction mean 2D SSIM."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .volume import Volume3D

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(v):
    return np.asarray(v.data if isinstance(v, Volume3D) else v, dtype=np.float64)


@dataclass
class MetricReport:
    psnr_3d: float
    ssim_axis1: float
    ssim_axis2: float
    ssim_axis3: float

    def to_json(self) -> dict:
        d = asdict(self)
        if math.isinf(d["psnr_3d"]):
            d["psnr_3d"] = "inf"
        return d

    @property
    def worst_ssim(self) -> float:
        return min(self.ssim_axis1, self.ssim_axis2, self.ssim_axis3)


def psnr3d(x, ref, data_range: float = 1.0) -> float:
    """PSNR over all voxels; identical inputs give ``inf``."""
    x, ref = _arr(x), _arr(ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    x = np.clip(x, 0.0, data_range)
    ref = np.clip(ref, 0.0, data_range)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range) - 10.0 * math.log10(mse)


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable Gaussian filter; keep only positions where the window fits
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim2d(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < WIN_SIZE:
        raise ValueError(f"slice {a.shape} smaller than the {WIN_SIZE}x{WIN_SIZE} window")
    a = np.clip(a, 0.0, data_range)
    b = np.clip(b, 0.0, data_range)
    g = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    va = _filter_valid(a * a, g) - mu_a**2
    vb = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def _planes(x: np.ndarray, axis: int):
    return [np.take(x, j, axis=axis) for j in range(x.shape[axis])]


def ssim_direction_mean(x, ref, axis: int, data_range: float = 1.0) -> float:
    """Mean 2D SSIM over all planes perpendicular to volume ``axis`` (1, 2 or 3)."""
    x, ref = _arr(x), _arr(ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if axis not in (1, 2, 3):
        raise ValueError("axis must be 1, 2 or 3")
    vals = [ssim2d(a, b, data_range) for a, b in zip(_planes(x, axis - 1), _planes(ref, axis - 1))]
    return float(np.mean(vals))


def evaluate(x, ref, data_range: float = 1.0) -> MetricReport:
    return MetricReport(
        psnr3d(x, ref, data_range),
        ssim_direction_mean(x, ref, 1, data_range),
        ssim_direction_mean(x, ref, 2, data_range),
        ssim_direction_mean(x, ref, 3, data_range),
    )


def write_reports(rows: list[tuple[str, MetricReport]], json_path, csv_path) -> None:
    with open(json_path, "w") as f:
        json.dump({rid: rep.to_json() for rid, rep in rows}, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "psnr_3d", "ssim_axis1", "ssim_axis2", "ssim_axis3"])
        for rid, rep in rows:
            w.writerow([rid, repr(rep.psnr_3d), repr(rep.ssim_axis1), repr(rep.ssim_axis2), repr(rep.ssim_axis3)])

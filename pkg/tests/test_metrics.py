import csv
import json
import math

import numpy as np
import pytest
from oracles import brute_psnr, brute_ssim

from tpdm.metrics import (
    MetricReport,
    evaluate,
    gaussian_window,
    psnr3d,
    ssim2d,
    ssim_direction_mean,
    write_reports,
)


def test_psnr_examples():
    ref = np.full((4, 4, 4), 0.1)
    assert psnr3d(np.zeros_like(ref), ref) == pytest.approx(20.0, abs=1e-12)
    assert psnr3d(ref, ref) == math.inf
    rng = np.random.default_rng(0)
    x, y = rng.random((2, 5, 6, 7))
    assert psnr3d(x, y) == psnr3d(y, x)
    with pytest.raises(ValueError):
        psnr3d(x, y[:, :, :6])


def test_psnr_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(5):
        ref = rng.random((6, 5, 4))
        x = ref + 0.1 * rng.standard_normal(ref.shape)
        assert abs(psnr3d(x, ref) - brute_psnr(x, ref)) < 1e-10


def test_ssim_examples():
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 16, 16))
    assert ssim2d(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim2d(a, b) == ssim2d(b, a)
    c1 = 1e-4
    assert ssim2d(np.zeros((12, 12)), np.ones((12, 12))) == pytest.approx(c1 / (1 + c1), rel=1e-9)
    with pytest.raises(ValueError):
        ssim2d(np.zeros((10, 16)), np.zeros((10, 16)))


def test_ssim_matches_brute_force_and_bounds():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = rng.random((15, 13))
        b = np.clip(a + 0.3 * rng.standard_normal(a.shape), -0.2, 1.2)
        got = ssim2d(a, b)
        assert abs(got - brute_ssim(a, b)) < 1e-10
        assert -1 <= got < 1


def test_ssim_matches_scikit_image():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(4)
    a = rng.random((24, 20))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim2d(a, b) == pytest.approx(ref, abs=1e-10)


def test_gaussian_window_normalized():
    g = gaussian_window()
    assert g.shape == (11,) and g.sum() == pytest.approx(1.0) and g.argmax() == 5


def test_direction_mean_definition_and_anisotropy():
    rng = np.random.default_rng(5)
    ref = rng.random((12, 12, 2))
    x = np.clip(ref + 0.1 * rng.standard_normal(ref.shape), 0, 1)
    expected = 0.5 * (ssim2d(x[:, :, 0], ref[:, :, 0]) + ssim2d(x[:, :, 1], ref[:, :, 1]))
    assert ssim_direction_mean(x, ref, 3) == pytest.approx(expected, abs=1e-15)

    vol = rng.random((12, 12, 12))
    noisy = vol.copy()
    noisy[4] = np.clip(noisy[4] + 0.5 * rng.standard_normal((12, 12)), 0, 1)  # one Axis1 plane
    for axis in (1, 2, 3):
        planes = [(np.take(noisy, j, axis - 1), np.take(vol, j, axis - 1)) for j in range(12)]
        oracle = np.mean([brute_ssim(p, q) for p, q in planes])
        assert ssim_direction_mean(noisy, vol, axis) == pytest.approx(oracle, abs=1e-10)
    assert ssim_direction_mean(noisy, vol, 1) > ssim_direction_mean(noisy, vol, 2)


def test_evaluate_identical_and_reports(tmp_path):
    v = np.random.default_rng(6).random((12, 12, 12))
    rep = evaluate(v, v)
    assert rep.psnr_3d == math.inf
    assert rep.worst_ssim == pytest.approx(1.0, abs=1e-12)
    other = MetricReport(30.0, 0.9, 0.8, 0.7)
    write_reports([("a", rep), ("b", other)], tmp_path / "m.json", tmp_path / "m.csv")
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["a"]["psnr_3d"] == "inf" and data["b"]["ssim_axis3"] == 0.7
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert len(rows) == 3 and rows[2][0] == "b"

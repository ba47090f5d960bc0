import numpy as np
import pytest

from tpdm.operators import (
    IdentityOperator,
    KSpaceOperator,
    MaskInfeasibleError,
    MergeVariant,
    RadonGeometry,
    RadonOperator,
    ZMergeOperator,
    fft2c,
    ifft2c,
    kspace_apply,
    least_squares_adjoint,
    poisson_mask,
    radon_adjoint,
    radon_apply,
    residual_grad,
    zmerge_adjoint,
    zmerge_apply,
)


def _inner(a, b):
    return float(np.sum(np.real(np.conj(a) * b)))


def _random_measurement(op, rng):
    m = rng.standard_normal(op.out_shape)
    if op.complex:
        m = m + 1j * rng.standard_normal(op.out_shape)
    return m


def operators(size=16):
    return {
        "zmerge_mean": ZMergeOperator((size, size), 4, MergeVariant.MEAN, "rows"),
        "zmerge_rootm_cols": ZMergeOperator((size, size), 2, MergeVariant.ROOTM, "cols"),
        "kspace": KSpaceOperator(poisson_mask((size, size), 4, seed=1)),
        "radon": RadonOperator(RadonGeometry(7, size)),
    }


@pytest.mark.parametrize("name", list(operators()))
def test_dot_product_and_linearity(name):
    op = operators()[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        x = rng.standard_normal(op.in_shape)
        m = _random_measurement(op, rng)
        lhs, rhs = _inner(op.apply(x), m), _inner(x, op.adjoint(m))
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs))
        y = rng.standard_normal(op.in_shape)
        a, b = rng.standard_normal(2)
        combo = op.apply(a * x + b * y)
        ref = a * op.apply(x) + b * op.apply(y)
        assert np.max(np.abs(combo - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_zmerge_examples():
    col = np.array([[0.2], [0.4]])
    np.testing.assert_allclose(zmerge_apply(col, 2, MergeVariant.MEAN), [[0.3]])
    np.testing.assert_allclose(zmerge_apply(np.ones((4, 1)), 4, MergeVariant.ROOTM), [[2.0]])
    np.testing.assert_allclose(zmerge_adjoint(np.array([[0.3]]), 2, MergeVariant.MEAN), [[0.15], [0.15]])
    x = np.random.default_rng(0).random((6, 5))
    for v in MergeVariant:
        np.testing.assert_array_equal(zmerge_apply(x, 1, v), x)
        np.testing.assert_array_equal(zmerge_adjoint(x, 1, v), x)


def test_zmerge_non_divisible():
    with pytest.raises(ValueError):
        zmerge_apply(np.zeros((5, 4)), 2)
    with pytest.raises(ValueError):
        ZMergeOperator((5, 4), 2)


def test_zmerge_rootm_is_sqrt_m_times_mean():
    x = np.random.default_rng(1).random((3, 12, 7))
    for M in (2, 3, 4, 6):
        np.testing.assert_allclose(
            zmerge_apply(x, M, MergeVariant.ROOTM), np.sqrt(M) * zmerge_apply(x, M, MergeVariant.MEAN), rtol=1e-14
        )


def test_fft_roundtrip_and_constant():
    rng = np.random.default_rng(2)
    x = rng.random((12, 10))
    full = np.ones((12, 10), dtype=bool)
    np.testing.assert_allclose(ifft2c(kspace_apply(x, full)).real, x, atol=1e-12)
    k = kspace_apply(np.full((12, 10), 0.7), full)
    assert k[6, 5] == pytest.approx(0.7 * np.sqrt(120))
    k[6, 5] = 0
    assert np.max(np.abs(k)) < 1e-12
    # orthonormality: energy is preserved
    assert np.sum(np.abs(fft2c(x)) ** 2) == pytest.approx(np.sum(x**2))


def test_poisson_mask_examples():
    assert poisson_mask((16, 16), 1).mask.all()
    m = poisson_mask((64, 64), 8, 1 / 16, seed=3)
    assert 0.1 <= m.fraction <= 0.15
    assert m.mask[30:34, 30:34].all()
    assert np.array_equal(m.mask, poisson_mask((64, 64), 8, 1 / 16, seed=3).mask)
    assert not np.array_equal(m.mask, poisson_mask((64, 64), 8, 1 / 16, seed=4).mask)


@pytest.mark.parametrize("R", [4, 8, 24, 48])
def test_poisson_mask_fraction_band(R):
    m = poisson_mask((32, 32), R, seed=R)
    assert 0.8 / R <= m.fraction <= 1.2 / R


def test_poisson_mask_infeasible():
    with pytest.raises(MaskInfeasibleError):
        poisson_mask((8, 8), 48, center_frac=0.25)
    with pytest.raises(ValueError):
        poisson_mask((8, 8), 0.5)


def _disc(n, r):
    c = (n - 1) / 2
    yy, xx = np.mgrid[:n, :n]
    return (((yy - c) ** 2 + (xx - c) ** 2) <= r * r).astype(float)


def test_radon_symmetric_disc():
    geom = RadonGeometry(4, 24)
    s = radon_apply(_disc(24, 7), geom)
    np.testing.assert_allclose(s[0], s[2], atol=1e-6)


def test_radon_mass_conservation():
    n = 32
    c = (n - 1) / 2
    yy, xx = np.mgrid[:n, :n]
    img = np.exp(-((yy - c - 2) ** 2 + (xx - c + 3) ** 2) / 20.0)
    img *= _disc(n, n / 2)
    sino = radon_apply(img, RadonGeometry(12, n))
    brute = img.sum()  # pixel-mass oracle
    np.testing.assert_allclose(sino.sum(axis=1), brute, rtol=1e-2)


def test_radon_zero_and_shapes():
    geom = RadonGeometry(5, 16)
    assert not radon_apply(np.zeros((16, 16)), geom).any()
    assert not radon_adjoint(np.zeros((5, 16)), geom).any()
    assert radon_apply(np.zeros((16, 16)), geom).shape == (5, 16)
    with pytest.raises(ValueError):
        radon_apply(np.zeros((16, 12)), geom)


def test_radon_single_ray_support():
    n = 16
    op = RadonOperator(RadonGeometry(6, n))
    impulse = np.zeros((6, n))
    impulse[2, 9] = 1.0
    back = op.adjoint(impulse)
    touched = op.matrix[2 * n + 9].toarray().reshape(n, n)
    np.testing.assert_array_equal(back != 0, touched != 0)
    assert (back != 0).sum() > 0


@pytest.mark.parametrize("angle_index", [0, 1, 2, 3])
def test_radon_impulse_trace(angle_index):
    n = 32
    geom = RadonGeometry(8, n)
    c = (n - 1) / 2
    for row, col in [(10, 20), (22, 9), (16, 16)]:
        img = np.zeros((n, n))
        img[row, col] = 1.0
        sino = radon_apply(img, geom)
        th = geom.angles[angle_index]
        s = (col - c) * np.cos(th) + (row - c) * np.sin(th)
        peak = np.argmax(sino[angle_index]) - c
        assert abs(peak - s) <= 1.0


def test_residual_grad_examples():
    op = IdentityOperator((2, 2))
    x = np.full((2, 2), 2.0)
    np.testing.assert_array_equal(residual_grad(op, x, np.zeros((2, 2))), 4.0)
    np.testing.assert_array_equal(residual_grad(op, x, x), 0.0)


@pytest.mark.parametrize("name", list(operators(8)))
def test_residual_grad_finite_differences(name):
    op = operators(8)[name]
    rng = np.random.default_rng(5)
    x = rng.random(op.in_shape)
    y = _random_measurement(op, rng)

    def f(z):
        return float(np.sum(np.abs(op.apply(z) - y) ** 2))

    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1e-4
        fd[idx] = (f(x + e) - f(x - e)) / 2e-4
    g = residual_grad(op, x, y)
    assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_batched_application_matches_per_slice():
    rng = np.random.default_rng(6)
    for op in operators(8).values():
        xs = rng.random((3,) + op.in_shape)
        batch = op.apply(xs)
        for b in range(3):
            np.testing.assert_allclose(batch[b], op.apply(xs[b]), rtol=1e-13, atol=1e-13)


def test_least_squares_adjoint_is_zero_filling_for_kspace():
    rng = np.random.default_rng(7)
    op = KSpaceOperator(poisson_mask((16, 16), 4, seed=2))
    y = op.apply(rng.random((16, 16)))
    np.testing.assert_allclose(least_squares_adjoint(op, y), op.adjoint(y), atol=1e-12)

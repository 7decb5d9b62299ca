import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from didc.data import CrossSection
from didc.kernels import FAMILIES, KernelSpec, kernel_weight
from didc.lpreg import (
    EstimationError,
    estimate_residual_variance,
    fit_one_sided,
    poly_basis,
    psi_matrix,
    sample_psi,
    ResidualVariance,
)


def _sample(n=400, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, n)
    return z, rng


def test_exact_line():
    z = np.linspace(0.01, 1.0, 50)
    cs = CrossSection(z, 2 + 3 * z)
    for h in (0.2, 0.5, 3.0):
        fit = fit_one_sided(cs, "above", 1, h)
        np.testing.assert_allclose(fit.delta_hat, [2, 3], atol=1e-12)


def test_constant_both_sides():
    z = np.linspace(-1, 1, 41)
    cs = CrossSection(z, np.full(41, 5.0))
    for side in ("above", "below"):
        assert fit_one_sided(cs, side, 1, 0.5).derivative(0) == pytest.approx(5.0, abs=1e-12)


def test_three_point_normal_equations():
    # hand-solved 2x2 weighted normal equations with triangular weights 1 - z
    pts = [(Fraction(1, 10), 1), (Fraction(2, 10), 2), (Fraction(4, 10), 1)]
    w = [1 - z for z, _ in pts]
    s0 = sum(w)
    s1 = sum(wi * z for wi, (z, _) in zip(w, pts))
    s2 = sum(wi * z * z for wi, (z, _) in zip(w, pts))
    t0 = sum(wi * y for wi, (_, y) in zip(w, pts))
    t1 = sum(wi * z * y for wi, (z, y) in zip(w, pts))
    det = s0 * s2 - s1 * s1
    intercept = (t0 * s2 - s1 * t1) / det
    slope = (s0 * t1 - s1 * t0) / det
    assert (intercept, slope) == (Fraction(354, 250), Fraction(-8, 25))

    cs = CrossSection(np.array([0.1, 0.2, 0.4]), np.array([1.0, 2.0, 1.0]))
    fit = fit_one_sided(cs, "above", 1, 1.0)
    np.testing.assert_allclose(fit.delta_hat, [float(intercept), float(slope)], rtol=1e-12)


def test_too_few_points():
    cs = CrossSection(np.array([0.1, 0.2, 0.9, -0.5]), np.ones(4))
    with pytest.raises(EstimationError, match="insufficient"):
        fit_one_sided(cs, "above", 2, 0.3)


def test_ill_conditioned_design():
    cs = CrossSection(np.array([0.1, 0.1, 0.1, -0.5]), np.array([1.0, 2.0, 3.0, 0.0]))
    with pytest.raises(EstimationError, match="singular"):
        fit_one_sided(cs, "above", 1, 1.0)


def test_bad_bandwidth():
    cs = CrossSection(np.array([0.1, 0.2]), np.ones(2))
    with pytest.raises(ValueError):
        fit_one_sided(cs, "above", 0, 0.0)


def test_residuals_and_weights_layout():
    z, rng = _sample()
    cs = CrossSection(z, rng.normal(size=z.size))
    fit = fit_one_sided(cs, "below", 1, 0.4)
    assert np.all(np.isnan(fit.residuals[cs.above]))
    assert np.all(np.isfinite(fit.residuals[cs.below]))
    assert np.all(fit.weights[cs.above] == 0)
    assert fit.n_eff == int(np.sum((z < 0) & (z > -0.4)))


def test_gamma_matches_direct_sum():
    z, rng = _sample()
    cs = CrossSection(z, rng.normal(size=z.size))
    h = 0.5
    fit = fit_one_sided(cs, "above", 2, h)
    direct = np.zeros((3, 3))
    for zi in z[z >= 0]:
        r = poly_basis(np.array([zi / h]), 2)[0]
        direct += kernel_weight(zi / h) / h * np.outer(r, r)
    np.testing.assert_allclose(fit.Gamma_h, direct / z.size, rtol=1e-12)


def test_linear_weights_reproduce_estimates():
    z, rng = _sample()
    y = np.sin(3 * z) + rng.normal(scale=0.1, size=z.size)
    cs = CrossSection(z, y)
    for nu in (0, 1, 2):
        fit = fit_one_sided(cs, "above", 2, 0.6)
        assert fit.linear_weights(nu) @ y == pytest.approx(fit.derivative(nu), rel=1e-10, abs=1e-10)


def test_large_sample_gamma_tends_to_kernel_constant():
    # Gamma_h -> f(0) * Gamma for uniform z on [-1, 1] (f = 1/2)
    from didc.kernels import kernel_moments

    rng = np.random.default_rng(3)
    z = rng.uniform(-1, 1, 400_000)
    fit = fit_one_sided(CrossSection(z, np.zeros_like(z)), "above", 1, 0.3)
    np.testing.assert_allclose(fit.Gamma_h, 0.5 * kernel_moments(KernelSpec(), 1).gamma, rtol=0.02)


finite = st.floats(-10, 10, allow_nan=False)


@st.composite
def side_data(draw):
    n = draw(st.integers(8, 60))
    z = draw(arrays(float, n, elements=st.floats(0.0, 1.0), unique=True))
    return z, draw(arrays(float, n, elements=finite)), draw(arrays(float, n, elements=finite))


@settings(max_examples=60, deadline=None)
@given(side_data(), finite, finite, st.sampled_from(FAMILIES))
def test_linearity(data, a, b, family):
    z, y1, y2 = data
    k = KernelSpec(family)
    try:
        f1 = fit_one_sided(CrossSection(z, y1), "above", 1, 2.0, k)
    except EstimationError:
        return
    f2 = fit_one_sided(CrossSection(z, y2), "above", 1, 2.0, k)
    f = fit_one_sided(CrossSection(z, a * y1 + b * y2), "above", 1, 2.0, k)
    scale = 1 + abs(a) * np.abs(f1.delta_hat).max() + abs(b) * np.abs(f2.delta_hat).max()
    np.testing.assert_allclose(f.delta_hat, a * f1.delta_hat + b * f2.delta_hat, atol=1e-8 * scale)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 3), arrays(float, 4, elements=st.floats(-5, 5)), st.floats(0.3, 5.0))
def test_exact_polynomial_fit(p, coef, h):
    z = np.linspace(0.0, 1.0, 40)
    c = coef[: p + 1]
    y = poly_basis(z, p) @ c
    fit = fit_one_sided(CrossSection(-z, poly_basis(-z, p) @ c), "below", p, h)
    np.testing.assert_allclose(fit.delta_hat, c, atol=1e-7 * (1 + np.abs(c).max()))
    fit = fit_one_sided(CrossSection(z, y), "above", p, h)
    np.testing.assert_allclose(fit.delta_hat, c, atol=1e-7 * (1 + np.abs(c).max()))


@settings(max_examples=40, deadline=None)
@given(arrays(float, 80, elements=finite), st.floats(0.2, 0.8))
def test_locality(noise, h):
    z = np.linspace(-1, 1, 80)
    y = noise.copy()
    base = fit_one_sided(CrossSection(z, y), "above", 1, h)
    outside = (z < 0) | (z >= h)
    y[outside] += 1000.0
    moved = fit_one_sided(CrossSection(z, y), "above", 1, h)
    np.testing.assert_allclose(moved.delta_hat, base.delta_hat, rtol=1e-9, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2))
def test_scale_homogeneity(c, nu):
    # rescaling z by c and h by c divides the nu-th derivative by c^nu
    z, rng = _sample(200, 1)
    y = np.cos(2 * z) + rng.normal(scale=0.2, size=z.size)
    a = fit_one_sided(CrossSection(z, y), "above", 2, 0.7)
    b = fit_one_sided(CrossSection(c * z, y), "above", 2, 0.7 * c)
    assert b.derivative(nu) == pytest.approx(a.derivative(nu) / c**nu, rel=1e-8, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e3, 1e3))
def test_translation_shifts_intercept_only(shift):
    z, rng = _sample(200, 2)
    y = z**2 + rng.normal(size=z.size)
    a = fit_one_sided(CrossSection(z, y), "below", 1, 0.5)
    b = fit_one_sided(CrossSection(z, y + shift), "below", 1, 0.5)
    assert b.delta_hat[0] == pytest.approx(a.delta_hat[0] + shift, abs=1e-9 * (1 + abs(shift)))
    assert b.delta_hat[1] == pytest.approx(a.delta_hat[1], abs=1e-8 * (1 + abs(shift)))


def test_psi_zero_variance():
    z, rng = _sample()
    cs = CrossSection(z, rng.normal(size=z.size))
    fit = fit_one_sided(cs, "above", 1, 0.5)
    out = sample_psi(fit, fit, ResidualVariance(np.zeros(z.size)))
    assert np.all(out == 0)


def test_psi_unit_variance_direct_sum():
    z, rng = _sample()
    cs = CrossSection(z, rng.normal(size=z.size))
    h = 0.5
    fit = fit_one_sided(cs, "above", 1, h)
    got = sample_psi(fit, fit, ResidualVariance(np.ones(z.size)))
    direct = np.zeros((2, 2))
    for zi in z[z >= 0]:
        r = np.array([1.0, zi / h])
        direct += (kernel_weight(zi / h) / h) ** 2 * np.outer(r, r)
    np.testing.assert_allclose(got, direct / z.size, rtol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_psi_single_point_rank_one(family):
    k = KernelSpec(family)
    h, s2, n = 0.7, 2.5, 1
    w = np.array([kernel_weight(0.0, k) / h])
    got = psi_matrix(poly_basis(np.zeros(1), 2), w, poly_basis(np.zeros(1), 2), w, np.array([s2]), n)
    expected = np.zeros((3, 3))
    expected[0, 0] = kernel_weight(0.0, k) ** 2 * s2 / (n * h * h)
    np.testing.assert_allclose(got, expected, rtol=1e-14)


def test_psi_side_mismatch():
    z, rng = _sample()
    cs = CrossSection(z, rng.normal(size=z.size))
    a = fit_one_sided(cs, "above", 1, 0.5)
    b = fit_one_sided(cs, "below", 1, 0.5)
    with pytest.raises(ValueError, match="side"):
        sample_psi(a, b, ResidualVariance(np.ones(z.size)))


def test_residual_variance_linear_data():
    z = np.linspace(-1, 1, 101)
    cs = CrossSection(z, 1 + 2 * z + 0.5 * (z >= 0))
    s = estimate_residual_variance(cs, "residual", p=1)
    assert np.max(s.sigma2) <= 1e-20


def test_nn_variance_monte_carlo():
    sigma = 0.1295
    rng = np.random.default_rng(11)
    z = rng.uniform(-1, 1, 100_000)
    cs = CrossSection(z, rng.normal(scale=sigma, size=z.size))
    s = estimate_residual_variance(cs, "nn")
    assert np.mean(s.sigma2) == pytest.approx(sigma**2, rel=0.05)


def test_nn_variance_equal_neighbours():
    z = np.array([0.1, 0.2, 0.3, -0.1, -0.2, -0.3])
    y = np.array([4.0, 4.0, 4.0, 1.0, 2.0, 3.0])
    s = estimate_residual_variance(CrossSection(z, y), "nn", J=2)
    assert s.sigma2[0] == 0.0
    # middle point below: neighbours 1 and 3, mean 2, so sigma2 = 2/3 * 0
    assert s.sigma2[4] == 0.0
    assert s.sigma2[3] == pytest.approx(2 / 3 * (1 - 2.5) ** 2)


def test_unknown_variance_method():
    z = np.array([0.1, 0.2, -0.1, -0.2])
    with pytest.raises(ValueError):
        estimate_residual_variance(CrossSection(z, z), "bogus")


def test_factorial_scaling_of_derivative():
    z = np.linspace(0.0, 1.0, 30)
    fit = fit_one_sided(CrossSection(z, z**3), "above", 3, 2.0)
    assert fit.derivative(3) == pytest.approx(math.factorial(3), rel=1e-9)

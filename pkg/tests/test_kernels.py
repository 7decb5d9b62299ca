import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from didc.kernels import FAMILIES, KernelSpec, kernel_moments, kernel_weight

U = sp.Symbol("u")
SYMBOLIC = {"triangular": 1 - U, "uniform": sp.Rational(1, 2), "epanechnikov": sp.Rational(3, 4) * (1 - U**2)}


def _sym_moment(family, power, squared=False):
    k = SYMBOLIC[family]
    return float(sp.integrate((k**2 if squared else k) * U**power, (U, 0, 1)))


def test_triangular_peak_and_support():
    assert kernel_weight(0.0) == 1.0
    assert kernel_weight(1.5) == 0.0
    assert kernel_weight(-1.0) == 0.0


def test_uniform_height():
    assert kernel_weight(0.3, KernelSpec("uniform")) == 0.5


def test_vectorised_and_scalar():
    w = kernel_weight(np.array([-0.5, 0.0, 0.5]))
    np.testing.assert_allclose(w, [0.5, 1.0, 0.5])
    assert isinstance(kernel_weight(0.25), float)


def test_unknown_family():
    with pytest.raises(ValueError):
        KernelSpec("gaussian")
    with pytest.raises(ValueError):
        KernelSpec(support=0.0)


@pytest.mark.parametrize("family", FAMILIES)
def test_integrates_to_one_and_symmetric(family):
    k = KernelSpec(family, support=1.7)
    total, _ = integrate.quad(lambda u: kernel_weight(u, k), -1.7, 1.7)
    assert total == pytest.approx(1.0, abs=1e-10)
    u = np.linspace(-2, 2, 41)
    np.testing.assert_array_equal(kernel_weight(u, k), kernel_weight(-u, k))
    assert np.all(kernel_weight(u, k) >= 0)


def test_gamma_triangular_closed_form():
    km = kernel_moments(KernelSpec(), 1)
    np.testing.assert_allclose(km.gamma, [[1 / 2, 1 / 6], [1 / 6, 1 / 12]], atol=1e-10)


def test_uniform_order_zero():
    km = kernel_moments(KernelSpec("uniform"), 0, (1,))
    np.testing.assert_allclose(km.gamma, [[0.5]], atol=1e-12)
    np.testing.assert_allclose(km.vartheta[1], [0.25], atol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("p", [0, 1, 2, 3])
def test_moments_match_symbolic_integration(family, p):
    km = kernel_moments(KernelSpec(family), p, (p + 1, p + 2))
    for j in range(p + 1):
        for m in range(p + 1):
            assert km.gamma[j, m] == pytest.approx(_sym_moment(family, j + m), abs=1e-10)
            assert km.psi[j, m] == pytest.approx(_sym_moment(family, j + m, squared=True), abs=1e-10)
        for q in (p + 1, p + 2):
            assert km.vartheta[q][j] == pytest.approx(_sym_moment(family, j + q), abs=1e-10)


@pytest.mark.parametrize("family", FAMILIES)
def test_gamma_columns_are_vartheta(family):
    p = 3
    km = kernel_moments(KernelSpec(family), p, range(p + 1))
    for q in range(p + 1):
        np.testing.assert_allclose(km.gamma[:, q], km.vartheta[q], atol=1e-14)


def test_moments_cached_and_read_only():
    a = kernel_moments(KernelSpec(), 2, (3,))
    b = kernel_moments(KernelSpec(), 2, [3, 3])
    assert a is b
    with pytest.raises(ValueError):
        a.gamma[0, 0] = 1.0


def test_gamma_inverse():
    km = kernel_moments(KernelSpec("epanechnikov"), 2)
    np.testing.assert_allclose(km.gamma_inv @ km.gamma, np.eye(3), atol=1e-10)


@given(st.floats(0.1, 10.0), st.floats(-3.0, 3.0))
def test_support_scaling(kappa, u):
    # K_kappa(u) = K(u / kappa) / kappa
    for family in FAMILIES:
        got = kernel_weight(u, KernelSpec(family, kappa))
        assert got == pytest.approx(kernel_weight(u / kappa, KernelSpec(family)) / kappa, rel=1e-12, abs=1e-15)

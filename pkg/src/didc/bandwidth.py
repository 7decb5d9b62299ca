"""Plug-in MSE-optimal bandwidths for the point estimate and its bias correction."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from didc.data import CrossSection
from didc.kernels import KernelSpec, kernel_moments
from didc.lpreg import EstimationError, estimate_residual_variance, fit_one_sided, poly_basis

BIAS_TOL = 1e-10
# multiple of the pilot variance of B added to B^2
REGULARIZATION = 3.0
PILOTS = ("staged", "local", "global")


@dataclass(frozen=True)
class BandwidthPlan:
    """Selected bandwidths with the plug-in quantities that produced them."""

    h: float
    b: float
    pilot_h: float
    diagnostics: dict = field(default_factory=dict)


def h_formula(V: float, B: float, n: int, p: int, nu: int = 0) -> float:
    """``((1+2nu) V / (2 n (1+p-nu) B^2))^(1/(2p+3))``."""
    return ((1 + 2 * nu) * V / (2.0 * n * (1 + p - nu) * B * B)) ** (1.0 / (2 * p + 3))


def b_formula(V: float, B: float, n: int, p: int, q: int) -> float:
    """``((3+2p) V / (2 n (q-p) B^2))^(1/(2q+3))``."""
    if q <= p:
        raise ValueError("q must exceed p")
    return ((3 + 2 * p) * V / (2.0 * n * (q - p) * B * B)) ** (1.0 / (2 * q + 3))


def density_at_cutoff(z: np.ndarray) -> tuple[float, float]:
    """Gaussian kernel density at 0 with Silverman's rule-of-thumb bandwidth."""
    n = z.size
    sd = float(np.std(z, ddof=1))
    q75, q25 = np.percentile(z, [75, 25])
    spread = min(sd, (q75 - q25) / 1.349) if q75 > q25 else sd
    bw = 0.9 * spread * n ** (-0.2)
    if not bw > 0:
        raise EstimationError("running variable has no spread")
    f = float(np.mean(np.exp(-0.5 * (z / bw) ** 2)) / (bw * math.sqrt(2 * math.pi)))
    return f, bw


def global_derivative(
    z: np.ndarray, y: np.ndarray, degree: int, order: int, sigma2: np.ndarray | None = None
) -> tuple[float, float]:
    """Derivative at 0 of a global polynomial fit, with its plug-in variance.

    Returns ``(estimate, variance)``; the variance is 0 when ``sigma2`` is None.
    """
    if z.size < degree + 1:
        raise EstimationError(f"need {degree + 1} observations for a degree-{degree} pilot fit, got {z.size}")
    s = float(np.max(np.abs(z)))
    w = np.linalg.pinv(poly_basis(z / s, degree))[order] * math.factorial(order) / s**order
    var = 0.0 if sigma2 is None else float(np.sum(w * w * sigma2))
    return float(w @ y), var


def _side_variance(z: np.ndarray, sigma2: np.ndarray, window: float, minimum: int = 10) -> float:
    a = np.abs(z)
    inside = a <= window
    if inside.sum() < minimum:
        inside = np.argsort(a, kind="stable")[: min(minimum, a.size)]
    return float(np.mean(sigma2[inside]))


def _quad_form(gamma: np.ndarray, psi: np.ndarray, j: int) -> float:
    g = np.linalg.solve(gamma, np.eye(gamma.shape[0])[j])
    return float(g @ psi @ g)


def select_bandwidths(
    data: CrossSection,
    p: int = 1,
    q: int = 2,
    nu: int = 0,
    k: KernelSpec = KernelSpec(),
    fallback: bool = False,
    pilot: str = "staged",
    regularize: bool = True,
) -> BandwidthPlan:
    """Plug-in ``h`` (point estimate) and ``b`` (bias estimate).

    Pilot quantities: Gaussian-KDE density at the cutoff, nearest-neighbour
    conditional variances averaged over a rule-of-thumb window on each side,
    and one-sided derivatives. The derivative pilots depend on ``pilot``:

    ``"staged"``
        The ``(q+1)``-th derivatives for ``b`` come from local order-``(q+1)``
        fits at a preliminary bandwidth ``d``, itself plugged in from global
        degree-``(q+2)`` fits. The ``(p+1)``-th derivatives for ``h`` come
        from local order-``q`` fits at ``b``.
    ``"local"``
        As ``"staged"`` but the ``(q+1)``-th derivatives come straight from
        global degree-``(q+2)`` fits.
    ``"global"``
        Global polynomial fits of degree ``q+2`` (for ``b``) and ``p+2``
        (for ``h``).

    With ``regularize`` the squared bias constant in each formula is
    replaced by ``B^2 + R``, where ``R`` is ``REGULARIZATION`` times the
    plug-in variance of the estimated ``B``. This keeps the bandwidth finite
    when the true bias constant is zero and ``B`` is pure pilot noise.
    Every bandwidth is capped at the largest ``|z|`` of the side with the
    shorter range.

    Parameters
    ----------
    fallback : bool
        If a bias constant is numerically zero relative to the spread of y and z, use
        ``1.5 * IQR(z) * n^(-1/(2r+3))`` with a warning instead of raising.
    """
    if q <= p:
        raise ValueError("q must exceed p")
    if not 0 <= nu <= p:
        raise ValueError("nu must lie in [0, p]")
    if pilot not in PILOTS:
        raise ValueError(f"pilot must be one of {PILOTS}")
    z, y = data.z, data.y
    n = data.n
    above, below = data.above, data.below
    for side, m in (("above", above), ("below", below)):
        if m.sum() < q + 3:
            raise EstimationError(f"side {side!r} has {int(m.sum())} observations; pilot fits need {q + 3}")

    f_hat, kde_bw = density_at_cutoff(z)
    if not f_hat > 0:
        raise EstimationError("density estimate is zero at the cutoff")
    pilot_h = 1.84 * float(np.std(z, ddof=1)) * n ** (-0.2)
    sigma2 = estimate_residual_variance(data, "nn").sigma2
    s2_plus = _side_variance(z[above], sigma2[above], pilot_h)
    s2_minus = _side_variance(z[below], sigma2[below], pilot_h)
    s2_sum = s2_plus + s2_minus

    km_p = kernel_moments(k, p, (p + 1,))
    km_q = kernel_moments(k, q, (q + 1,))
    cap = min(float(np.max(z[above])), float(np.max(-z[below])))
    iqr = float(np.subtract(*np.percentile(z, [75, 25])))
    fallback_used = []
    # bias constants carry units of y / z^deriv; test them on a unit-free scale
    z_scale = float(np.max(np.abs(z)))
    y_scale = float(np.std(y)) or 1.0

    def resolve(B2, compute, order, name, deriv):
        if math.sqrt(B2) * z_scale**deriv / y_scale >= BIAS_TOL:
            return compute()
        if not fallback:
            raise EstimationError(f"bias constant vanishes for {name} (|B|={math.sqrt(B2):.3g})")
        warnings.warn(f"bias constant vanishes for {name}; using IQR rule-of-thumb bandwidth", RuntimeWarning)
        fallback_used.append(name)
        return 1.5 * iqr * n ** (-1.0 / (2 * order + 3))

    # bias-estimation bandwidth. The bias of the jump estimate combines the
    # sides as dd+ - sign_b * dd-, so b targets the MSE of that combination.
    sign_b = (-1) ** (nu + q + 1)
    d_bw = V_d = B_d = math.nan
    if pilot == "staged":
        # preliminary bandwidth for the (q+1)-th derivatives, whose own bias
        # comes from global degree-(q+2) fits
        km_d = kernel_moments(k, q + 1, (q + 2,))
        e_plus, _ = global_derivative(z[above], y[above], q + 2, q + 2)
        e_minus, _ = global_derivative(z[below], y[below], q + 2, q + 2)
        V_d = math.factorial(q + 1) ** 2 * s2_sum / f_hat * _quad_form(km_d.gamma, km_d.psi, q + 1)
        const_d = math.factorial(q + 1) * float(np.linalg.solve(km_d.gamma, km_d.vartheta[q + 2])[q + 1])
        B_d = (e_plus + sign_b * e_minus) * const_d / math.factorial(q + 2)
        d_raw = resolve(B_d * B_d, lambda: h_formula(V_d, abs(B_d), n, q + 1, q + 1), q + 1, "d", q + 2)
        d_bw = min(d_raw, cap)
        dd_plus, vd_plus = _local_derivative(data, "above", q + 1, d_bw, q + 1, k, sigma2)
        dd_minus, vd_minus = _local_derivative(data, "below", q + 1, d_bw, q + 1, k, sigma2)
    else:
        dd_plus, vd_plus = global_derivative(z[above], y[above], q + 2, q + 1, sigma2[above])
        dd_minus, vd_minus = global_derivative(z[below], y[below], q + 2, q + 1, sigma2[below])
    V_b = math.factorial(p + 1) ** 2 * s2_sum / f_hat * _quad_form(km_q.gamma, km_q.psi, p + 1)
    const_b = math.factorial(p + 1) * float(np.linalg.solve(km_q.gamma, km_q.vartheta[q + 1])[p + 1])
    scale_b = const_b / math.factorial(q + 1)
    B_b = (dd_plus - sign_b * dd_minus) * scale_b
    R_b = REGULARIZATION * scale_b**2 * (vd_plus + vd_minus) if regularize else 0.0
    B2_b = B_b * B_b + R_b
    b_raw = resolve(B2_b, lambda: b_formula(V_b, math.sqrt(B2_b), n, p, q), q, "b", q + 1)
    b = min(b_raw, cap)

    # point-estimation bandwidth
    if pilot != "global":
        d_plus, v_plus = _local_derivative(data, "above", q, b, p + 1, k, sigma2)
        d_minus, v_minus = _local_derivative(data, "below", q, b, p + 1, k, sigma2)
    else:
        d_plus, v_plus = global_derivative(z[above], y[above], p + 2, p + 1, sigma2[above])
        d_minus, v_minus = global_derivative(z[below], y[below], p + 2, p + 1, sigma2[below])
    V_h = math.factorial(nu) ** 2 * s2_sum / f_hat * _quad_form(km_p.gamma, km_p.psi, nu)
    const_h = math.factorial(nu) * float(np.linalg.solve(km_p.gamma, km_p.vartheta[p + 1])[nu])
    scale_h = const_h / math.factorial(p + 1)
    B_h = (d_plus - (-1) ** (nu + p + 1) * d_minus) * scale_h
    R_h = REGULARIZATION * scale_h**2 * (v_plus + v_minus) if regularize else 0.0
    B2_h = B_h * B_h + R_h
    h_raw = resolve(B2_h, lambda: h_formula(V_h, math.sqrt(B2_h), n, p, nu), p, "h", p + 1)
    h = min(h_raw, cap)

    diagnostics = {
        "n": n,
        "f_hat": f_hat,
        "kde_bandwidth": kde_bw,
        "sigma2_plus": s2_plus,
        "sigma2_minus": s2_minus,
        "deriv_plus": d_plus,
        "deriv_minus": d_minus,
        "deriv_b_plus": dd_plus,
        "deriv_b_minus": dd_minus,
        "V_h": V_h,
        "B_h": B_h,
        "R_h": R_h,
        "V_b": V_b,
        "B_b": B_b,
        "R_b": R_b,
        "d_bw": d_bw,
        "V_d": V_d,
        "B_d": B_d,
        "h_uncapped": h_raw,
        "b_uncapped": b_raw,
        "cap": cap,
        "h_capped": h_raw > cap,
        "b_capped": b_raw > cap,
        "fallback": fallback_used,
        "pilot": pilot,
        "regularize": regularize,
        "p": p,
        "q": q,
        "nu": nu,
        "kernel": k.family,
    }
    return BandwidthPlan(h=h, b=b, pilot_h=pilot_h, diagnostics=diagnostics)


def _local_derivative(data, side, order, bw, deriv, k, sigma2) -> tuple[float, float]:
    fit = fit_one_sided(data, side, order, bw, k)
    w = fit.linear_weights(deriv)
    return fit.derivative(deriv), float(np.sum(w * w * sigma2))


def mse_optimal_h(
    data: CrossSection,
    p: int = 1,
    nu: int = 0,
    k: KernelSpec = KernelSpec(),
    fallback: bool = False,
    q: int | None = None,
    **options,
) -> BandwidthPlan:
    """Point-estimation bandwidth plan (``q`` defaults to ``p + 1``)."""
    return select_bandwidths(data, p, p + 1 if q is None else q, nu, k, fallback, **options)


def mse_optimal_b(
    data: CrossSection,
    p: int = 1,
    q: int = 2,
    nu: int = 0,
    k: KernelSpec = KernelSpec(),
    fallback: bool = False,
    **options,
) -> float:
    """Bias-estimation bandwidth."""
    if q <= p:
        raise ValueError("q must exceed p")
    return select_bandwidths(data, p, q, nu, k, fallback, **options).b

"""One-sided local polynomial regression at the cutoff.

Fits use the scaled basis ``r_p(z/h)`` internally and report coefficients in
the raw basis ``r_p(z) = (1, z, ..., z^p)``, so ``delta_hat[j] * j!`` is the
j-th one-sided derivative at zero. Sample matrices are normalised by the full
cross-section size ``n`` (both sides), which is the convention all variance
formulas downstream rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from didc.data import CrossSection
from didc.kernels import KernelSpec, kernel_weight

MAX_CONDITION = 1e12


class EstimationError(RuntimeError):
    """Raised when a fit or estimate cannot be computed from the data."""


def poly_basis(x: np.ndarray, p: int) -> np.ndarray:
    """Columns ``1, x, ..., x^p``."""
    return np.vander(np.asarray(x, dtype=float), p + 1, increasing=True)


@dataclass(frozen=True, eq=False)
class LocalPolyFit:
    """Result of a one-sided kernel-weighted polynomial fit.

    Attributes
    ----------
    side : {"above", "below"}
    p : int
        Polynomial order.
    h : float
        Bandwidth in running-variable units.
    delta_hat : ndarray
        Raw-basis coefficients.
    n_eff : int
        Number of observations with positive kernel weight.
    Gamma_h : ndarray
        ``Z_p(h)' W Z_p(h) / n``.
    vartheta_h : dict
        ``q -> Z_p(h)' W S_q(h) / n`` for ``q`` in ``{p+1, p+2}``.
    residuals : ndarray
        ``y - r_p(z)' delta_hat`` on the fitted side, NaN on the other side.
    weights : ndarray
        ``K_h(z)`` on the fitted side, zero elsewhere (length ``n``).
    design : ndarray
        ``r_p(z/h)`` for every observation (length ``n``).
    """

    side: str
    p: int
    h: float
    kernel: KernelSpec
    delta_hat: np.ndarray
    n_eff: int
    Gamma_h: np.ndarray
    vartheta_h: dict
    residuals: np.ndarray
    weights: np.ndarray
    design: np.ndarray
    z: np.ndarray
    n: int

    def derivative(self, nu: int = 0) -> float:
        """``nu! * delta_hat[nu]``: the one-sided ``nu``-th derivative at 0."""
        return math.factorial(nu) * float(self.delta_hat[nu])

    @property
    def gamma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.Gamma_h)

    def linear_weights(self, nu: int = 0) -> np.ndarray:
        """Vector ``w`` with ``derivative(nu) == w @ y`` for the fitted outcome."""
        row = np.linalg.solve(self.Gamma_h, np.eye(self.p + 1)[nu])
        return math.factorial(nu) * self.h ** (-nu) * (self.design @ row) * self.weights / self.n

    def bias_constant(self, nu: int = 0) -> float:
        """Sample ``nu! e_nu' Gamma^{-1} vartheta_{p,p+1}`` (sign of the side built in)."""
        return math.factorial(nu) * float(np.linalg.solve(self.Gamma_h, self.vartheta_h[self.p + 1])[nu])


def fit_one_sided(
    data: CrossSection,
    side: str,
    p: int,
    h: float,
    k: KernelSpec = KernelSpec(),
) -> LocalPolyFit:
    """Kernel-weighted least squares of ``y`` on ``r_p(z)`` on one side of 0.

    Parameters
    ----------
    data : CrossSection
    side : {"above", "below"}
    p : int
        Polynomial order.
    h : float
        Bandwidth; weights are ``K(z/h)/h``.
    k : KernelSpec

    Raises
    ------
    EstimationError
        Too few kernel-positive observations or an ill-conditioned design.
    """
    if not (h > 0 and math.isfinite(h)):
        raise ValueError(f"bandwidth must be positive and finite, got {h}")
    if p < 0:
        raise ValueError("p must be nonnegative")
    mask = data.side_mask(side)
    n = data.n
    u = data.z / h
    w = np.where(mask, kernel_weight(u, k) / h, 0.0)
    active = w > 0
    n_eff = int(active.sum())
    if n_eff < p + 1:
        raise EstimationError(
            f"insufficient effective observations on side {side!r}: {n_eff} < {p + 1} (h={h:.6g})"
        )
    design = poly_basis(u, p)
    sw = np.sqrt(w[active])
    X = design[active] * sw[:, None]
    # column scaling before the condition check so units of z do not matter
    col = np.linalg.norm(X, axis=0)
    if np.any(col == 0):
        raise EstimationError(f"singular design on side {side!r}")
    s = np.linalg.svd(X / col, compute_uv=False)
    if s[-1] == 0 or s[0] / s[-1] > MAX_CONDITION:
        raise EstimationError(f"singular design on side {side!r} (condition number too large)")
    Q, R = np.linalg.qr(X)
    beta_scaled = np.linalg.solve(R, Q.T @ (data.y[active] * sw))
    delta = beta_scaled * h ** (-np.arange(p + 1.0))

    gamma = design.T @ (design * w[:, None]) / n
    gamma = 0.5 * (gamma + gamma.T)
    vartheta = {q: design.T @ (w * u**q) / n for q in (p + 1, p + 2)}
    resid = np.full(n, np.nan)
    resid[mask] = data.y[mask] - poly_basis(data.z[mask], p) @ delta
    return LocalPolyFit(
        side=side,
        p=p,
        h=float(h),
        kernel=k,
        delta_hat=delta,
        n_eff=n_eff,
        Gamma_h=gamma,
        vartheta_h=vartheta,
        residuals=resid,
        weights=w,
        design=design,
        z=data.z,
        n=n,
    )


@dataclass(frozen=True, eq=False)
class ResidualVariance:
    """Per-observation conditional variance estimates ``sigma2`` (length n)."""

    sigma2: np.ndarray
    method: str = "nn"

    def __post_init__(self):
        s = np.asarray(self.sigma2, dtype=float)
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("variance estimates must be finite and nonnegative")
        object.__setattr__(self, "sigma2", s)


def psi_matrix(design_a, w_a, design_b, w_b, sigma2, n: int) -> np.ndarray:
    """``Z_a' diag(w_a * sigma2 * w_b) Z_b / n``."""
    return design_a.T @ (design_b * (w_a * sigma2 * w_b)[:, None]) / n


def sample_psi(fit_a: LocalPolyFit, fit_b: LocalPolyFit, sigma: ResidualVariance) -> np.ndarray:
    """Sample ``Psi_{p,q}(h, b)`` pairing two fits on the same side and data."""
    if fit_a.side != fit_b.side:
        raise ValueError(f"side mismatch: {fit_a.side!r} vs {fit_b.side!r}")
    if fit_a.z is not fit_b.z and not np.array_equal(fit_a.z, fit_b.z):
        raise ValueError("fits were computed on different data")
    return psi_matrix(fit_a.design, fit_a.weights, fit_b.design, fit_b.weights, sigma.sigma2, fit_a.n)


def _nn_variance_one_side(z: np.ndarray, y: np.ndarray, J: int) -> np.ndarray:
    m = z.size
    order = np.argsort(z, kind="stable")
    zs, ys = z[order], y[order]
    J = min(J, m - 1)
    offsets = np.concatenate([np.arange(-J, 0), np.arange(1, J + 1)])
    idx = np.arange(m)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < m)
    idx_c = np.clip(idx, 0, m - 1)
    dist = np.where(valid, np.abs(zs[idx_c] - zs[:, None]), np.inf)
    pick = np.argsort(dist, axis=1, kind="stable")[:, :J]
    nbr = np.take_along_axis(idx_c, pick, axis=1)
    out = np.empty(m)
    out[order] = J / (J + 1.0) * (ys - ys[nbr].mean(axis=1)) ** 2
    return out


def estimate_residual_variance(
    data: CrossSection,
    method: str = "nn",
    J: int = 3,
    p: int = 1,
    h: float | None = None,
    k: KernelSpec = KernelSpec(),
) -> ResidualVariance:
    """Plug-in conditional variances for each observation.

    Parameters
    ----------
    data : CrossSection
    method : {"nn", "residual"}
        ``nn`` compares each outcome with the mean of its ``J`` nearest
        same-side neighbours in z. ``residual`` squares the residuals of a
        one-sided order-``p`` fit at bandwidth ``h`` (default: covering the
        whole side).
    """
    sigma2 = np.zeros(data.n)
    for side in ("above", "below"):
        mask = data.side_mask(side)
        m = int(mask.sum())
        if method == "nn":
            if m < 2:
                raise EstimationError(f"too few observations on side {side!r} for nearest-neighbour variance")
            sigma2[mask] = _nn_variance_one_side(data.z[mask], data.y[mask], J)
        elif method == "residual":
            if m == 0:
                raise EstimationError(f"no observations on side {side!r}")
            hs = h if h is not None else 1.01 * float(np.max(np.abs(data.z[mask]))) + 1e-12
            fit = fit_one_sided(data, side, p, hs, k)
            sigma2[mask] = fit.residuals[mask] ** 2
        else:
            raise ValueError(f"unknown variance method {method!r}")
    return ResidualVariance(sigma2, method)

"""Checks of the identifying assumptions on pre-treatment periods.

``wald_time_invariance`` tests whether the cutoff jump is the same in every
pre-period (a stacked local-linear RD regression). ``ks_time_invariance``
tests whether the conditional mean function on one side is the same in two
pre-periods (series regression plus a recentred residual bootstrap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from didc.bandwidth import select_bandwidths
from didc.data import CrossSection, PanelDataset, slice_period
from didc.kernels import KernelSpec, kernel_weight
from didc.lpreg import EstimationError

RULES = ("pooled", "smallest", "biggest")


@dataclass(frozen=True)
class WaldTestResult:
    theta_hat: dict
    theta_se: dict
    F_stat: float
    df: tuple[int, int]
    p_value: float
    bandwidth_used: float
    bandwidth_rule: str
    n_obs: int
    jump_intercept: bool = True

    def to_dict(self) -> dict:
        return {
            "theta_hat": dict(self.theta_hat),
            "theta_se": dict(self.theta_se),
            "F_stat": self.F_stat,
            "df": list(self.df),
            "p_value": self.p_value,
            "bandwidth_used": self.bandwidth_used,
            "bandwidth_rule": self.bandwidth_rule,
            "n_obs": self.n_obs,
            "jump_intercept": self.jump_intercept,
        }


@dataclass(frozen=True)
class KsTestResult:
    ks_plus: float | None
    ks_minus: float | None
    p_plus: float | None
    p_minus: float | None
    K: dict
    B: int
    rng_seed: int
    boot_stats: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "ks_plus": self.ks_plus,
            "ks_minus": self.ks_minus,
            "p_plus": self.p_plus,
            "p_minus": self.p_minus,
            "K": dict(self.K),
            "B": self.B,
            "rng_seed": self.rng_seed,
        }


def _check_pre_periods(panel: PanelDataset, periods) -> list[str]:
    labels = [str(t) for t in periods]
    for t in labels:
        if panel.position(t) >= len(panel.period_order) - 1:
            raise ValueError(f"period {t!r} is not strictly pre-treatment")
    if len(set(labels)) != len(labels):
        raise ValueError("periods must be distinct")
    return labels


def _rule_bandwidth(panel: PanelDataset, periods: list[str], rule: str, k: KernelSpec) -> float:
    if rule == "pooled":
        z = np.concatenate([panel.z - panel.z0] * len(periods))
        y = np.concatenate([panel.outcomes[t] for t in periods])
        return select_bandwidths(CrossSection(z, y, panel.cutoff_treated), 1, 2, 0, k).h
    hs = [select_bandwidths(slice_period(panel, t), 1, 2, 0, k).h for t in periods]
    if rule == "smallest":
        return min(hs)
    if rule == "biggest":
        return max(hs)
    raise ValueError(f"bandwidth rule must be one of {RULES}")


def wald_time_invariance(
    panel: PanelDataset,
    pre_periods,
    rule: str = "pooled",
    k: KernelSpec = KernelSpec(),
    h: float | None = None,
    jump_intercept: bool = True,
    cov: str = "hc1",
) -> WaldTestResult:
    """Wald F test that the cutoff effect is equal across pre-periods.

    Each period gets its own intercept, slope, treated dummy and treated x
    slope term, estimated by kernel-weighted least squares within the
    bandwidth; the tested coefficient is the treated dummy. With
    ``jump_intercept=False`` the treated dummy is dropped and the treated x
    slope coefficient is tested instead.

    Parameters
    ----------
    rule : {"pooled", "smallest", "biggest"}
        Bandwidth from all periods stacked, or the min/max of per-period
        bandwidths. Ignored when ``h`` is given.
    cov : {"hc1", "cluster"}
        Heteroskedasticity-robust covariance, or clustered by unit across
        the stacked periods.
    """
    periods = _check_pre_periods(panel, pre_periods)
    if len(periods) < 2:
        raise ValueError("need at least 2 pre-periods")
    if cov not in ("hc1", "cluster"):
        raise ValueError("cov must be 'hc1' or 'cluster'")
    bw = float(h) if h is not None else _rule_bandwidth(panel, periods, rule, k)
    zc = panel.z - panel.z0
    w = kernel_weight(zc / bw, k) / bw
    keep = w > 0
    zk, wk = zc[keep], w[keep]
    d = (zk >= 0) if panel.cutoff_treated else (zk > 0)
    cols = [np.ones_like(zk), zk, d * 1.0, d * zk] if jump_intercept else [np.ones_like(zk), zk, d * zk]
    X = np.column_stack(cols)
    tested = 2
    npar = X.shape[1]
    if X.shape[0] <= npar or np.linalg.matrix_rank(X * np.sqrt(wk)[:, None]) < npar:
        raise EstimationError("singular stacked design within the bandwidth")

    XtW = X.T * wk
    bread = np.linalg.inv(XtW @ X)
    coefs, scores = [], []
    for t in periods:
        y = panel.outcomes[t][keep]
        beta = bread @ (XtW @ y)
        coefs.append(beta)
        scores.append(X * (wk * (y - X @ beta))[:, None])

    m = len(periods)
    n_obs = m * zk.size
    V = np.zeros((m * npar, m * npar))
    for i in range(m):
        for j in range(m):
            if i != j and cov == "hc1":
                continue
            meat = scores[i].T @ scores[j]
            V[i * npar:(i + 1) * npar, j * npar:(j + 1) * npar] = bread @ meat @ bread
    dof = n_obs - m * npar
    if cov == "hc1":
        V *= n_obs / dof
    else:
        G = zk.size
        V *= G / (G - 1) * (n_obs - 1) / dof

    theta = np.array([c[tested] for c in coefs])
    sel = [i * npar + tested for i in range(m)]
    Vt = V[np.ix_(sel, sel)]
    R = np.zeros((m - 1, m))
    R[np.arange(m - 1), np.arange(m - 1)] = 1.0
    R[np.arange(m - 1), np.arange(1, m)] = -1.0
    diff = R @ theta
    RVR = R @ Vt @ R.T
    W = float(diff @ np.linalg.lstsq(RVR, diff, rcond=None)[0])
    F = max(W / (m - 1), 0.0)
    p = float(stats.f.sf(F, m - 1, dof))
    return WaldTestResult(
        theta_hat={t: float(v) for t, v in zip(periods, theta)},
        theta_se={t: float(math.sqrt(Vt[i, i])) for i, t in enumerate(periods)},
        F_stat=F,
        df=(m - 1, dof),
        p_value=min(max(p, 0.0), 1.0),
        bandwidth_used=bw,
        bandwidth_rule=rule if h is None else "fixed",
        n_obs=n_obs,
        jump_intercept=jump_intercept,
    )


def default_series_dim(n: int) -> int:
    """``ceil(2 n^(1/5))`` capped at 8."""
    return min(8, math.ceil(2 * n ** 0.2))


def series_basis(z: np.ndarray, K: int) -> np.ndarray:
    """Polynomials of degree ``K-1`` in centred z, non-constant columns scaled to unit variance."""
    zc = z - z.mean()
    X = np.vander(zc, K, increasing=True)
    sd = X[:, 1:].std(axis=0)
    if np.any(sd == 0):
        raise EstimationError("running variable has no variation on this side")
    X[:, 1:] /= sd
    return X


def _sup_stat(d_sorted: np.ndarray, last_of_tie: np.ndarray, n: int) -> np.ndarray:
    # sup over observed z of |sum_{Z_i <= z} d_i| / sqrt(n); d_sorted may hold many columns
    c = np.cumsum(d_sorted, axis=0)[last_of_tie]
    return np.max(np.abs(c), axis=0) / math.sqrt(n)


def _ks_one_side(z, ya, yb, K, B, rng):
    n = z.size
    if K < 1 or n < K + 2:
        raise ValueError(f"series dimension K={K} too large for {n} observations")
    Q, _ = np.linalg.qr(series_basis(z, K))
    order = np.argsort(z, kind="stable")
    zs = z[order]
    last_of_tie = np.flatnonzero(np.append(zs[1:] != zs[:-1], True))
    Qs = Q[order]

    def fitted_diff(u):
        return Qs @ (Qs.T @ u)

    diff = ya[order] - yb[order]
    stat = float(_sup_stat(fitted_diff(diff), last_of_tie, n))

    # residuals about each period's own fit; the null-imposed bootstrap world
    # is pooled_mean + resampled residual pair, and the pooled mean cancels in
    # the fitted difference
    ea = ya[order] - Qs @ (Qs.T @ ya[order])
    eb = yb[order] - Qs @ (Qs.T @ yb[order])
    u = ea - eb
    idx = rng.integers(0, n, size=(n, B))
    boot = _sup_stat(fitted_diff(u[idx]), last_of_tie, n)
    p = float(np.mean(boot >= stat))
    return stat, p, boot


def ks_time_invariance(
    panel: PanelDataset,
    t_a,
    t_b,
    side: str = "both",
    K: int | None = None,
    B: int = 999,
    rng_seed: int = 0,
) -> KsTestResult:
    """Bootstrap sup-test that two pre-periods share the conditional mean on a side.

    Parameters
    ----------
    side : {"above", "below", "both"}
    K : int, optional
        Series dimension; ``ceil(2 n^(1/5))`` capped at 8 on each side by default.
    B : int
        Bootstrap replications (at least 100).
    rng_seed : int
        Seeds one independent stream per side.
    """
    ta, tb = _check_pre_periods(panel, [t_a, t_b])
    if B < 100:
        raise ValueError("B must be at least 100")
    sides = ("above", "below") if side == "both" else (side,)
    if any(s not in ("above", "below") for s in sides):
        raise ValueError("side must be 'above', 'below' or 'both'")
    zc = panel.z - panel.z0
    treated = panel.treated
    streams = dict(zip(("above", "below"), np.random.SeedSequence(rng_seed).spawn(2)))
    out = {"above": (None, None), "below": (None, None)}
    Ks, boots = {}, {}
    for s in sides:
        m = treated if s == "above" else ~treated
        k_s = default_series_dim(int(m.sum())) if K is None else int(K)
        stat, p, boot = _ks_one_side(
            zc[m], panel.outcomes[ta][m], panel.outcomes[tb][m], k_s, B, np.random.default_rng(streams[s])
        )
        out[s] = (stat, p)
        Ks[s] = k_s
        boots[s] = boot
    return KsTestResult(
        ks_plus=out["above"][0],
        ks_minus=out["below"][0],
        p_plus=out["above"][1],
        p_minus=out["below"][1],
        K=Ks,
        B=B,
        rng_seed=rng_seed,
        boot_stats=boots,
    )

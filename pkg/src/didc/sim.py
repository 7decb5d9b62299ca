"""Simulation designs, comparator DiD estimators and a Monte Carlo harness."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.stats import beta as beta_dist
from scipy.stats import norm

from didc.data import PanelDataset, first_difference, slice_period
from didc.estimators import DidcConfig, estimate_didc, estimate_rd
from didc.lpreg import EstimationError

log = logging.getLogger(__name__)

MODELS = ("M1", "M2", "M3", "M4")
ESTIMATORS = ("didc", "rd", "did-mean", "did-or")
SIGMA_DEFAULT = 0.1295
MAX_FAILURE_RATE = 0.05

# baseline-period mean function, coefficients in increasing powers of z
MU0_BELOW = (0.48, 1.27, -0.5 * 7.18, 0.7 * 20.21, 1.1 * 21.54, 1.5 * 7.33)
MU0_ABOVE = (0.52, 0.84, -0.1 * 3.0, -0.3 * 7.99, -0.1 * 9.01, 3.56)
# post-period mean function for the time-varying designs
MU1_BELOW_TV = (0.48, 1.4)
MU1_ABOVE_TV = (0.52, 0.1)


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``confounder`` defaults to 1.0 for M1/M3 and 0.0 for M2/M4.
    """

    model: str = "M1"
    n: int = 1000
    tau: float = 0.0
    confounder: float | None = None
    sigma_t0: float = SIGMA_DEFAULT
    sigma_t1: float = SIGMA_DEFAULT
    seed: int = 0

    def __post_init__(self):
        model = self.model
        if isinstance(model, int) or (isinstance(model, str) and model.isdigit()):
            model = f"M{int(model)}"
        if model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        object.__setattr__(self, "model", model)
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if not (self.sigma_t0 > 0 and self.sigma_t1 > 0):
            raise ValueError("noise standard deviations must be positive")
        if self.confounder is None:
            object.__setattr__(self, "confounder", 1.0 if model in ("M1", "M3") else 0.0)

    @property
    def time_varying(self) -> bool:
        return self.model in ("M3", "M4")


def mu0(z, confounder: float = 0.0) -> np.ndarray:
    """Baseline-period conditional mean."""
    z = np.asarray(z, dtype=float)
    return np.where(z < 0, P.polyval(z, MU0_BELOW), P.polyval(z, MU0_ABOVE) + confounder)


def mu1(z, model: str, confounder: float = 0.0, tau: float = 0.0) -> np.ndarray:
    """Post-period conditional mean (treated side includes the effect ``tau``)."""
    z = np.asarray(z, dtype=float)
    if model in ("M1", "M2"):
        return mu0(z, confounder) + np.where(z < 0, 0.0, tau)
    return np.where(z < 0, P.polyval(z, MU1_BELOW_TV), P.polyval(z, MU1_ABOVE_TV) + confounder + tau)


def _rng(seed) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def draw_running_variable(rng: np.random.Generator, n: int) -> np.ndarray:
    """``2 * Beta(2, 4) - 1`` by inverse CDF."""
    return 2.0 * beta_dist.ppf(rng.random(n), 2, 4) - 1.0


def generate(spec: DgpSpec, seed=None) -> PanelDataset:
    """Two-period panel (periods ``"0"`` and ``"1"``) with cutoff 0."""
    rng = _rng(spec.seed if seed is None else seed)
    z = draw_running_variable(rng, spec.n)
    e = rng.standard_normal((2, spec.n))
    y0 = mu0(z, spec.confounder) + spec.sigma_t0 * e[0]
    y1 = mu1(z, spec.model, spec.confounder, spec.tau) + spec.sigma_t1 * e[1]
    return PanelDataset(tuple(range(spec.n)), z, {"0": y0, "1": y1}, 0.0, ("0", "1"))


def generate_pre_periods(
    n: int,
    jumps,
    sigma: float = SIGMA_DEFAULT,
    seed=0,
    shift_above: float = 0.0,
    shift_period: int | None = None,
) -> PanelDataset:
    """Panel with ``len(jumps)`` pre-periods plus one post period, for validity checks.

    Every pre-period shares the baseline mean function; period ``k`` adds
    ``jumps[k]`` on the treated side. ``shift_above`` is added to the whole
    treated side in pre-period ``shift_period``. Noise is independent across
    units and periods.
    """
    rng = _rng(seed)
    z = draw_running_variable(rng, n)
    K = len(jumps)
    labels = [str(k - K) for k in range(K)] + ["1"]
    e = rng.standard_normal((K + 1, n))
    treated = z >= 0
    outcomes = {}
    for k, lab in enumerate(labels[:-1]):
        y = mu0(z) + jumps[k] * treated + sigma * e[k]
        if shift_period == k:
            y = y + shift_above * treated
        outcomes[lab] = y
    outcomes["1"] = mu0(z) + sigma * e[K]
    return PanelDataset(tuple(range(n)), z, outcomes, 0.0, tuple(labels))


@dataclass(frozen=True)
class ComparatorEstimate:
    estimate: float
    se: float

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        half = norm.ppf(1 - alpha / 2) * self.se
        return self.estimate - half, self.estimate + half


def did_mean(panel: PanelDataset, t1, t0) -> ComparatorEstimate:
    """Difference in mean first differences between treated and control units."""
    cs = first_difference(panel, t1, t0)
    a, b = cs.y[cs.above], cs.y[cs.below]
    if a.size < 2 or b.size < 2:
        raise EstimationError("each side needs at least 2 units")
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    return ComparatorEstimate(float(a.mean() - b.mean()), se)


def did_outcome_regression(panel: PanelDataset, t1, t0, slope: bool = True) -> ComparatorEstimate:
    """ATT from a control-group linear regression of the first difference on z.

    With ``slope=False`` the control regression is intercept-only, which
    reproduces :func:`did_mean`.
    """
    cs = first_difference(panel, t1, t0)
    zt, yt = cs.z[cs.above], cs.y[cs.above]
    zc, yc = cs.z[cs.below], cs.y[cs.below]
    k = 2 if slope else 1
    if zc.size < k + 1 or zt.size < 2:
        raise EstimationError("too few observations for the outcome regression")
    Xc = np.vander(zc, k, increasing=True)
    Xt = np.vander(zt, k, increasing=True)
    if np.linalg.matrix_rank(Xc) < k:
        raise EstimationError("singular control regression")
    coef, *_ = np.linalg.lstsq(Xc, yc, rcond=None)
    adj = yt - Xt @ coef
    att = float(adj.mean())
    # influence-function variance: treated-sample noise plus estimation of coef
    resid = yc - Xc @ coef
    bread = np.linalg.inv(Xc.T @ Xc)
    cov_coef = bread @ (Xc.T * resid**2) @ Xc @ bread
    xbar = Xt.mean(axis=0)
    var = adj.var(ddof=1) / zt.size + float(xbar @ cov_coef @ xbar)
    return ComparatorEstimate(att, math.sqrt(var))


@dataclass
class EstimatorSummary:
    av_bias: float
    med_bias: float
    rmse: float
    coverage: float
    cil: float
    mean_h: float
    mean_b: float
    n_ok: int
    failures: int


@dataclass
class SimulationReport:
    spec: DgpSpec
    R: int
    master_seed: int
    rows: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["av_bias", "med_bias", "rmse", "coverage", "cil", "mean_h", "mean_b", "n_ok", "failures"]
        w.writerow(["model", "n", "tau", "confounder", "sigma_t0", "sigma_t1", "R", "seed", "estimator", *cols])
        s = self.spec
        for name, row in self.rows.items():
            vals = [getattr(row, c) for c in cols]
            w.writerow([s.model, s.n, repr(s.tau), repr(s.confounder), repr(s.sigma_t0), repr(s.sigma_t1),
                        self.R, self.master_seed, name, *[repr(v) if isinstance(v, float) else v for v in vals]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "R": self.R,
            "master_seed": self.master_seed,
            "rows": {k: asdict(v) for k, v in self.rows.items()},
        }


def replication_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    """Independent stream for replication ``rep``; does not depend on scheduling."""
    return np.random.SeedSequence(master_seed, spawn_key=(rep,))


def _one_replication(args) -> dict:
    spec, estimators, master_seed, rep, config = args
    panel = generate(spec, seed=replication_seed(master_seed, rep))
    out = {}
    for name in estimators:
        try:
            if name == "didc":
                e = estimate_didc(panel, "1", "0", config)
                out[name] = (e.tau_bc, *e.ci_robust, e.h, e.b)
            elif name == "rd":
                cs = slice_period(panel, "1")
                e = estimate_rd(cs, config.p, config.kernel, q=config.q, alpha=config.alpha, config=config)
                out[name] = (e.tau_bc, *e.ci_robust, e.h, e.b)
            elif name == "did-mean":
                e = did_mean(panel, "1", "0")
                out[name] = (e.estimate, *e.ci(config.alpha), math.nan, math.nan)
            elif name == "did-or":
                e = did_outcome_regression(panel, "1", "0")
                out[name] = (e.estimate, *e.ci(config.alpha), math.nan, math.nan)
            else:
                raise ValueError(f"unknown estimator {name!r}")
        except (EstimationError, np.linalg.LinAlgError) as exc:
            out[name] = str(exc)
    return out


def _chunk(args_list):
    return [_one_replication(a) for a in args_list]


def _mean(xs) -> float:
    return math.fsum(xs) / len(xs) if xs else math.nan


def summarize(results: list, tau: float, name: str) -> EstimatorSummary:
    ok = [r[name] for r in results if not isinstance(r[name], str)]
    fails = len(results) - len(ok)
    if not ok:
        return EstimatorSummary(*([math.nan] * 7), 0, fails)
    err = [t - tau for t, *_ in ok]
    return EstimatorSummary(
        av_bias=_mean(err),
        med_bias=float(np.median(err)),
        rmse=math.sqrt(_mean([e * e for e in err])),
        coverage=_mean([1.0 if lo <= tau <= hi else 0.0 for _, lo, hi, _, _ in ok]),
        cil=_mean([hi - lo for _, lo, hi, _, _ in ok]),
        mean_h=_mean([h for *_, h, _ in ok]),
        mean_b=_mean([b for *_, b in ok]),
        n_ok=len(ok),
        failures=fails,
    )


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get("DIDC_THREADS")
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("worker count must be positive")
    return workers


def run_monte_carlo(
    spec: DgpSpec,
    estimators=ESTIMATORS,
    R: int = 1000,
    workers: int | None = None,
    master_seed: int = 0,
    config: DidcConfig = DidcConfig(),
) -> SimulationReport:
    """Replicate ``spec`` ``R`` times and summarise each estimator.

    Replication ``r`` always draws from ``SeedSequence(master_seed,
    spawn_key=(r,))`` and results are aggregated in replication order with
    exactly rounded sums, so the report does not depend on ``workers``.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    estimators = tuple(estimators)
    workers = resolve_workers(workers)
    args = [(spec, estimators, master_seed, r, config) for r in range(R)]
    if workers == 1:
        results = [_one_replication(a) for a in args]
    else:
        size = math.ceil(R / (workers * 4))
        chunks = [args[i:i + size] for i in range(0, R, size)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = [r for part in ex.map(_chunk, chunks) for r in part]

    report = SimulationReport(spec, R, master_seed)
    for name in estimators:
        row = summarize(results, spec.tau, name)
        report.rows[name] = row
        msgs = [r[name] for r in results if isinstance(r[name], str)]
        report.failures[name] = msgs
        if msgs:
            log.warning("%s failed in %d of %d replications; first error: %s", name, len(msgs), R, msgs[0])
        if len(msgs) > MAX_FAILURE_RATE * R:
            raise EstimationError(
                f"{name} failed in {len(msgs)} of {R} replications (limit {MAX_FAILURE_RATE:.0%}); "
                f"first error: {msgs[0]}"
            )
    return report

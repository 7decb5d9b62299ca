"""Partial identification of the effects on confounded and unconfounded units.

Notation: ``delta_plus``/``delta_minus`` are the one-sided limits of the
first-differenced outcome at the cutoff, ``y1_plus``/``y1_minus`` the
one-sided limits of the post-period outcome, and ``[y_min, y_max]`` the
outcome support. ``c1`` bounds the drift of the confounded potential outcome
and ``c2`` the drift of the confounding effect.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from didc.data import PanelDataset, first_difference, slice_period
from didc.estimators import DidcConfig, DidcEstimate, _jump
from didc.lpreg import EstimationError

ASSUMPTIONS = ("bv", "comp", "subs", "bv+comp", "bv+subs")
TARGETS = ("tau_c", "tau_uc")
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class SensitivityInputs:
    delta_plus: float
    delta_minus: float
    y1_plus: float
    y1_minus: float
    y_min: float
    y_max: float

    def __post_init__(self):
        vals = (self.delta_plus, self.delta_minus, self.y1_plus, self.y1_minus, self.y_min, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("sensitivity inputs must be finite")
        if self.y_min > self.y_max:
            raise ValueError("y_min must not exceed y_max")


def _check_c(c1: float, c2: float) -> None:
    if c1 < 0 or c2 < 0:
        raise ValueError("sensitivity parameters c1, c2 must be nonnegative")


def bound_arguments(s: SensitivityInputs, assumptions: str, target: str, c1: float = 0.0, c2: float = 0.0):
    """Candidate lists ``(lower_args, upper_args)``; the bounds are their max and min."""
    if assumptions not in ASSUMPTIONS:
        raise ValueError(f"assumptions must be one of {ASSUMPTIONS}")
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    bv = assumptions.startswith("bv")
    mode = assumptions.split("+")[-1] if assumptions != "bv" else None
    if bv:
        _check_c(c1, c2)
    dp, dd = s.delta_plus, s.delta_plus - s.delta_minus
    worst = (s.y_min - s.y_max, s.y_max - s.y_min)
    if target == "tau_c":
        lo, hi = [], []
        if bv:
            lo += [dp - c1, dd - c2]
            hi += [dp + c1, dd + c2]
        if mode == "comp":
            lo.append(s.y_min - s.y1_minus)
            hi.append(worst[1])
        elif mode == "subs":
            lo.append(worst[0])
            hi.append(s.y_max - s.y1_minus)
        return lo, hi
    if mode is None:
        raise ValueError("bounded variation alone does not identify tau_uc; add comp or subs")
    if mode == "comp":
        lo, hi = [worst[0]], [s.y1_plus - s.y_min]
        if bv:
            hi.append(dp + c1)
    else:
        lo, hi = [s.y1_plus - s.y_max], [worst[1]]
        if bv:
            lo.append(dp - c1)
    return lo, hi


def _bounds(s, assumptions, target, c1, c2):
    lo, hi = bound_arguments(s, assumptions, target, c1, c2)
    lb, ub = max(lo), min(hi)
    return lb, ub, lb > ub


def bv_bounds(s: SensitivityInputs, c1: float, c2: float) -> tuple[float, float, bool]:
    """Bounded-variation bounds on the confounded effect: ``(LB, UB, crossed)``."""
    return _bounds(s, "bv", "tau_c", c1, c2)


def modularity_bounds(s: SensitivityInputs, mode: str, target: str = "tau_c") -> tuple[float, float]:
    """Bounds under complementarity (``"comp"``) or substitutability (``"subs"``)."""
    mode = {"complementarity": "comp", "substitutability": "subs"}.get(mode, mode)
    if mode not in ("comp", "subs"):
        raise ValueError("mode must be complementarity or substitutability")
    lb, ub, _ = _bounds(s, mode, target, 0.0, 0.0)
    return lb, ub


def combined_bounds(
    s: SensitivityInputs, mode: str, c1: float, c2: float, target: str = "tau_c"
) -> tuple[float, float, bool]:
    """Bounded variation combined with a modularity assumption."""
    mode = {"complementarity": "comp", "substitutability": "subs"}.get(mode, mode)
    if mode not in ("comp", "subs"):
        raise ValueError("mode must be complementarity or substitutability")
    return _bounds(s, f"bv+{mode}", target, c1, c2)


@dataclass
class BoundsGrid:
    """Bounds over a ``(c1, c2)`` grid; arrays are indexed ``[c2, c1]``."""

    c1_grid: np.ndarray
    c2_grid: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    crossed: np.ndarray
    assumptions: str
    target: str
    inputs: SensitivityInputs

    def rows(self) -> list[dict]:
        out = []
        for i, c2 in enumerate(self.c2_grid):
            for j, c1 in enumerate(self.c1_grid):
                out.append({
                    "c1": float(c1),
                    "c2": float(c2),
                    "lb": float(self.lb[i, j]),
                    "ub": float(self.ub[i, j]),
                    "crossed": bool(self.crossed[i, j]),
                })
        return out

    def is_monotone(self) -> bool:
        """LB non-increasing and UB non-decreasing along both grid axes."""
        ok = True
        for axis in (0, 1):
            if self.lb.shape[axis] > 1:
                ok &= bool(np.all(np.diff(self.lb, axis=axis) <= 1e-12))
                ok &= bool(np.all(np.diff(self.ub, axis=axis) >= -1e-12))
        return ok


def _check_grid(g) -> np.ndarray:
    g = np.atleast_1d(np.asarray(g, dtype=float))
    if g.size == 0:
        raise ValueError("grid must be nonempty")
    if np.any(g < 0):
        raise ValueError("grid values must be nonnegative")
    if np.any(np.diff(g) < 0):
        raise ValueError("grid must be sorted")
    return g


def grid_from_inputs(
    s: SensitivityInputs, assumptions: str, c1_grid, c2_grid, target: str = "tau_c"
) -> BoundsGrid:
    c1g, c2g = _check_grid(c1_grid), _check_grid(c2_grid)
    lb = np.empty((c2g.size, c1g.size))
    ub = np.empty_like(lb)
    for i, c2 in enumerate(c2g):
        for j, c1 in enumerate(c1g):
            lb[i, j], ub[i, j], _ = _bounds(s, assumptions, target, c1, c2)
    grid = BoundsGrid(c1g, c2g, lb, ub, lb > ub, assumptions, target, s)
    if not grid.is_monotone():
        raise RuntimeError("bounds grid violates monotonicity in (c1, c2)")
    return grid


def _default_periods(panel: PanelDataset, t1, t0):
    t1 = panel.post_period if t1 is None else str(t1)
    if t0 is None:
        i = panel.position(t1)
        if i == 0:
            raise ValueError("no period precedes t1")
        t0 = panel.period_order[i - 1]
    return t1, str(t0)


@dataclass(frozen=True)
class _Fitted:
    inputs: SensitivityInputs
    didc: DidcEstimate
    rd1: DidcEstimate


def _side_levels(est: DidcEstimate) -> tuple[float, float]:
    a, b = est.components["above"], est.components["below"]
    return a.estimate - a.bias, b.estimate - b.bias


def _fit_inputs(panel, t1, t0, config, config_y1, y_min, y_max) -> _Fitted:
    d = _jump(first_difference(panel, t1, t0), config)
    r1 = _jump(slice_period(panel, t1), config_y1)
    dp, dm = _side_levels(d)
    yp, ym = _side_levels(r1)
    return _Fitted(SensitivityInputs(dp, dm, yp, ym, y_min, y_max), d, r1)


def _outcome_range(panel: PanelDataset, y_min, y_max):
    ys = np.concatenate(list(panel.outcomes.values()))
    return (float(ys.min()) if y_min is None else float(y_min),
            float(ys.max()) if y_max is None else float(y_max))


def sensitivity_inputs(
    panel: PanelDataset,
    config: DidcConfig = DidcConfig(),
    t1=None,
    t0=None,
    y_min: float | None = None,
    y_max: float | None = None,
) -> SensitivityInputs:
    """Bias-corrected one-sided limits of the first difference and of the post-period outcome.

    ``y_min``/``y_max`` default to the smallest and largest outcome observed
    in any period.
    """
    t1, t0 = _default_periods(panel, t1, t0)
    y_min, y_max = _outcome_range(panel, y_min, y_max)
    return _fit_inputs(panel, t1, t0, config, config, y_min, y_max).inputs


def bounds_grid(
    panel: PanelDataset,
    config: DidcConfig = DidcConfig(),
    assumptions: str = "bv",
    c1_grid=(0.0,),
    c2_grid=(0.0,),
    target: str = "tau_c",
    t1=None,
    t0=None,
    y_min: float | None = None,
    y_max: float | None = None,
) -> BoundsGrid:
    """Estimate the sensitivity inputs from ``panel`` and evaluate the bounds on a grid."""
    s = sensitivity_inputs(panel, config, t1, t0, y_min, y_max)
    return grid_from_inputs(s, assumptions, c1_grid, c2_grid, target)


@dataclass
class BootstrapBounds:
    lb: float
    ub: float
    crossed: bool
    lb_ci: tuple[float, float]
    ub_ci: tuple[float, float]
    lb_kink: bool
    ub_kink: bool
    gap_tolerance: float
    B: int
    failures: int
    rng_seed: int
    draws: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "lb": self.lb,
            "ub": self.ub,
            "crossed": self.crossed,
            "lb_ci": list(self.lb_ci),
            "ub_ci": list(self.ub_ci),
            "lb_kink": self.lb_kink,
            "ub_kink": self.ub_kink,
            "gap_tolerance": self.gap_tolerance,
            "B": self.B,
            "failures": self.failures,
            "rng_seed": self.rng_seed,
        }


def _gap(args: np.ndarray, largest: bool) -> float:
    if args.size < 2:
        return math.inf
    s = np.sort(args)
    return float(s[-1] - s[-2]) if largest else float(s[1] - s[0])


def bootstrap_inputs(
    panel: PanelDataset,
    config: DidcConfig = DidcConfig(),
    B: int = 200,
    rng_seed: int = 0,
    t1=None,
    t0=None,
    y_min: float | None = None,
    y_max: float | None = None,
) -> tuple[SensitivityInputs, list[SensitivityInputs], int]:
    """Full-sample inputs and their unit-resampled replicates.

    Bandwidths and ``y_min``/``y_max`` are held at their full-sample values.
    Returns ``(inputs, draws, failures)``.
    """
    if B < 200:
        raise ValueError("B must be at least 200")
    t1, t0 = _default_periods(panel, t1, t0)
    y_min, y_max = _outcome_range(panel, y_min, y_max)
    base = _fit_inputs(panel, t1, t0, config, config, y_min, y_max)
    cfg_d = replace(config, h=base.didc.h, b=base.didc.b)
    cfg_1 = replace(config, h=base.rd1.h, b=base.rd1.b)
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    draws, failures = [], 0
    for _ in range(B):
        idx = rng.integers(0, panel.n, panel.n)
        try:
            draws.append(_fit_inputs(panel.take(idx), t1, t0, cfg_d, cfg_1, y_min, y_max).inputs)
        except (EstimationError, np.linalg.LinAlgError, ValueError):
            failures += 1
    if failures > MAX_FAILURE_RATE * B:
        raise EstimationError(f"bootstrap estimation failed in {failures} of {B} replications")
    return base.inputs, draws, failures


def bootstrap_cell(
    inputs: SensitivityInputs,
    draws: list[SensitivityInputs],
    assumptions: str,
    c1: float,
    c2: float,
    target: str = "tau_c",
    alpha: float = 0.05,
    gap_tolerance: float | None = None,
    failures: int = 0,
    rng_seed: int = 0,
) -> BootstrapBounds:
    """Percentile intervals for one ``(c1, c2)`` cell from precomputed replicates.

    The percentile bootstrap is only justified when the active argument of
    each max/min is separated from the runner-up. A cell whose gap is below
    ``gap_tolerance`` (default: twice the pooled bootstrap standard error of
    the arguments) is flagged as a kink with a warning; its interval is
    still returned.
    """
    lo0, hi0 = (np.array(a) for a in bound_arguments(inputs, assumptions, target, c1, c2))
    pairs = [bound_arguments(d, assumptions, target, c1, c2) for d in draws]
    dl = np.array([lo for lo, _ in pairs])
    dh = np.array([hi for _, hi in pairs])
    lb_draws, ub_draws = dl.max(axis=1), dh.min(axis=1)
    q = (100 * alpha / 2, 100 * (1 - alpha / 2))
    lb_ci = tuple(float(v) for v in np.percentile(lb_draws, q))
    ub_ci = tuple(float(v) for v in np.percentile(ub_draws, q))

    if gap_tolerance is None:
        sds = np.concatenate([dl.std(axis=0, ddof=1), dh.std(axis=0, ddof=1)])
        gap_tolerance = 2.0 * float(np.sqrt(np.mean(sds**2)))
    lb_kink = _gap(lo0, True) <= gap_tolerance
    ub_kink = _gap(hi0, False) <= gap_tolerance
    for name, kink in (("lower", lb_kink), ("upper", ub_kink)):
        if kink:
            warnings.warn(
                f"{name} bound at c1={c1:g}, c2={c2:g} is near a kink (arguments within "
                f"{gap_tolerance:.3g}); percentile interval may be unreliable",
                RuntimeWarning,
            )
    lb, ub = float(lo0.max()), float(hi0.min())
    return BootstrapBounds(
        lb=lb,
        ub=ub,
        crossed=lb > ub,
        lb_ci=lb_ci,
        ub_ci=ub_ci,
        lb_kink=lb_kink,
        ub_kink=ub_kink,
        gap_tolerance=gap_tolerance,
        B=len(draws) + failures,
        failures=failures,
        rng_seed=rng_seed,
        draws=np.column_stack([lb_draws, ub_draws]),
    )


def bounds_bootstrap(
    panel: PanelDataset,
    config: DidcConfig = DidcConfig(),
    assumptions: str = "bv",
    c1: float = 0.0,
    c2: float = 0.0,
    B: int = 200,
    rng_seed: int = 0,
    target: str = "tau_c",
    alpha: float = 0.05,
    t1=None,
    t0=None,
    y_min: float | None = None,
    y_max: float | None = None,
    gap_tolerance: float | None = None,
) -> BootstrapBounds:
    """Percentile intervals for the bounds from unit-level resampling with re-estimation.

    See :func:`bootstrap_inputs` for what is held fixed and
    :func:`bootstrap_cell` for the kink check.
    """
    bound_arguments(SensitivityInputs(0, 0, 0, 0, 0, 0), assumptions, target, c1, c2)
    inputs, draws, failures = bootstrap_inputs(panel, config, B, rng_seed, t1, t0, y_min, y_max)
    return bootstrap_cell(inputs, draws, assumptions, c1, c2, target, alpha, gap_tolerance, failures, rng_seed)

"""Panel data model, CSV ingestion and first-differencing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SCHEMA = {"unit": "unit", "period": "period", "y": "y", "z": "z"}


class PanelError(ValueError):
    """Raised when panel input violates a structural invariant."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CrossSection:
    """Pairs of centered running variable and outcome.

    Parameters
    ----------
    z : ndarray
        Running variable minus the cutoff.
    y : ndarray
        Outcome (a single period or a first difference).
    cutoff_treated : bool
        Whether ``z == 0`` belongs to the treated (above) side.
    """

    z: np.ndarray
    y: np.ndarray
    cutoff_treated: bool = True

    def __post_init__(self):
        z, y = _frozen(self.z), _frozen(self.y)
        if z.ndim != 1 or z.shape != y.shape:
            raise PanelError("z and y must be one-dimensional arrays of equal length")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
            raise PanelError("cross-section contains non-finite values")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def above(self) -> np.ndarray:
        """Boolean mask of the treated side."""
        return self.z >= 0 if self.cutoff_treated else self.z > 0

    @property
    def below(self) -> np.ndarray:
        return ~self.above

    def side_mask(self, side: str) -> np.ndarray:
        if side == "above":
            return self.above
        if side == "below":
            return self.below
        raise ValueError(f"side must be 'above' or 'below', got {side!r}")

    def require_two_sided(self, minimum: int = 1) -> None:
        na, nb = int(self.above.sum()), int(self.below.sum())
        if na < minimum or nb < minimum:
            raise PanelError(
                f"need at least {minimum} observations per side (above={na}, below={nb})"
            )

    def with_y(self, y) -> "CrossSection":
        return CrossSection(self.z, y, self.cutoff_treated)


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel with a time-invariant running variable.

    Parameters
    ----------
    unit_ids : sequence
        Opaque unit identifiers, one per unit.
    z : ndarray
        Running variable per unit (uncentered).
    outcomes : mapping
        Period label to outcome array aligned with ``unit_ids``.
    z0 : float
        Cutoff.
    period_order : sequence of str
        Period labels in time order; the last one is the post-treatment period.
    cutoff_treated : bool
        Assign ``z == z0`` to the treated side.
    """

    unit_ids: tuple
    z: np.ndarray
    outcomes: Mapping[str, np.ndarray]
    z0: float
    period_order: tuple[str, ...]
    cutoff_treated: bool = True
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(self.unit_ids)
        z = _frozen(self.z)
        order = tuple(str(t) for t in self.period_order)
        if len(ids) != z.size:
            raise PanelError("unit_ids and z have different lengths")
        if len(set(ids)) != len(ids):
            raise PanelError("duplicate unit identifiers")
        if len(order) < 2:
            raise PanelError("period_order needs at least 2 periods")
        if len(set(order)) != len(order):
            raise PanelError("period_order has repeated labels")
        if not math.isfinite(self.z0):
            raise PanelError("cutoff must be finite")
        if not np.all(np.isfinite(z)):
            raise PanelError("running variable contains non-finite values")
        outcomes = {}
        for t in order:
            if t not in self.outcomes:
                raise PanelError(f"ragged panel: no outcomes for period {t!r}")
            y = _frozen(self.outcomes[t])
            if y.shape != z.shape:
                raise PanelError(f"ragged panel: period {t!r} has {y.size} outcomes for {z.size} units")
            if not np.all(np.isfinite(y)):
                raise PanelError(f"non-finite outcome in period {t!r}")
            outcomes[t] = y
        extra = set(map(str, self.outcomes)) - set(order)
        if extra:
            raise PanelError(f"outcomes for undeclared periods: {sorted(extra)}")
        if np.sum(z > self.z0) < 2 or np.sum(z < self.z0) < 2:
            raise PanelError("need at least 2 units strictly on each side of the cutoff")
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "z0", float(self.z0))
        object.__setattr__(self, "period_order", order)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(order)})

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def post_period(self) -> str:
        return self.period_order[-1]

    @property
    def treated(self) -> np.ndarray:
        zc = self.z - self.z0
        return zc >= 0 if self.cutoff_treated else zc > 0

    def position(self, t) -> int:
        t = str(t)
        if t not in self._index:
            raise PanelError(f"unknown period label {t!r}; known: {list(self.period_order)}")
        return self._index[t]

    def replace_outcomes(self, outcomes: Mapping[str, np.ndarray]) -> "PanelDataset":
        return PanelDataset(self.unit_ids, self.z, outcomes, self.z0, self.period_order, self.cutoff_treated)

    def take(self, idx: np.ndarray) -> "PanelDataset":
        """Row subset or resample; duplicated rows receive fresh identifiers."""
        idx = np.asarray(idx)
        return PanelDataset(
            tuple(range(idx.size)),
            self.z[idx],
            {t: y[idx] for t, y in self.outcomes.items()},
            self.z0,
            self.period_order,
            self.cutoff_treated,
        )


def slice_period(panel: PanelDataset, t) -> CrossSection:
    """Cross-section of a single period's outcome against centered z."""
    panel.position(t)
    return CrossSection(panel.z - panel.z0, panel.outcomes[str(t)], panel.cutoff_treated)


def first_difference(panel: PanelDataset, t1, t0) -> CrossSection:
    """Cross-section of ``y[t1] - y[t0]`` against centered z.

    Raises
    ------
    PanelError
        If a label is unknown or ``t1`` does not come after ``t0``.
    """
    i1, i0 = panel.position(t1), panel.position(t0)
    if i1 <= i0:
        raise PanelError(f"period {t1!r} must come after {t0!r} in period_order")
    dy = panel.outcomes[str(t1)] - panel.outcomes[str(t0)]
    return CrossSection(panel.z - panel.z0, dy, panel.cutoff_treated)


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise PanelError(f"non-numeric value {text!r} in column {column!r} (line {line})") from None
    if not math.isfinite(v):
        raise PanelError(f"non-finite value {text!r} in column {column!r} (line {line})")
    return v


def load_panel(
    path,
    schema: Mapping[str, str] | None = None,
    z0: float = 0.0,
    period_order: Sequence[str] | None = None,
    cutoff_treated: bool = True,
) -> PanelDataset:
    """Read a long-format CSV (one row per unit and period) into a panel.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : mapping, optional
        Keys ``unit``, ``period``, ``y``, ``z`` mapped to column names.
    z0 : float
        Cutoff.
    period_order : sequence of str, optional
        Time order of period labels. Defaults to order of first appearance.
    cutoff_treated : bool
        Assign ``z == z0`` to the treated side.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update({k: v for k, v in schema.items() if v is not None})
    path = Path(path)
    if not path.is_file():
        raise PanelError(f"input file not found: {path}")

    z_of: dict[str, float] = {}
    y_of: dict[tuple[str, str], float] = {}
    units: list[str] = []
    seen_periods: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in cols.values() if c not in header]
        if missing:
            raise PanelError(f"missing column(s) {missing}; header has {header}")
        for line, row in enumerate(reader, start=2):
            u, t = row[cols["unit"]], row[cols["period"]]
            z = _parse_float(row[cols["z"]], cols["z"], line)
            y = _parse_float(row[cols["y"]], cols["y"], line)
            if (u, t) in y_of:
                raise PanelError(f"duplicate row for unit {u!r}, period {t!r} (line {line})")
            if u in z_of:
                if z_of[u] != z:
                    raise PanelError(f"inconsistent running variable for unit {u!r} (line {line})")
            else:
                z_of[u] = z
                units.append(u)
            if t not in seen_periods:
                seen_periods.append(t)
            y_of[(u, t)] = y

    order = [str(t) for t in period_order] if period_order is not None else seen_periods
    unknown = set(seen_periods) - set(order)
    if unknown:
        raise PanelError(f"periods in file but not in period_order: {sorted(unknown)}")
    outcomes = {}
    for t in order:
        vals = []
        for u in units:
            if (u, t) not in y_of:
                raise PanelError(f"ragged panel: unit {u!r} has no row for period {t!r}")
            vals.append(y_of[(u, t)])
        outcomes[t] = np.array(vals)
    return PanelDataset(
        tuple(units), np.array([z_of[u] for u in units]), outcomes, z0, tuple(order), cutoff_treated
    )


def write_panel(panel: PanelDataset, path, schema: Mapping[str, str] | None = None) -> None:
    """Write a panel back to long-format CSV (inverse of :func:`load_panel`)."""
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([cols["unit"], cols["period"], cols["z"], cols["y"]])
        for i, u in enumerate(panel.unit_ids):
            for t in panel.period_order:
                w.writerow([u, t, repr(float(panel.z[i])), repr(float(panel.outcomes[t][i]))])

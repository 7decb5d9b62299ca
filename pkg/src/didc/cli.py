"""``didc`` command-line interface.

Exit codes: 0 success, 1 usage or input error, 2 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from didc import bounds as bd
from didc.data import PanelDataset, PanelError, first_difference, load_panel
from didc.estimators import DidcConfig, estimate_didc
from didc.kernels import FAMILIES as KERNEL_FAMILIES, KernelSpec
from didc.lpreg import EstimationError, fit_one_sided
from didc.sim import ESTIMATORS, DgpSpec, run_monte_carlo
from didc.validity import RULES, ks_time_invariance, wald_time_invariance

SCHEMA_VERSION = "1.0"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _labels(text: str) -> list[str]:
    out = [t.strip() for t in text.split(",") if t.strip()]
    if not out:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return out


def parse_range(text: str) -> np.ndarray:
    """``start:stop:step`` (stop inclusive) or a single value."""
    parts = text.split(":")
    try:
        vals = [float(v) for v in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid grid {text!r}") from None
    if len(vals) == 1:
        return np.array(vals)
    if len(vals) != 3 or vals[2] <= 0 or vals[1] < vals[0]:
        raise argparse.ArgumentTypeError(f"grid must be start:stop:step with step > 0, got {text!r}")
    start, stop, step = vals
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(count), 12)


def _add_data_args(sp):
    g = sp.add_argument_group("data")
    g.add_argument("--input", required=True, help="long-format CSV")
    g.add_argument("--cutoff", required=True, type=float)
    g.add_argument("--unit-col", default="unit")
    g.add_argument("--period-col", default="period")
    g.add_argument("--y-col", default="y")
    g.add_argument("--z-col", default="z")
    g.add_argument("--period-order", type=_labels, help="time order of period labels (default: file order)")


def _add_estimator_args(sp):
    g = sp.add_argument_group("estimator")
    g.add_argument("--t0", help="baseline period (default: the one before --t1)")
    g.add_argument("--t1", help="post period (default: last)")
    g.add_argument("--p", type=int, default=1)
    g.add_argument("--q", type=int, default=2)
    g.add_argument("--kernel", choices=KERNEL_FAMILIES, default="triangular")
    g.add_argument("--alpha", type=float, default=0.05)
    g.add_argument("--h", type=float)
    g.add_argument("--b", type=float)


def _add_output_args(sp):
    g = sp.add_argument_group("output")
    g.add_argument("--format", choices=("json", "csv", "table"),
                   help="default: from the --out suffix, else json")
    g.add_argument("--out", help="output file (default: stdout)")
    g.add_argument("--no-timestamp", action="store_true", help="omit the timestamp from JSON output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="didc", description="Difference-in-discontinuities estimation toolkit.",
                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="DiDC point estimate and robust confidence interval")
    _add_data_args(est)
    _add_estimator_args(est)
    est.add_argument("--bw-report", help="write bandwidth diagnostics as JSON to this path")
    est.add_argument("--emit-plot-data", help="write binned means and fitted lines as CSV to this path")
    est.add_argument("--bins", type=int, default=20, help="bins per side for --emit-plot-data")
    _add_output_args(est)

    test = sub.add_parser("test", help="validity tests on pre-treatment periods")
    tsub = test.add_subparsers(dest="test", required=True, parser_class=_Parser)
    wald = tsub.add_parser("wald", help="equal cutoff jumps across pre-periods")
    _add_data_args(wald)
    wald.add_argument("--pre", required=True, type=_labels, help="comma-separated pre-periods")
    wald.add_argument("--rule", choices=RULES, default="pooled")
    wald.add_argument("--h", type=float, help="fixed bandwidth")
    wald.add_argument("--kernel", choices=KERNEL_FAMILIES, default="triangular")
    wald.add_argument("--cov", choices=("hc1", "cluster"), default="hc1")
    _add_output_args(wald)
    ks = tsub.add_parser("ks", help="equal conditional means in two pre-periods")
    _add_data_args(ks)
    ks.add_argument("--periods", required=True, type=_labels, help="two comma-separated pre-periods")
    ks.add_argument("--side", choices=("above", "below", "both"), default="both")
    ks.add_argument("--K", type=int, help="series dimension")
    ks.add_argument("--B", type=int, default=999)
    ks.add_argument("--seed", type=int, default=0)
    _add_output_args(ks)

    bnd = sub.add_parser("bounds", help="partial-identification bounds over a sensitivity grid")
    _add_data_args(bnd)
    _add_estimator_args(bnd)
    bnd.add_argument("--assumptions", choices=bd.ASSUMPTIONS, required=True)
    bnd.add_argument("--target", choices=bd.TARGETS, default="tau_c")
    bnd.add_argument("--c1", type=parse_range, default=np.array([0.0]), help="start:stop:step or value")
    bnd.add_argument("--c2", type=parse_range, default=np.array([0.0]), help="start:stop:step or value")
    bnd.add_argument("--ymin", type=float)
    bnd.add_argument("--ymax", type=float)
    bnd.add_argument("--bootstrap", type=int, metavar="B", help="bootstrap replications per cell")
    bnd.add_argument("--seed", type=int, default=0)
    _add_output_args(bnd)

    sim = sub.add_parser("simulate", help="Monte Carlo study of the simulation designs")
    sim.add_argument("--model", required=True, help="1-4 or M1-M4")
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--tau", type=float, default=0.0)
    sim.add_argument("--confounder", type=float)
    sim.add_argument("--sigma-t0", type=float, default=0.1295)
    sim.add_argument("--sigma-t1", type=float, default=0.1295)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--estimators", type=_labels, default=list(ESTIMATORS))
    sim.add_argument("--threads", type=int, help="worker processes (default: $DIDC_THREADS or 1)")
    _add_output_args(sim)
    return parser


# ---------------------------------------------------------------- output


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _flatten(obj, prefix="") -> list[tuple[str, object]]:
    if isinstance(obj, dict):
        out = []
        for k, v in obj.items():
            out += _flatten(v, f"{prefix}.{k}" if prefix else str(k))
        return out
    if isinstance(obj, list) and obj and all(not isinstance(v, (dict, list)) for v in obj):
        return [(f"{prefix}[{i}]", v) for i, v in enumerate(obj)]
    if isinstance(obj, list):
        out = []
        for i, v in enumerate(obj):
            out += _flatten(v, f"{prefix}[{i}]")
        return out
    return [(prefix, obj)]


def _fmt(v) -> str:
    return "" if v is None else str(v)


def _render(payload: dict, fmt: str, rows: list[dict] | None, timestamp: bool) -> str:
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION}
        if timestamp:
            doc["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        doc.update(payload)
        return json.dumps(_clean(doc), indent=2) + "\n"
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.writer(buf, lineterminator="\n")
        if rows is not None:
            cols = list(rows[0])
            w.writerow(cols)
            for r in rows:
                w.writerow([_fmt(_clean(r[c])) for c in cols])
        else:
            w.writerow(["key", "value"])
            for k, v in _flatten(_clean(payload)):
                w.writerow([k, _fmt(v)])
        return buf.getvalue()
    items = _flatten(_clean(payload))
    width = max(len(k) for k, _ in items)
    return "".join(f"{k.ljust(width)}  {_fmt(v)}\n" for k, v in items)


def _emit(args, payload: dict, rows: list[dict] | None = None, csv_text: str | None = None) -> None:
    fmt = args.format
    if fmt is None:
        suffix = Path(args.out).suffix.lower() if args.out else ""
        fmt = {".csv": "csv", ".json": "json", ".txt": "table"}.get(suffix, "json")
    text = csv_text if (fmt == "csv" and csv_text is not None) else _render(payload, fmt, rows, not args.no_timestamp)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands


def _load(args) -> PanelDataset:
    schema = {"unit": args.unit_col, "period": args.period_col, "y": args.y_col, "z": args.z_col}
    return load_panel(args.input, schema, z0=args.cutoff, period_order=args.period_order)


def _config(args) -> DidcConfig:
    return DidcConfig(p=args.p, q=args.q, kernel=KernelSpec(args.kernel), alpha=args.alpha, h=args.h, b=args.b)


def _periods(panel: PanelDataset, args) -> tuple[str, str]:
    t1 = panel.post_period if args.t1 is None else args.t1
    i = panel.position(t1)
    if args.t0 is None:
        if i == 0:
            raise PanelError(f"no period precedes t1={t1!r}")
        t0 = panel.period_order[i - 1]
    else:
        t0 = args.t0
    if t0 == t1:
        raise PanelError("t0 and t1 must differ")
    return str(t1), str(t0)


def plot_data(panel: PanelDataset, t1, t0, est, bins: int = 20) -> list[dict]:
    """Binned means of the differenced outcome and the fitted local lines on each side."""
    cs = first_difference(panel, t1, t0)
    rows = []
    for side in ("below", "above"):
        m = cs.side_mask(side)
        z, y = cs.z[m], cs.y[m]
        edges = np.linspace(z.min(), z.max(), bins + 1)
        which = np.clip(np.digitize(z, edges[1:-1]), 0, bins - 1)
        for j in range(bins):
            sel = which == j
            if sel.any():
                rows.append({"kind": "bin", "side": side, "z": float(z[sel].mean()) + panel.z0,
                             "y": float(y[sel].mean()), "count": int(sel.sum())})
        fit = fit_one_sided(cs, side, est.p, est.h, KernelSpec(est.kernel))
        lo, hi = (-est.h, 0.0) if side == "below" else (0.0, est.h)
        for g in np.linspace(lo, hi, 21):
            yhat = float(np.polyval(fit.delta_hat[::-1], g))
            rows.append({"kind": "fit", "side": side, "z": float(g) + panel.z0, "y": yhat, "count": None})
    return rows


def _cmd_estimate(args) -> None:
    panel = _load(args)
    t1, t0 = _periods(panel, args)
    est = estimate_didc(panel, t1, t0, _config(args))
    result = est.to_dict()
    diag = result.pop("bandwidth_diagnostics", None)
    payload = {"command": "estimate", "input": args.input, "cutoff": args.cutoff, "t1": t1, "t0": t0,
               "result": result}
    if args.bw_report:
        report = {"schema_version": SCHEMA_VERSION, "h": est.h, "b": est.b,
                  "selected": diag is not None, "diagnostics": diag or {}}
        Path(args.bw_report).write_text(json.dumps(_clean(report), indent=2) + "\n", encoding="utf-8")
    if args.emit_plot_data:
        rows = plot_data(panel, t1, t0, est, args.bins)
        with Path(args.emit_plot_data).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    _emit(args, payload)


def _cmd_wald(args) -> None:
    panel = _load(args)
    res = wald_time_invariance(panel, args.pre, rule=args.rule, k=KernelSpec(args.kernel), h=args.h, cov=args.cov)
    _emit(args, {"command": "test wald", "input": args.input, "cutoff": args.cutoff, "result": res.to_dict()})


def _cmd_ks(args) -> None:
    if len(args.periods) != 2:
        raise UsageError("--periods takes exactly two labels")
    panel = _load(args)
    res = ks_time_invariance(panel, args.periods[0], args.periods[1], side=args.side, K=args.K, B=args.B,
                             rng_seed=args.seed)
    _emit(args, {"command": "test ks", "input": args.input, "cutoff": args.cutoff, "seed": args.seed,
                 "periods": args.periods, "result": res.to_dict()})


def _cmd_bounds(args) -> None:
    panel = _load(args)
    t1, t0 = _periods(panel, args)
    cfg = _config(args)
    bd.bound_arguments(bd.SensitivityInputs(0, 0, 0, 0, 0, 0), args.assumptions, args.target)
    if args.bootstrap is None:
        s = bd.sensitivity_inputs(panel, cfg, t1, t0, args.ymin, args.ymax)
        failures = 0
    else:
        s, draws, failures = bd.bootstrap_inputs(panel, cfg, args.bootstrap, args.seed, t1, t0, args.ymin, args.ymax)
    grid = bd.grid_from_inputs(s, args.assumptions, args.c1, args.c2, args.target)
    rows = grid.rows()
    if args.bootstrap is not None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            for r in rows:
                cell = bd.bootstrap_cell(s, draws, args.assumptions, r["c1"], r["c2"], args.target, args.alpha,
                                         failures=failures, rng_seed=args.seed)
                r.update(lb_lo=cell.lb_ci[0], lb_hi=cell.lb_ci[1], ub_lo=cell.ub_ci[0], ub_hi=cell.ub_ci[1],
                         lb_kink=cell.lb_kink, ub_kink=cell.ub_kink)
        if caught:
            kinks = sum(r["lb_kink"] + r["ub_kink"] for r in rows)
            print(f"warning: {kinks} bound(s) near a kink; percentile intervals there may be unreliable",
                  file=sys.stderr)
    payload = {
        "command": "bounds",
        "input": args.input,
        "cutoff": args.cutoff,
        "t1": t1,
        "t0": t0,
        "assumptions": args.assumptions,
        "target": args.target,
        "inputs": {k: getattr(s, k) for k in ("delta_plus", "delta_minus", "y1_plus", "y1_minus", "y_min", "y_max")},
        "bootstrap": args.bootstrap,
        "seed": args.seed,
        "failures": failures,
        "cells": rows,
    }
    _emit(args, payload, rows=rows)


def _cmd_simulate(args) -> None:
    spec = DgpSpec(args.model, args.n, args.tau, args.confounder, args.sigma_t0, args.sigma_t1, args.seed)
    report = run_monte_carlo(spec, args.estimators, args.reps, args.threads, args.seed)
    payload = {"command": "simulate", "seed": args.seed, **report.to_dict()}
    _emit(args, payload, csv_text=report.to_csv())


COMMANDS = {
    "estimate": _cmd_estimate,
    "wald": _cmd_wald,
    "ks": _cmd_ks,
    "bounds": _cmd_bounds,
    "simulate": _cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        name = args.test if args.command == "test" else args.command
        COMMANDS[name](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"didc: error: {exc}", file=sys.stderr)
        return 1
    except (PanelError, ValueError, KeyError) as exc:
        print(f"didc: invalid input: {exc}", file=sys.stderr)
        return 1
    except (EstimationError, np.linalg.LinAlgError) as exc:
        print(f"didc: estimation failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

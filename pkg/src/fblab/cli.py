"""Command-line front end.

Exit codes: 0 ran (audit failures live in the reports), 2 input error,
3 missing artifact, 4 internal failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from fblab import __version__
from fblab.classify import classify_point, decay_audit, flatness
from fblab.errors import FblabError, ParameterError
from fblab.field import ScalarField, export_pgm, load_field
from fblab.geometry import audit_points
from fblab.monotone import audit_monotone, radius_ladder, weiss
from fblab.pipeline import (AUDITS, REPORT_SCHEMA, ROW_COLUMNS, MissingArtifact, load_config,
                            load_run, point_error_row, run_audit, run_solve)
from fblab.problem import AlmostMinParams, WeightField
from fblab.report import dumps, write_csv, write_json

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_INTERNAL = 0, 2, 3, 4


def _emit(doc: dict, out) -> None:
    """Write a report to stdout, to ``out`` as JSON, or as CSV when ``out`` ends in ``.csv``."""
    if out and str(out).endswith(".csv"):
        rows = doc["rows"]
        extra = sorted({k for r in rows for k in r} - set(ROW_COLUMNS))
        write_csv(rows, out, list(ROW_COLUMNS) + extra)
    elif out:
        write_json(doc, out)
    else:
        sys.stdout.write(dumps(doc))


def _report(name: str, rows: list) -> dict:
    return {"schema": REPORT_SCHEMA, "audit": name, "rows": rows,
            "passed": all(r["pass"] for r in rows)}


def _point(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected x0,y0, got {text!r}")
    return vals


def _triple(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected eta,theta,r0, got {text!r}")
    return vals


def _field_stem(path) -> Path:
    stem = Path(path)
    if stem.suffix in (".json", ".raw"):
        stem = stem.with_suffix("")
    if not stem.with_name(stem.name + ".json").exists():
        raise MissingArtifact(f"no field at {stem}")
    return stem


def _source(args):
    """``(u, weights, almost-min params, boundary or None)`` from ``--run`` or ``--field``."""
    if args.run:
        run = load_run(args.run)
        u, w, amp, fb = run.u, run.weights, run.spec.almost_min_params(), run.fb
    else:
        u = load_field(_field_stem(args.field))
        w, amp, fb = None, AlmostMinParams(), None
    if args.weights is not None:
        try:
            w = WeightField.constant(u.grid, float(args.weights))
        except ValueError:
            q = load_field(_field_stem(args.weights))
            if q.grid != u.grid:
                raise ParameterError("weight field and u must share a grid")
            w = WeightField(q, ScalarField(q.grid, np.zeros(q.grid.dims)), c0=float(q.values.min()),
                            alpha=1.0, holder_seminorm=0.0)
    elif w is None:
        w = WeightField.constant(u.grid, 1.0)
    return u, w, amp, fb


def _center(args) -> tuple:
    x = args.point if args.point is not None else args.x
    if x is None:
        raise ParameterError("give the centre with --x X1 X2 or --point x0,y0")
    return tuple(x)


def cmd_solve(args) -> int:
    man = run_solve(args.spec, args.out, load_config(args.config))
    sys.stdout.write(dumps({"schema": man["schema"], "run": str(args.out),
                            "artifacts": [a["path"] for a in man["artifacts"]]}))
    return EXIT_OK


def _audit(which: str):
    def run(args) -> int:
        man = run_audit(args.run, which, args.out, load_config(args.config))
        sys.stdout.write(dumps({"schema": man["schema"], "audit": which,
                                "artifacts": [a["path"] for a in man["artifacts"]]}))
        return EXIT_OK
    return run


def cmd_audit(args) -> int:
    return _audit(args.which)(args)


def _weiss_ladder(u, w, amp, x, r_max: float) -> list:
    aud = audit_monotone(u, w, amp, x, radius_ladder(r_max, 6 * u.grid.spacing))
    rows = []
    for row in aud.rows():
        ok = row.pop("pass_step", True) and row.pop("pass_dissipation", True)
        row.pop("x0")
        r = row.pop("r")
        rows.append({"kind": "weiss", "x": list(x), "r": r, "value": row["W"], "pass": bool(ok),
                     "reason": "", **row})
    return rows


def cmd_weiss(args) -> int:
    u, w, amp, _ = _source(args)
    x = _center(args)
    if (args.r is None) == (args.rmax is None):
        raise ParameterError("give exactly one of --r and --rmax")
    if args.rmax is not None:
        try:
            rows = _weiss_ladder(u, w, amp, x, args.rmax)
        except FblabError as exc:
            rows = [point_error_row("weiss", x, args.rmax, exc)]
        _emit(_report("weiss", rows), args.out)
        return EXIT_OK
    rows = []
    for r in args.r:
        try:
            s = weiss(u, w, x, r)
            rows.append({"kind": "weiss", "x": list(x), "r": r, "value": s.W, "pass": True,
                         "reason": "", **{k: v for k, v in s.to_dict().items() if k not in ("x0", "r")}})
        except FblabError as exc:
            rows.append(point_error_row("weiss", x, r, exc))
    _emit(_report("weiss", rows), args.out)
    return EXIT_OK


def cmd_flatness(args) -> int:
    u, w, _, fb = _source(args)
    x = _center(args)
    if (args.r is None) == (args.ladder is None):
        raise ParameterError("give exactly one of --r and --ladder")
    rows = []
    if args.ladder is not None:
        eta, theta, r0 = args.ladder
        try:
            rep = decay_audit(u, w, x, theta=theta, eta=eta, r0=r0, n_dir=args.n_dir)
        except FblabError as exc:
            rows.append(point_error_row("decay", x, r0, exc))
        else:
            for row in rep.rows:
                reason = "below 4h" if row.truncated else ("" if row.above_floor or row.step_pass is None
                                                            else "sigma at resolution floor")
                rows.append({"kind": "decay", "x": list(x), "r": row.r, "value": row.sigma,
                             "pass": row.step_pass is not False, "reason": reason,
                             "direction": list(row.direction), "floor": row.floor,
                             "drift": row.drift, "truncated": row.truncated})
        _emit(_report("flatness", rows), args.out)
        return EXIT_OK
    for r in args.r:
        try:
            f = flatness(u, w, x, r, n_dir=args.n_dir, fb=fb)
            rows.append({"kind": "flatness", "x": list(x), "r": r, "value": f.sigma,
                         "pass": True, "reason": "", "direction": list(f.direction),
                         "hausdorff_sigma": f.hausdorff_sigma})
        except FblabError as exc:
            rows.append(point_error_row("flatness", x, r, exc))
    _emit(_report("flatness", rows), args.out)
    return EXIT_OK


def cmd_classify(args) -> int:
    run = load_run(args.run)
    pts = [args.x] if args.x else [tuple(p) for p in audit_points(run.fb, args.points)[0]]
    rows = []
    for p in pts:
        try:
            c = classify_point(run.u, run.weights, p, eps_gap=args.eps_gap)
            rows.append({"kind": "classification", "x": [float(v) for v in p], "r": None,
                         "value": c.gap_ratio, "pass": c.label == "regular", "reason": "",
                         "label": c.label, "W0": c.W0, "residual": c.residual})
        except FblabError as exc:
            rows.append(point_error_row("classification", p, None, exc))
    _emit(_report("classify", rows), args.out)
    return EXIT_OK


def cmd_export_pgm(args) -> int:
    src = Path(args.run)
    stem = src / "u" if src.is_dir() else src
    if not stem.with_name(stem.name + ".json").exists() and not stem.with_suffix(".json").exists():
        raise MissingArtifact(f"no field at {stem}")
    export_pgm(load_field(stem), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fblab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fblab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="minimize the functional for a problem spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("audit", help="run audits on a solved run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--which", choices=AUDITS + ("all",), default="all")
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_audit)

    for name, which, hlp in (("nta-report", "nta", "corkscrews, Harnack chains, harmonic measure"),
                             ("ahlfors-report", "ahlfors", "boundary length ratios"),
                             ("verify-amin", "amin", "almost-minimality and replacement checks")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--run", required=True)
        s.add_argument("--out")
        s.add_argument("--config")
        s.set_defaults(func=_audit(which))

    def source(sp):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--run", help="solved run directory")
        src.add_argument("--field", help="field stem (<stem>.json and <stem>.raw)")
        sp.add_argument("--weights", help="constant q_+ or a field stem for q_+ (default: run weights, else 1)")
        c = sp.add_mutually_exclusive_group(required=True)
        c.add_argument("--x", type=float, nargs=2, metavar=("X1", "X2"))
        c.add_argument("--point", type=_point, metavar="X0,Y0")

    s = sub.add_parser("weiss", help="Weiss energies at one centre")
    source(s)
    s.add_argument("--r", type=float, nargs="+", help="radii to evaluate")
    s.add_argument("--rmax", type=float, help="ladder audit from RMAX down to 6h (ratio 0.8)")
    s.add_argument("--out", help="report path; .csv writes a CSV table")
    s.set_defaults(func=cmd_weiss)

    s = sub.add_parser("flatness", help="flatness at one centre, or its decay along a ladder")
    source(s)
    s.add_argument("--r", type=float, nargs="+", help="radii to evaluate")
    s.add_argument("--ladder", type=_triple, metavar="ETA,THETA,R0",
                   help="decay audit on r_k = R0 ETA^k with improvement factor THETA")
    s.add_argument("--n-dir", type=int, default=360)
    s.add_argument("--out", help="report path; .csv writes a CSV table")
    s.set_defaults(func=cmd_flatness)

    s = sub.add_parser("classify", help="density-gap classification")
    s.add_argument("--run", required=True)
    s.add_argument("--x", type=float, nargs=2, metavar=("X1", "X2"))
    s.add_argument("--points", type=int, default=16)
    s.add_argument("--eps-gap", type=float, default=0.15)
    s.add_argument("--out")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("export-pgm", help="write a field as an 8-bit PGM image")
    s.add_argument("--run", required=True, help="run directory or field stem")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_pgm)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"fblab: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FblabError, ValueError) as exc:
        print(f"fblab: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers everything else
        print(f"fblab: internal failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

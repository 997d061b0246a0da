"""Compiled versus pure-Python relaxation kernels.

Usage: python benchmarks/bench_kernels.py [--sizes 64 128 256] [--json out.json]

Each case relaxes the same problem with both backends and reports wall time,
sweep counts and the largest difference between the two solutions.
"""

from __future__ import annotations

import argparse
import json
import math
import time

import numpy as np

from fblab import kernels
from fblab.problem import half_plane_spec, spec_from_dict
from fblab.solver import SolveConfig, minimize


def laplace_case(n: int):
    x = np.linspace(-1.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = np.where((np.abs(X) == 1.0) | (np.abs(Y) == 1.0), Y, 0.0)
    mask = np.ones_like(u, dtype=bool)
    return u, mask, kernels.optimal_omega(2.0 / n, 2.0)


def shrink_case(n: int):
    u, mask, omega = laplace_case(n)
    u = np.maximum(u, 0.0)
    shift = np.full_like(u, 0.25 * (2.0 / n))
    return u, mask, shift, omega


def timed(fn, repeat: int = 1):
    best = math.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(sizes, solve_cells: int, tol: float) -> list:
    rows = []
    for n in sizes:
        for kind in ("sor", "shrink"):
            res = {}
            for name in kernels.BACKENDS:
                kernels.use_backend(name)
                if kind == "sor":
                    u, m, om = laplace_case(n)
                    t, (v, it, r) = timed(lambda: kernels.sor_solve(u.copy(), m, omega=om, tol=tol))
                else:
                    u, m, s, om = shrink_case(n)
                    t, (v, it, r) = timed(lambda: kernels.shrink_solve(u.copy(), m, s, np.zeros_like(s),
                                                                       omega=om, tol=tol))
                res[name] = (t, it, v)
            rows.append(_row(kind, n, res))
    if solve_cells:
        spec = spec_from_dict(half_plane_spec(solve_cells))
        res = {}
        for name in kernels.BACKENDS:
            kernels.use_backend(name)
            t, out = timed(lambda: minimize(spec, SolveConfig()))
            res[name] = (t, out.iterations, out.u.values)
        rows.append(_row("minimize", solve_cells, res))
    kernels.use_backend(kernels.BACKENDS[0])
    return rows


def _row(kind, n, res) -> dict:
    row = {"case": kind, "cells": n}
    for name, (t, it, _) in res.items():
        row[f"{name}_seconds"] = t
        row[f"{name}_sweeps"] = it
    if len(res) == 2:
        a, b = (res[k][2] for k in kernels.BACKENDS)
        row["speedup"] = res["python"][0] / res["compiled"][0]
        row["max_abs_diff"] = float(np.max(np.abs(a - b)))
    return row


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    p.add_argument("--solve-cells", type=int, default=128, help="0 skips the full solve")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--json")
    args = p.parse_args(argv)
    rows = run(args.sizes, args.solve_cells, args.tol)
    print(f"backends: {', '.join(kernels.BACKENDS)}")
    print(f"{'case':<9}{'cells':>6}{'compiled s':>12}{'python s':>11}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        print(f"{r['case']:<9}{r['cells']:>6}{r.get('compiled_seconds', math.nan):>12.4f}"
              f"{r['python_seconds']:>11.4f}{r.get('speedup', math.nan):>9.1f}"
              f"{r.get('max_abs_diff', math.nan):>11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Run directories, audit orchestration and report writing.

A solve writes ``spec.json``, ``u.json``/``u.raw``, ``trace.csv``,
``boundary.csv``, ``result.json`` and ``manifest.json`` into a run directory.
Audits read the run directory and write ``<audit>.json``/``<audit>.csv``
pairs plus their own manifest. Every JSON document carries a ``schema`` field;
report rows share the fields ``x, r, kind, value, pass``.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from fblab import __version__
from fblab.classify import (blowup_fit, classify_point, decay_audit, normal_derivatives,
                            weak_identity_check)
from fblab.errors import FblabError, ParameterError
from fblab.field import Ball, ScalarField, load_field, save_field
from fblab.geometry import (FreeBoundary, ahlfors_ratio, audit_points, corkscrew, extract_boundary,
                            harnack_chain, harmonic_measure_profile,
                            replacement_comparability, verify_almost_min)
from fblab.monotone import acf, audit_monotone, radius_ladder
from fblab.problem import ProblemSpec, SpecError, spec_from_dict
from fblab.report import dumps, sha256, write_csv, write_json
from fblab.solver import SolveConfig, harmonic_replace, minimize

RUN_SCHEMA = "fblab.run/1"
REPORT_SCHEMA = "fblab.report/1"
MANIFEST_SCHEMA = "fblab.manifest/1"
CONFIG_SCHEMA = "fblab.config/1"
AUDITS = ("weiss", "acf", "nta", "ahlfors", "amin", "classify", "decay")
ROW_COLUMNS = ("kind", "x", "r", "value", "pass", "reason")


class MissingArtifact(FblabError, FileNotFoundError):
    """A run directory lacks a file the requested command needs."""


@dataclass(frozen=True)
class AuditConfig:
    """Audit settings and pass thresholds.

    n_points: boundary audit points, equispaced by arc length.
    r_max: largest audit radius. Corkscrew, Ahlfors and ACF radii halve from it down to ``8h``.
    weiss_gamma: ratio of the Weiss ladder, which stops at ``6h``.
    hm_points, hm_radii, pole: harmonic-measure targets and pole (default: the
        positive node farthest from the boundary and the grid edge).
    amin_balls, amin_r: random balls for the almost-minimality check.
    replacement_r: radius of the harmonic replacement used by the comparability,
        normal-derivative and weak-identity checks.
    weak_trials: test bumps per replacement.
    theta, eta, decay_r0: flatness decay parameters.
    c1_max, c2_max, c3_max, c6, hm_band, acf_slack, replacement_tol, nd_tol,
    nd_replacement_tol, weak_tol: pass thresholds written into the reports.
    """
    n_points: int = 16
    r_max: float = 0.25
    weiss_gamma: float = 0.8
    hm_points: int = 8
    hm_radii: tuple = (0.05, 0.075, 0.1, 0.15, 0.2)
    pole: Optional[tuple] = None
    amin_balls: int = 50
    amin_r: tuple = (0.05, 0.2)
    replacement_r: float = 0.2
    weak_trials: int = 20
    theta: float = 0.75
    eta: float = 0.5
    decay_r0: float = 0.25
    c1_max: float = 8.0
    c2_max: float = 8.0
    c3_max: float = 40.0
    c6: float = 2.0
    hm_band: float = 20.0
    acf_slack: float = 1e-3
    replacement_tol: float = 0.1
    nd_tol: float = 0.05
    nd_replacement_tol: float = 0.1
    weak_tol: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "AuditConfig":
        names = {f.name for f in fields(cls)}
        for k in d:
            if k not in names:
                raise SpecError(f"audit.{k}", "unknown audit setting")
        vals = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**vals)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Config:
    seed: int = 0
    solve: SolveConfig = field(default_factory=SolveConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        if not isinstance(d, dict):
            raise SpecError("<config>", "expected a JSON object")
        for k in d:
            if k not in ("schema", "seed", "solve", "audit"):
                raise SpecError(k, "unknown config key")
        if d.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise SpecError("schema", f"unsupported config schema {d['schema']!r}")
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise SpecError("seed", "expected an integer")
        try:
            solve = SolveConfig.from_dict(d.get("solve", {}))
        except (ParameterError, TypeError) as exc:
            raise SpecError("solve", str(exc)) from exc
        try:
            audit = AuditConfig.from_dict(d.get("audit", {}))
        except TypeError as exc:
            raise SpecError("audit", str(exc)) from exc
        return cls(seed, solve, audit)

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, "seed": self.seed, "solve": self.solve.to_dict(),
                "audit": self.audit.to_dict()}


def load_config(path: Optional[Path | str]) -> Config:
    if path is None:
        return Config()
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError("<json>", f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return Config.from_dict(d)


def read_spec(path: Path | str) -> tuple:
    """Parse a spec file; returns ``(spec, source dict)``."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"spec file {path} not found")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError("<json>", f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return spec_from_dict(d, base=path.parent), d


# --- manifest ------------------------------------------------------------------------

def _digest(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


def write_manifest(out: Path, artifacts: list, spec_hash: str, config: Config, timing: dict,
                   kind: str, **extra) -> dict:
    """Manifest of ``artifacts`` (paths relative to ``out``); written last.

    Wall-clock timings and the spec location live here only, so the other
    artifacts are byte-identical across repeated runs.
    """
    man = {
        "schema": MANIFEST_SCHEMA,
        "kind": kind,
        "tool_version": __version__,
        "spec_sha256": spec_hash,
        "config_sha256": _digest(config.to_dict()),
        "seed": config.seed,
        "artifacts": [{"path": name, "sha256": sha256(out / name)} for name in sorted(artifacts)],
        "timing": {k: round(v, 3) for k, v in timing.items()},
        **extra,
    }
    write_json(man, out / "manifest.json")
    return man


# --- solve ---------------------------------------------------------------------------

def run_solve(spec_path: Path | str, out_dir: Path | str, config: Optional[Config] = None) -> dict:
    config = config or Config()
    spec, src = read_spec(spec_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = {}
    t0 = time.perf_counter()
    res = minimize(spec, config.solve)
    timing["solve"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fb = extract_boundary(res.u)
    timing["extract"] = time.perf_counter() - t0

    write_json(src, out / "spec.json")
    save_field(res.u, out / "u")
    write_csv(({"iteration": k, "energy": e} for k, e in enumerate(res.energy_trace)),
              out / "trace.csv", ("iteration", "energy"))
    write_csv(fb.rows(), out / "boundary.csv", ("polyline", "x", "y", "nx", "ny"))
    result = {
        "schema": RUN_SCHEMA,
        "sharp_energy": res.sharp_energy,
        "converged": res.converged,
        "iterations": res.iterations,
        "stage_iterations": list(res.stage_iterations),
        "boundary_length": fb.length(),
        "polylines": len(fb.polylines),
        "spec_sha256": spec.digest(),
        "solve_config": config.solve.to_dict(),
    }
    write_json(result, out / "result.json")
    arts = ["spec.json", "u.json", "u.raw", "trace.csv", "boundary.csv", "result.json"]
    return write_manifest(out, arts, spec.digest(), config, timing, "solve",
                          spec_base=str(Path(spec_path).resolve().parent))


@dataclass
class Run:
    """A loaded run directory."""
    path: Path
    spec: ProblemSpec
    u: ScalarField
    result: dict
    _fb: Optional[FreeBoundary] = None

    @property
    def weights(self):
        return self.spec.effective_weights

    @property
    def fb(self) -> FreeBoundary:
        if self._fb is None:
            self._fb = extract_boundary(self.u)
        return self._fb


def load_run(run_dir: Path | str) -> Run:
    path = Path(run_dir)
    for name in ("manifest.json", "spec.json", "u.json", "u.raw", "result.json"):
        if not (path / name).exists():
            raise MissingArtifact(f"{path / name} is missing")
    result = json.loads((path / "result.json").read_text())
    manifest = json.loads((path / "manifest.json").read_text())
    src = json.loads((path / "spec.json").read_text())
    spec = spec_from_dict(src, base=manifest.get("spec_base", path))
    return Run(path, spec, load_field(path / "u"), result)


# --- audits --------------------------------------------------------------------------

def _row(kind, x, r, value, ok, reason="", **extra) -> dict:
    row = {"kind": kind, "x": [float(c) for c in np.ravel(x)], "r": r, "value": value,
           "pass": bool(ok), "reason": reason}
    row.update(extra)
    return row


def _dyadic(r_max: float, r_min: float) -> list:
    out = []
    r = r_max
    while r >= r_min * (1 - 1e-12):
        out.append(r)
        r *= 0.5
    return out


def _points(run: Run, cfg: AuditConfig):
    return audit_points(run.fb, cfg.n_points)


def audit_weiss(run: Run, cfg: AuditConfig, seed: int) -> tuple:
    h = run.u.grid.spacing
    amp = run.spec.almost_min_params()
    rows, chat = [], []
    for p, _ in zip(*_points(run, cfg)):
        ladder = radius_ladder(cfg.r_max, 6 * h, cfg.weiss_gamma)
        try:
            a = audit_monotone(run.u, run.weights, amp, p, ladder)
        except FblabError as exc:
            rows.append(_row("weiss", p, None, None, False, str(exc)))
            continue
        chat.append(a.c_hat)
        for k, smp in enumerate(a.samples):
            ok = True if k >= len(a.defects) else (a.step_pass[k] and a.dissipation_pass[k])
            rows.append(_row("weiss", p, smp.r, smp.W, ok, W_tilde=smp.W_tilde,
                             defect=a.defects[k] if k < len(a.defects) else None,
                             dissipation=smp.dissipation, c_hat=a.c_hat))
    return rows, {"c_hat_max": max(chat) if chat else None}


def audit_acf(run: Run, cfg: AuditConfig, seed: int) -> tuple:
    h = run.u.grid.spacing
    rows = []
    for p, _ in zip(*_points(run, cfg)):
        try:
            smp = acf(run.u, p, _dyadic(cfg.r_max, 8 * h))
        except FblabError as exc:
            rows.append(_row("acf", p, None, None, False, str(exc)))
            continue
        prev = None
        for s in smp:
            ok = prev is None or s.F >= prev - cfg.acf_slack
            rows.append(_row("acf", p, s.R, s.F, ok, phi_f=s.phi_f, phi_g=s.phi_g))
            prev = s.F
    return rows, {}


def default_pole(run: Run) -> tuple:
    """Positive node farthest from the boundary and the grid edge.

    Ties (within half a cell) go to the node nearest the grid centre, then to
    the first in index order.
    """
    g = run.u.grid
    d = np.where(run.u.values > 0, run.fb.node_distance, 0.0)
    pts = g.points()
    edge = np.min(np.concatenate([pts - np.asarray(g.origin), np.asarray(g.upper) - pts], axis=-1), axis=-1)
    d = np.minimum(d, edge)
    best = d >= d.max() - 0.5 * g.spacing
    centre = 0.5 * (np.asarray(g.origin) + np.asarray(g.upper))
    dc = np.where(best, np.linalg.norm(pts - centre, axis=-1), np.inf)
    idx = np.unravel_index(int(np.argmin(dc)), d.shape)
    return tuple(float(c) for c in g.node(idx))


def audit_nta(run: Run, cfg: AuditConfig, seed: int) -> tuple:
    u, fb = run.u, run.fb
    h = u.grid.spacing
    pts, _ = _points(run, cfg)
    radii = _dyadic(cfg.r_max, 8 * h)
    rows = []
    interior = {}
    c1 = []
    for r in radii:
        for i, p in enumerate(pts):
            for side in ("interior", "exterior"):
                try:
                    c = corkscrew(u, fb, p, r, side)
                except FblabError as exc:
                    rows.append(_row(f"corkscrew_{side}", p, r, None, False, str(exc)))
                    continue
                val = c.constant if c.found else None
                ok = c.found and c.constant <= cfg.c1_max
                if c.found:
                    c1.append(c.constant)
                rows.append(_row(f"corkscrew_{side}", p, r, val, ok, c.reason,
                                 point=list(c.point) if c.point else None, clearance=c.clearance))
                if side == "interior" and c.found:
                    interior[(r, i)] = c.point
    c2, c3, failures = [], [], 0
    for r in radii:
        keys = sorted(i for (rr, i) in interior if rr == r)
        for a in range(len(keys)):
            for b in range(a + 1, len(keys)):
                x, y = interior[(r, keys[a])], interior[(r, keys[b])]
                ch = harnack_chain(u, fb, x, y)
                if not ch.ok:
                    failures += 1
                    rows.append(_row("harnack_chain", x, r, None, False, ch.reason, y=list(y)))
                    continue
                c2.append(ch.c2)
                c3.append(ch.c3)
                ok = ch.n <= cfg.c3_max * ch.ell + 1 and ch.c2 <= cfg.c2_max
                rows.append(_row("harnack_chain", x, r, ch.c3, ok, y=list(y), n=ch.n, ell=ch.ell,
                                 c2=ch.c2, retried=ch.retried))
    pole = tuple(cfg.pole) if cfg.pole is not None else default_pole(run)
    hm_ratios = []
    step = max(len(pts) // max(cfg.hm_points, 1), 1)
    for p in pts[::step][:cfg.hm_points]:
        try:
            prof = harmonic_measure_profile(u, p, pole, cfg.hm_radii)
        except FblabError as exc:
            rows.append(_row("harmonic_measure", p, None, None, False, str(exc)))
            continue
        for e in prof:
            hm_ratios.append(e["ratio"])
            rows.append(_row("harmonic_measure", p, e["r"], e["ratio"], e["ratio"] > 0,
                             omega=e["omega"], pole=list(pole)))
    pos = [v for v in hm_ratios if v > 0]
    band = max(pos) / min(pos) if pos else math.inf
    summary = {"c1_max": max(c1) if c1 else None, "c2_max": max(c2) if c2 else None,
               "c3_max": max(c3) if c3 else None, "chain_failures": failures,
               "hm_band": band, "hm_band_pass": bool(band <= cfg.hm_band), "pole": list(pole)}
    return rows, summary


def audit_ahlfors(run: Run, cfg: AuditConfig, seed: int) -> tuple:
    h = run.u.grid.spacing
    rows, vals = [], []
    for p, _ in zip(*_points(run, cfg)):
        for r in _dyadic(cfg.r_max, 8 * h):
            try:
                v = ahlfors_ratio(run.fb, p, r)
            except FblabError as exc:
                rows.append(_row("ahlfors", p, r, None, False, str(exc)))
                continue
            vals.append(v)
            rows.append(_row("ahlfors", p, r, v, 1 / cfg.c6 <= v <= cfg.c6))
    return rows, {"min": min(vals) if vals else None, "max": max(vals) if vals else None,
                  "c6_achieved": max(max(vals), 1 / min(vals)) if vals else None}


def _random_balls(run: Run, cfg: AuditConfig, seed: int) -> list:
    """Balls centred within ``r`` of random boundary vertices, kept inside the grid."""
    rng = np.random.default_rng(seed)
    g = run.u.grid
    verts = run.fb.vertices()
    out = []
    attempts = 0
    while len(out) < cfg.amin_balls and attempts < 100 * cfg.amin_balls and len(verts):
        attempts += 1
        r = float(rng.uniform(*cfg.amin_r))
        v = verts[rng.integers(len(verts))]
        ang = rng.uniform(0, 2 * math.pi)
        rad = r * math.sqrt(rng.uniform())
        c = (float(v[0] + rad * math.cos(ang)), float(v[1] + rad * math.sin(ang)))
        if g.contains_ball(Ball(c, r * 1.05)):
            out.append((c, r))
    return out


def audit_amin(run: Run, cfg: AuditConfig, seed: int) -> tuple:
    """Almost-minimality against the unperturbed weights with the derived ``kappa``."""
    amp = run.spec.almost_min_params()
    rows, passed = [], 0
    balls = _random_balls(run, cfg, seed)
    for c, r in balls:
        rep = verify_almost_min(run.u, run.spec.weights, amp, c, r)
        passed += rep.passed
        rows.append(_row("almost_min", c, r, rep.defect, rep.passed,
                         "degenerate" if rep.degenerate else "", bound=rep.bound,
                         j_u=rep.j_u, j_v=rep.j_v))
    comp = []
    alpha = amp.alpha
    for p, _ in zip(*_points(run, cfg)):
        try:
            d = replacement_comparability(run.u, run.weights, run.fb, p, cfg.replacement_r, alpha)
        except FblabError as exc:
            rows.append(_row("replacement", p, cfg.replacement_r, None, False, str(exc)))
            continue
        ok = d["n"] > 0 and d["value"] <= cfg.replacement_tol
        if d["n"] > 0:
            comp.append(d["value"])
        rows.append(_row("replacement", p, cfg.replacement_r, d["value"], ok,
                         "" if d["n"] else "no node above the distance threshold",
                         threshold=d["threshold"], n=d["n"]))
    return rows, {"kappa": amp.kappa, "alpha": amp.alpha, "balls": len(balls),
                  "pass_fraction": passed / len(balls) if balls else None,
                  "replacement_max": max(comp) if comp else None}


def audit_classify(run: Run, cfg: AuditConfig, seed: int) -> tuple:
    u, w, fb = run.u, run.weights, run.fb
    pts, nrm = _points(run, cfg)
    rows = []
    labels = []
    for k, (p, nu) in enumerate(zip(pts, nrm)):
        q = w.at(p)[0]
        try:
            c = classify_point(u, w, p)
            labels.append(c.label)
            rows.append(_row("classification", p, None, c.gap_ratio, c.label == "regular",
                             label=c.label, W0=c.W0, residual=c.residual))
        except FblabError as exc:
            rows.append(_row("classification", p, None, None, False, str(exc)))
        try:
            b = blowup_fit(u, w, p, 0.1)
            rows.append(_row("blowup", p, 0.1, b.misfit, True, slope=b.slope, normal=list(b.normal)))
        except FblabError as exc:
            rows.append(_row("blowup", p, 0.1, None, False, str(exc)))
        try:
            dn = float(normal_derivatives(u, p, nu)[0])
            rows.append(_row("normal_derivative", p, None, dn / q - 1, abs(dn / q - 1) <= cfg.nd_tol,
                             slope=dn, q_plus=q))
        except FblabError as exc:
            rows.append(_row("normal_derivative", p, None, None, False, str(exc)))
        b = Ball(tuple(float(c) for c in p), cfg.replacement_r)
        try:
            hrep = harmonic_replace(u, w, b)
            fbh = extract_boundary(hrep)
        except FblabError as exc:
            rows.append(_row("replacement_normal_derivative", p, b.radius, None, False, str(exc)))
            continue
        verts, vn = fbh.vertices(), fbh.normals()
        inner = np.linalg.norm(verts - np.asarray(p), axis=-1) <= 0.5 * b.radius
        if np.any(inner):
            d = normal_derivatives(hrep, verts[inner], vn[inner])
            qv = np.array([w.at(v)[0] for v in verts[inner]])
            dev = np.abs(d / qv - 1)
            frac = float(np.mean(dev <= cfg.nd_replacement_tol))
            rows.append(_row("replacement_normal_derivative", p, b.radius, float(np.median(dev)),
                             frac >= 0.9, fraction_within=frac, vertices=int(inner.sum())))
        wk = weak_identity_check(hrep, fbh, b, cfg.weak_trials, seed + k)
        rows.append(_row("weak_identity", p, b.radius, wk.median, wk.median <= cfg.weak_tol,
                         trials=len(wk.trials)))
    return rows, {"regular": labels.count("regular"), "points": len(pts)}


def audit_decay(run: Run, cfg: AuditConfig, seed: int) -> tuple:
    u, w = run.u, run.weights
    rows = []
    alphas, cs, steps = [], [], []
    for p, _ in zip(*_points(run, cfg)):
        try:
            d = decay_audit(u, w, p, cfg.theta, cfg.eta, cfg.decay_r0)
        except FblabError as exc:
            rows.append(_row("flatness", p, None, None, False, str(exc)))
            continue
        alphas.append(d.alpha_fit)
        cs.append(d.drift_constant)
        for row in d.rows:
            if row.truncated:
                rows.append(_row("floor", p, row.r, None, True, "ladder below resolution",
                                 floor=row.floor))
                continue
            ok = True if row.step_pass is None else row.step_pass
            if row.above_floor:
                steps.append(row.step_pass)
            rows.append(_row("flatness", p, row.r, row.sigma, ok, floor=row.floor,
                             direction=list(row.direction), drift=row.drift,
                             above_floor=row.above_floor))
        rows.append(_row("decay_fit", p, None, d.alpha_fit, bool(d.alpha_fit > 0),
                         "" if math.isfinite(d.alpha_fit) else "fewer than two rows above the floor",
                         amplitude=d.amplitude_fit, drift_constant=d.drift_constant,
                         resolved_rows=d.resolved_rows))
    return rows, {"step_pairs": len(steps), "step_pass": sum(bool(s) for s in steps),
                  "alpha_min": min(alphas) if alphas else None,
                  "drift_constant_max": max(cs) if cs else None}


_AUDIT_FUNCS = {"weiss": audit_weiss, "acf": audit_acf, "nta": audit_nta, "ahlfors": audit_ahlfors,
                "amin": audit_amin, "classify": audit_classify, "decay": audit_decay}


def write_report(out: Path, name: str, rows: list, summary: dict) -> list:
    doc = {"schema": REPORT_SCHEMA, "audit": name, "rows": rows, "summary": summary,
           "passed": all(r["pass"] for r in rows)}
    write_json(doc, out / f"{name}.json")
    extra = sorted({k for r in rows for k in r} - set(ROW_COLUMNS))
    write_csv(rows, out / f"{name}.csv", list(ROW_COLUMNS) + extra)
    return [f"{name}.json", f"{name}.csv"]


def run_audit(run_dir: Path | str, which: str = "all", out_dir: Optional[Path | str] = None,
              config: Optional[Config] = None) -> dict:
    config = config or Config()
    if which != "all" and which not in AUDITS:
        raise ParameterError(f"unknown audit {which!r}; expected one of {', '.join(AUDITS)} or all")
    run = load_run(run_dir)
    out = Path(out_dir) if out_dir is not None else run.path / "audit"
    out.mkdir(parents=True, exist_ok=True)
    names = AUDITS if which == "all" else (which,)
    arts, timing = [], {}
    for name in names:
        t0 = time.perf_counter()
        rows, summary = _AUDIT_FUNCS[name](run, config.audit, config.seed)
        arts += write_report(out, name, rows, summary)
        timing[name] = time.perf_counter() - t0
    return write_manifest(out, arts, run.spec.digest(), config, timing, f"audit:{which}")


def point_error_row(kind: str, x, r, exc: Exception) -> dict:
    return _row(kind, x, r, None, False, str(exc))



"""Weights, boundary data and problem descriptions."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from fblab.errors import ParameterError
from fblab.field import Grid, ScalarField, load_field

SCHEMA = "fblab.problem/1"


class SpecError(ParameterError):
    """Invalid problem description; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class AlmostMinParams:
    kappa: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ParameterError("kappa must be nonnegative")
        if not 0 < self.alpha <= 1:
            raise ParameterError("alpha must lie in (0, 1]")

    def bound(self, r: float) -> float:
        return self.kappa * r**self.alpha


@dataclass(frozen=True)
class WeightField:
    """Coefficients ``q_plus``/``q_minus`` with their Hölder metadata.

    ``kappa`` is nonzero only for perturbed weights: it is the almost-minimality
    constant that exact minimizers for these weights enjoy with respect to the
    unperturbed ones.
    """

    q_plus: ScalarField
    q_minus: ScalarField
    c0: float
    alpha: float
    holder_seminorm: float
    kappa: float = 0.0

    def __post_init__(self):
        if self.q_plus.grid != self.q_minus.grid:
            raise ParameterError("q_plus and q_minus must share a grid")
        if not self.c0 > 0:
            raise ParameterError("c0 must be positive")
        if not 0 < self.alpha <= 1:
            raise ParameterError("alpha must lie in (0, 1]")
        if self.holder_seminorm < 0:
            raise ParameterError("Hölder seminorm must be nonnegative")
        qp, qm = self.q_plus.values, self.q_minus.values
        tol = 1e-12 * max(1.0, self.c0)
        if np.min(qp) < self.c0 - tol:
            raise ParameterError("q_plus drops below c0")
        if np.any(qm < -tol):
            raise ParameterError("q_minus must be nonnegative")
        if self.two_phase and not (np.min(qm) >= self.c0 - tol or np.all(qm <= qp + tol)):
            raise ParameterError("q_minus must be >= c0 everywhere or lie between 0 and q_plus")

    @classmethod
    def constant(cls, grid: Grid, q_plus: float, q_minus: float = 0.0) -> "WeightField":
        ones = np.ones(grid.dims)
        return cls(ScalarField(grid, q_plus * ones), ScalarField(grid, q_minus * ones),
                   c0=q_plus, alpha=1.0, holder_seminorm=0.0)

    @property
    def grid(self) -> Grid:
        return self.q_plus.grid

    @property
    def two_phase(self) -> bool:
        return bool(np.any(self.q_minus.values != 0))

    def at(self, p) -> tuple:
        """``(q_plus(p), q_minus(p))`` by interpolation."""
        from fblab.field import eval_bilinear
        return eval_bilinear(self.q_plus, p), eval_bilinear(self.q_minus, p)

    def validate_holder(self, n_pairs: int = 20_000, seed: int = 0, slack: float = 1.05) -> bool:
        est = max(holder_quotient(self.q_plus, self.alpha, n_pairs, seed),
                  holder_quotient(self.q_minus, self.alpha, n_pairs, seed + 1))
        return est <= slack * self.holder_seminorm + 1e-12


def holder_quotient(f: ScalarField, alpha: float, n_pairs: int = 100_000, seed: int = 0) -> float:
    """Largest ``|f(x) - f(y)| / |x - y|^alpha`` over random node pairs.

    Separations are drawn log-uniformly between one cell and the grid extent
    so that every scale is probed.
    """
    g = f.grid
    rng = np.random.default_rng(seed)
    dims = np.asarray(g.dims)
    a = rng.integers(0, dims, size=(n_pairs, g.rank))
    length = max(g.extent)
    sep = np.exp(rng.uniform(0.0, math.log(length / g.h), size=n_pairs))
    direction = rng.normal(size=(n_pairs, g.rank))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    b = np.clip(a + np.rint(direction * sep[:, None]).astype(int), 0, dims - 1)
    d = np.linalg.norm(a - b, axis=1) * g.h
    keep = d > 0
    va = f.values[tuple(a[keep].T)]
    vb = f.values[tuple(b[keep].T)]
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(va - vb) / d[keep] ** alpha))


def _weierstrass(seed: int, alpha: float, grid: Grid):
    """Normalized Weierstrass-type sum in [-1, 1] and its unit Hölder bound."""
    length = max(grid.extent)
    n_terms = max(1, math.ceil(math.log2(length / grid.h))) + 1
    rng = np.random.default_rng(seed)
    angles = rng.normal(size=(n_terms, grid.rank))
    angles /= np.linalg.norm(angles, axis=1, keepdims=True)
    phases = rng.uniform(0.0, 2 * math.pi, size=n_terms)
    weights = 2.0 ** (-alpha * np.arange(n_terms))
    pts = grid.points()
    s = np.zeros(grid.dims)
    for k in range(n_terms):
        s += weights[k] * np.cos(2.0**k * (pts @ angles[k]) + phases[k])
    s /= weights.sum()
    # |cos a - cos b| <= min(2, |a - b|); maximize the resulting quotient over scales
    d = np.geomspace(grid.h * 1e-3, 2 * length, 4000)
    terms = weights[:, None] * np.minimum(2.0, 2.0 ** np.arange(n_terms)[:, None] * d[None, :])
    unit = float(np.max(terms.sum(axis=0) / d**alpha)) / weights.sum()
    return s, unit * 1.01


def make_holder_field(seed: int, c0: float, amplitude: float, alpha: float,
                      grid: Grid) -> tuple:
    """Hölder-continuous field ``c0 + amplitude * S(x)`` with ``|S| <= 1``.

    Returns ``(field, seminorm)`` where ``seminorm`` is a certified upper bound
    for the ``alpha``-Hölder seminorm.
    """
    if amplitude < 0:
        raise ParameterError("amplitude must be nonnegative")
    if amplitude >= c0:
        raise ParameterError("amplitude must be smaller than c0")
    if not 0 < alpha <= 1:
        raise ParameterError("alpha must lie in (0, 1]")
    if amplitude == 0:
        return ScalarField(grid, np.full(grid.dims, float(c0))), 0.0
    s, unit = _weierstrass(seed, alpha, grid)
    return ScalarField(grid, c0 + amplitude * s), amplitude * unit


def holder_weights(grid: Grid, seed: int, c0: float, amplitude: float, alpha: float,
                   q_minus: float | None = None) -> WeightField:
    """One-phase (``q_minus=None``) or two-phase weights with a Hölder ``q_plus``."""
    qp, lam = make_holder_field(seed, c0, amplitude, alpha, grid)
    qm = ScalarField(grid, np.full(grid.dims, 0.0 if q_minus is None else float(q_minus)))
    return WeightField(qp, qm, c0=c0 - amplitude, alpha=alpha, holder_seminorm=lam)


def perturbed_weights(w: WeightField, seed: int, lambda_pert: float,
                      alpha: float) -> WeightField:
    """Weights with ``q~^2 = q^2 (1 + eps)``, ``eps`` mean zero and ``|eps| <= 1/2``.

    Exact minimizers for the result are almost-minimizers for ``w`` with
    ``kappa = 2**(alpha + 2) * lambda_pert``, stored on the returned weights.
    """
    if lambda_pert < 0:
        raise ParameterError("lambda_pert must be nonnegative")
    if lambda_pert == 0:
        return w
    s, unit = _weierstrass(seed, alpha, w.grid)
    s = s - s.mean()
    amp = min(lambda_pert / unit, 0.5 / float(np.max(np.abs(s))))
    eps = amp * s
    factor = np.sqrt(1.0 + eps)
    qp = w.q_plus.values * factor
    qm = w.q_minus.values * factor
    emin = float(eps.min())
    qmax = float(max(qp.max(), qm.max()))
    lam = w.holder_seminorm * math.sqrt(1.0 + float(eps.max())) + qmax * amp * unit / math.sqrt(2.0)
    return WeightField(
        ScalarField(w.grid, qp), ScalarField(w.grid, qm),
        c0=w.c0 * math.sqrt(1.0 + min(emin, 0.0)),
        alpha=min(alpha, w.alpha), holder_seminorm=lam,
        kappa=2.0 ** (alpha + 2) * lambda_pert,
    )


# --- boundary data -----------------------------------------------------------

@dataclass(frozen=True)
class BoundaryData:
    """Dirichlet data: ``half-plane``, ``two-plane`` or ``tabulated``.

    half-plane: ``lam * <x - c, nu>_+``.
    two-plane: ``lam_plus * <x, nu>_+ - lam_minus * <x, nu>_-`` (so slopes 1
    give ``<x, nu>``).
    tabulated: boundary samples of a stored field.
    """

    kind: str
    lam: float = 1.0
    lam_minus: float = 1.0
    nu: tuple = (0.0, 1.0)
    c: tuple = (0.0, 0.0)
    table: Optional[ScalarField] = None
    path: Optional[str] = None

    def evaluate(self, grid: Grid) -> np.ndarray:
        nu = np.asarray(self.nu, dtype=float)
        nu = nu / np.linalg.norm(nu)
        pts = grid.points()
        if self.kind == "half-plane":
            return self.lam * np.maximum(0.0, (pts - np.asarray(self.c)) @ nu)
        if self.kind == "two-plane":
            s = pts @ nu
            return self.lam * np.maximum(s, 0.0) + self.lam_minus * np.minimum(s, 0.0)
        if self.kind == "tabulated":
            if self.table is None or self.table.grid != grid:
                raise SpecError("dirichlet.path", "tabulated trace must live on the problem grid")
            return np.array(self.table.values)
        raise SpecError("dirichlet.kind", f"unknown boundary data kind {self.kind!r}")


@dataclass(frozen=True)
class Perturbation:
    seed: int
    lambda_pert: float
    alpha: float


@dataclass(frozen=True)
class ProblemSpec:
    grid: Grid
    weights: WeightField
    dirichlet: BoundaryData
    phase: str = "one-phase"
    perturbation: Optional[Perturbation] = None
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.phase not in ("one-phase", "two-phase"):
            raise SpecError("phase", f"must be 'one-phase' or 'two-phase', got {self.phase!r}")
        if self.weights.grid != self.grid:
            raise SpecError("weights", "weights must live on the problem grid")
        if self.phase == "one-phase":
            data = self.dirichlet.evaluate(self.grid)
            if np.any(boundary_mask(self.grid) & (data < 0)):
                raise SpecError("dirichlet", "one-phase boundary data must be nonnegative")

    @property
    def effective_weights(self) -> WeightField:
        """Weights actually minimized (perturbed when a perturbation is set)."""
        if self.perturbation is None:
            return self.weights
        p = self.perturbation
        return perturbed_weights(self.weights, p.seed, p.lambda_pert, p.alpha)

    def almost_min_params(self) -> AlmostMinParams:
        w = self.effective_weights
        return AlmostMinParams(kappa=w.kappa, alpha=w.alpha if w.kappa else 1.0)

    def boundary_values(self) -> np.ndarray:
        return self.dirichlet.evaluate(self.grid)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.source, sort_keys=True).encode()).hexdigest()


def boundary_mask(grid: Grid) -> np.ndarray:
    m = np.zeros(grid.dims, dtype=bool)
    for k in range(grid.rank):
        idx = [slice(None)] * grid.rank
        idx[k] = 0
        m[tuple(idx)] = True
        idx[k] = -1
        m[tuple(idx)] = True
    return m


# --- JSON ----------------------------------------------------------------------

def _need(d: dict, key: str, prefix: str):
    if not isinstance(d, dict):
        raise SpecError(prefix or "<root>", "expected an object")
    if key not in d:
        raise SpecError(f"{prefix}.{key}" if prefix else key, "missing required key")
    return d[key]


def _number(d: dict, key: str, prefix: str, default=None):
    name = f"{prefix}.{key}" if prefix else key
    if key not in d:
        if default is None:
            raise SpecError(name, "missing required key")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SpecError(name, f"expected a finite number, got {v!r}")
    return float(v)


def _grid_from_json(d: dict) -> Grid:
    try:
        if "cells" in d:
            lo = d.get("lo", -1.0)
            hi = d.get("hi", 1.0)
            if isinstance(lo, list):
                return Grid.box(lo, hi, (hi[0] - lo[0]) / int(d["cells"]))
            return Grid.square(float(lo), float(hi), int(d["cells"]), int(d.get("rank", 2)))
        return Grid(tuple(_need(d, "origin", "grid")), _number(d, "spacing", "grid"),
                    tuple(_need(d, "dims", "grid")))
    except SpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise SpecError("grid", str(exc)) from exc


def _weight_component(d, key: str, grid: Grid, base: Path):
    prefix = f"weights.{key}"
    if isinstance(d, (int, float)) and not isinstance(d, bool):
        return ScalarField(grid, np.full(grid.dims, float(d))), 0.0, 1.0, float(d)
    kind = _need(d, "kind", prefix)
    if kind == "constant":
        v = _number(d, "value", prefix)
        return ScalarField(grid, np.full(grid.dims, v)), 0.0, 1.0, v
    if kind == "holder":
        c0 = _number(d, "c0", prefix)
        amp = _number(d, "amplitude", prefix)
        alpha = _number(d, "alpha", prefix)
        seed = int(_number(d, "seed", prefix))
        try:
            f, lam = make_holder_field(seed, c0, amp, alpha, grid)
        except ParameterError as exc:
            raise SpecError(prefix, str(exc)) from exc
        return f, lam, alpha, c0 - amp
    if kind == "file":
        f = load_field(base / _need(d, "path", prefix))
        if f.grid != grid:
            raise SpecError(f"{prefix}.path", "weight field grid differs from problem grid")
        return (f, _number(d, "seminorm", prefix, 0.0), _number(d, "alpha", prefix, 1.0),
                float(f.values.min()))
    raise SpecError(f"{prefix}.kind", f"unknown weight kind {kind!r}")


def spec_from_dict(d: dict, base: Path | str = ".") -> ProblemSpec:
    base = Path(base)
    if not isinstance(d, dict):
        raise SpecError("<root>", "expected a JSON object")
    schema = d.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise SpecError("schema", f"unsupported schema {schema!r}")
    grid = _grid_from_json(_need(d, "grid", ""))
    phase = d.get("phase", "one-phase")
    wd = _need(d, "weights", "")
    qp, lam_p, a_p, c_p = _weight_component(_need(wd, "q_plus", "weights"), "q_plus", grid, base)
    qm, lam_m, a_m, c_m = _weight_component(wd.get("q_minus", 0.0), "q_minus", grid, base)
    try:
        weights = WeightField(qp, qm, c0=c_p, alpha=min(a_p, a_m),
                              holder_seminorm=max(lam_p, lam_m))
    except ParameterError as exc:
        raise SpecError("weights", str(exc)) from exc

    bd = _need(d, "dirichlet", "")
    kind = _need(bd, "kind", "dirichlet")
    if kind == "half-plane":
        data = BoundaryData("half-plane", lam=_number(bd, "lambda", "dirichlet", 1.0),
                            nu=tuple(bd.get("nu", (0.0, 1.0))), c=tuple(bd.get("c", (0.0,) * grid.rank)))
    elif kind == "two-plane":
        data = BoundaryData("two-plane", lam=_number(bd, "lambda_plus", "dirichlet", 1.0),
                            lam_minus=_number(bd, "lambda_minus", "dirichlet", 1.0),
                            nu=tuple(bd.get("nu", (0.0, 1.0))))
    elif kind == "tabulated":
        path = _need(bd, "path", "dirichlet")
        try:
            table = load_field(base / path)
        except (OSError, ValueError) as exc:
            raise SpecError("dirichlet.path", str(exc)) from exc
        data = BoundaryData("tabulated", table=table, path=path)
    else:
        raise SpecError("dirichlet.kind", f"unknown boundary data kind {kind!r}")
    if len(data.nu) != grid.rank:
        raise SpecError("dirichlet.nu", "direction must have one entry per axis")

    pert = None
    if d.get("perturbation") is not None:
        pd = d["perturbation"]
        pert = Perturbation(seed=int(_number(pd, "seed", "perturbation")),
                            lambda_pert=_number(pd, "lambda_pert", "perturbation"),
                            alpha=_number(pd, "alpha", "perturbation"))
        if pert.lambda_pert < 0:
            raise SpecError("perturbation.lambda_pert", "must be nonnegative")
        if not 0 < pert.alpha <= 1:
            raise SpecError("perturbation.alpha", "must lie in (0, 1]")
    return ProblemSpec(grid, weights, data, phase=phase, perturbation=pert, source=d)


def load_spec(path: Path | str) -> ProblemSpec:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError("<json>", f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return spec_from_dict(d, base=path.parent)


def half_plane_spec(cells: int = 512, lam: float = 1.0, lo: float = -1.0, hi: float = 1.0,
                    perturbation: dict | None = None, weights: dict | None = None) -> dict:
    """JSON description of the half-plane benchmark on ``[lo, hi]^2``."""
    d = {
        "schema": SCHEMA,
        "grid": {"lo": lo, "hi": hi, "cells": cells},
        "phase": "one-phase",
        "weights": weights or {"q_plus": {"kind": "constant", "value": lam}},
        "dirichlet": {"kind": "half-plane", "lambda": lam, "nu": [0.0, 1.0], "c": [0.0, 0.0]},
        "perturbation": perturbation,
    }
    return d


def two_plane_spec(cells: int = 512, lam_plus: float = 1.0, lam_minus: float = 1.0,
                   q_plus: float = 1.0, q_minus: float = 1.0) -> dict:
    return {
        "schema": SCHEMA,
        "grid": {"lo": -1.0, "hi": 1.0, "cells": cells},
        "phase": "two-phase",
        "weights": {"q_plus": {"kind": "constant", "value": q_plus},
                    "q_minus": {"kind": "constant", "value": q_minus}},
        "dirichlet": {"kind": "two-plane", "lambda_plus": lam_plus, "lambda_minus": lam_minus,
                      "nu": [0.0, 1.0]},
        "perturbation": None,
    }

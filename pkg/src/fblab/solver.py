"""Minimization of the discrete one-/two-phase functional and Laplace solves.

The functional on a grid with spacing ``h`` in rank ``n`` is

    E(u) = h^(n-2) * sum_edges (du)^2 + h^n * sum_nodes q_+^2 I_+(u) + q_-^2 I_-(u)

with ``I_+`` the sharp indicator of ``u > 0`` or its ramp ``clamp(u/eps, 0, 1)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import fft

from fblab import kernels
from fblab.errors import DomainError, ParameterError
from fblab.field import Ball, Grid, ScalarField, sample
from fblab.problem import ProblemSpec, WeightField, boundary_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveConfig:
    """Annealing ladder (ramp widths in cells) and stopping parameters.

    ``rel_tol`` stops a stage once one majorize-minimize pass lowers the
    smoothed energy by less than ``rel_tol * |E|``; ``max_iter`` caps the
    passes per stage. ``inner_tol`` is the relative update tolerance of the
    inner relaxation. ``finish`` applies :func:`sharp_finish` at the end.
    """

    eps_cells: tuple = (16.0, 8.0)
    rel_tol: float = 1e-10
    max_iter: int = 50_000
    project: Optional[bool] = None  # None: on for one-phase runs
    multilevel: bool = True
    inner_tol: float = 1e-6
    finish: bool = True

    def __post_init__(self):
        e = tuple(float(x) for x in self.eps_cells)
        object.__setattr__(self, "eps_cells", e)
        if not e or any(x < 1.0 for x in e) or any(a <= b for a, b in zip(e, e[1:])):
            raise ParameterError("eps ladder must be strictly decreasing and >= 1 cell")
        if self.max_iter < 1 or self.rel_tol < 0 or self.inner_tol <= 0:
            raise ParameterError("max_iter, rel_tol and inner_tol must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SolveConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown solver option(s): {', '.join(sorted(unknown))}")
        known = dict(d)
        if "eps_cells" in known:
            known["eps_cells"] = tuple(known["eps_cells"])
        return cls(**known)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class SolveResult:
    u: ScalarField
    energy_trace: tuple
    sharp_energy: float
    converged: bool
    iterations: int
    stage_iterations: tuple = field(default=())


# --- energy ----------------------------------------------------------------------

def _ramp(u, eps):
    return np.clip(u / eps, 0.0, 1.0)


def _edge_terms(values: np.ndarray):
    """Forward differences along each axis."""
    return [np.diff(values, axis=k) for k in range(values.ndim)]


def _region_masks(grid: Grid, region: Optional[Ball]):
    """Node mask and per-axis edge masks (edge midpoint inside the ball)."""
    if region is None:
        return None, None
    if not grid.contains_ball(region):
        raise DomainError("energy region leaves the grid")
    pts = grid.points()
    c = np.asarray(region.center)
    node = np.linalg.norm(pts - c, axis=-1) < region.radius
    edges = []
    for k in range(grid.rank):
        lo = [slice(None)] * grid.rank
        hi = [slice(None)] * grid.rank
        lo[k] = slice(None, -1)
        hi[k] = slice(1, None)
        mid = 0.5 * (pts[tuple(lo)] + pts[tuple(hi)])
        edges.append(np.linalg.norm(mid - c, axis=-1) < region.radius)
    return node, edges


def energy_parts(u: ScalarField, w: WeightField, region: Optional[Ball] = None,
                 sharp: bool = True, eps: float | None = None) -> tuple:
    """``(dirichlet, volume)`` contributions of :func:`energy`."""
    g = u.grid
    h = g.spacing
    n = g.rank
    node, edges = _region_masks(g, region)
    diffs = _edge_terms(u.values)
    if edges is None:
        dirichlet = sum(float(np.sum(d * d)) for d in diffs)
    else:
        dirichlet = sum(float(np.sum((d * d)[m])) for d, m in zip(diffs, edges))
    dirichlet *= h ** (n - 2)
    v = u.values
    if sharp:
        ip, im = (v > 0).astype(float), (v < 0).astype(float)
    else:
        if eps is None:
            raise ParameterError("smoothed energy needs eps")
        ip, im = _ramp(v, eps), _ramp(-v, eps)
    dens = w.q_plus.values ** 2 * ip + w.q_minus.values ** 2 * im
    vol = float(np.sum(dens if node is None else dens[node])) * h**n
    return dirichlet, vol


def energy(u: ScalarField, w: WeightField, region: Optional[Ball] = None,
           sharp: bool = True, eps: float | None = None) -> float:
    """Discrete functional on the whole grid (``region=None``) or on a ball.

    On a ball, edges count when their midpoint lies inside and nodes when
    they lie inside.
    """
    d, vol = energy_parts(u, w, region, sharp, eps)
    return d + vol


# --- minimization ---------------------------------------------------------------

class _DirichletLaplacian:
    """Inverse of the graph Laplacian on interior nodes via DST-I."""

    def __init__(self, shape):
        inner = tuple(s - 2 for s in shape)
        lam = np.zeros(inner)
        for k, m in enumerate(inner):
            ev = 2.0 - 2.0 * np.cos(np.pi * np.arange(1, m + 1) / (m + 1))
            sh = [1] * len(inner)
            sh[k] = m
            lam = lam + ev.reshape(sh)
        self.lam = lam

    def solve(self, rhs):
        return fft.idstn(fft.dstn(rhs, type=1) / self.lam, type=1)


def _interior(a):
    return a[(slice(1, -1),) * a.ndim]


def _laplacian_interior(v):
    """Graph Laplacian ``sum_j (v_i - v_j)`` at interior nodes."""
    n = v.ndim
    core = _interior(v)
    out = 2 * n * core
    for k in range(n):
        lo = [slice(1, -1)] * n
        hi = [slice(1, -1)] * n
        lo[k] = slice(0, -2)
        hi[k] = slice(2, None)
        out = out - v[tuple(lo)] - v[tuple(hi)]
    return out


class _SmoothedProblem:
    def __init__(self, grid: Grid, w: WeightField, eps: float, two_phase: bool):
        self.h = grid.spacing
        self.n = grid.rank
        self.eps = eps
        self.qp2 = w.q_plus.values ** 2
        self.qm2 = w.q_minus.values ** 2 if two_phase else None
        self.cd = self.h ** (self.n - 2)
        self.cv = self.h ** self.n

    def value(self, v):
        e = self.cd * sum(float(np.sum(d * d)) for d in _edge_terms(v))
        dens = self.qp2 * _ramp(v, self.eps)
        if self.qm2 is not None:
            dens = dens + self.qm2 * _ramp(-v, self.eps)
        return e + self.cv * float(np.sum(dens))

    def grad(self, v):
        """Gradient with respect to interior nodes."""
        g = 2.0 * self.cd * _laplacian_interior(v)
        core = _interior(v)
        band = (core >= 0) & (core < self.eps)
        g = g + self.cv * _interior(self.qp2) * band / self.eps
        if self.qm2 is not None:
            band_m = (core < 0) & (core > -self.eps)
            g = g - self.cv * _interior(self.qm2) * band_m / self.eps
        return g


def initial_guess(values_bd: np.ndarray, project: bool) -> np.ndarray:
    """Discrete harmonic extension of the boundary samples."""
    v = np.array(values_bd, dtype=float)
    lap = _DirichletLaplacian(v.shape)
    core = np.zeros(tuple(s - 2 for s in v.shape))
    v[(slice(1, -1),) * v.ndim] = core
    rhs = -_laplacian_interior(v)
    v[(slice(1, -1),) * v.ndim] = lap.solve(rhs)
    if project:
        np.maximum(v, 0.0, out=v)
    return v


def _mm_stage(prob: _SmoothedProblem, v: np.ndarray, cfg: SolveConfig, project: bool,
              trace: list, it0: int):
    """Majorize-minimize iterations for one ramp width.

    Each side of the ramp is concave, so replacing it by its supporting line
    at the current iterate gives a convex majorant (a one-/two-phase
    obstacle-type problem). The majorant is minimized by nonlinear SOR; the
    smoothed energy is then nonincreasing from one iteration to the next.
    """
    free = np.zeros(v.shape, dtype=bool)
    free[1:-1, 1:-1] = True
    lower = 0.0 if project else -np.inf
    scale = 8.0 * prob.cd
    omega = kernels.optimal_omega(prob.h, max(v.shape) * prob.h)
    sup = max(float(np.max(np.abs(v))), 1e-300)
    e = prob.value(v)
    prev_pattern = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        pos_band = v < prob.eps
        shift_pos = prob.cv * prob.qp2 * pos_band / (prob.eps * scale)
        if prob.qm2 is not None:
            neg_band = v > -prob.eps
            shift_neg = prob.cv * prob.qm2 * neg_band / (prob.eps * scale)
            pattern = np.packbits(pos_band), np.packbits(neg_band)
        else:
            shift_neg = np.zeros_like(v)
            pattern = np.packbits(pos_band), None
        v, _, _ = kernels.shrink_solve(v, free, shift_pos, shift_neg, lower=lower,
                                       omega=omega, tol=cfg.inner_tol * sup)
        e_new = prob.value(v)
        trace.append((it0 + it, e_new))
        decrease = e - e_new
        e = e_new
        same = prev_pattern is not None and all(
            (a is None and b is None) or (a is not None and np.array_equal(a, b))
            for a, b in zip(pattern, prev_pattern))
        if same or decrease <= cfg.rel_tol * max(abs(e), 1e-300):
            converged = True
            break
        prev_pattern = pattern
    return v, it, converged


def _level_stride(eps_cells: float, dims: tuple, enabled: bool) -> int:
    """Largest power-of-two stride with ``eps_cells >= 8 * stride`` that divides every axis."""
    if not enabled:
        return 1
    s = 1
    while 8 * s <= eps_cells and all((d - 1) % (2 * s) == 0 and (d - 1) // (2 * s) >= 8 for d in dims):
        s *= 2
    return s


def _subgrid(grid: Grid, stride: int) -> Grid:
    return Grid(grid.origin, grid.spacing * stride, tuple((d - 1) // stride + 1 for d in grid.dims))


def _restrict(a: np.ndarray, stride: int) -> np.ndarray:
    return np.ascontiguousarray(a[(slice(None, None, stride),) * a.ndim])


def minimize(spec: ProblemSpec, cfg: SolveConfig | None = None) -> SolveResult:
    """Minimize the discrete functional with the spec's Dirichlet data.

    The indicator is replaced by the ramp ``clamp(u/eps, 0, 1)`` and ``eps``
    is annealed along ``cfg.eps_cells`` with warm starts. Each stage runs
    majorize-minimize passes (see :func:`_mm_stage`); with
    ``cfg.multilevel`` a stage whose ramp spans at least 8 cells of a nested
    coarser grid runs there, and the next stage starts from its interpolant.
    One-phase runs keep ``u >= 0`` throughout. ``cfg.finish`` then removes
    the ramp's inward bias of the free boundary.
    """
    cfg = cfg or SolveConfig()
    grid = spec.grid
    w = spec.effective_weights
    two_phase = spec.phase == "two-phase"
    project = (not two_phase) if cfg.project is None else cfg.project
    data = spec.boundary_values()
    bd = boundary_mask(grid)
    if np.all(data[bd] == 0):
        u = ScalarField(grid, np.zeros(grid.dims))
        return SolveResult(u, ((0, 0.0),), 0.0, True, 0, (0,))
    trace: list = []
    total = 0
    stage_its = []
    all_converged = True
    v = None
    prev_grid = None
    for k in cfg.eps_cells:
        stride = _level_stride(k, grid.dims, cfg.multilevel)
        lg = _subgrid(grid, stride)
        ldata = _restrict(data, stride)
        lbd = boundary_mask(lg)
        if v is None:
            v = initial_guess(np.where(lbd, ldata, 0.0), project)
        elif lg != prev_grid:
            v = sample(ScalarField(prev_grid, v), lg.points())
            v[lbd] = ldata[lbd]
            if project:
                np.maximum(v, 0.0, out=v)
        lw = w if stride == 1 else WeightField(
            ScalarField(lg, _restrict(w.q_plus.values, stride)),
            ScalarField(lg, _restrict(w.q_minus.values, stride)),
            c0=w.c0, alpha=w.alpha, holder_seminorm=w.holder_seminorm)
        prob = _SmoothedProblem(lg, lw, k * grid.spacing, two_phase)
        v, its, conv = _mm_stage(prob, v, cfg, project, trace, total)
        total += its
        stage_its.append(its)
        all_converged &= conv
        prev_grid = lg
        log.info("eps=%g h on %s: %d iterations, energy %.10g, converged=%s",
                 k, lg.dims, its, trace[-1][1] if trace else float("nan"), conv)
    if prev_grid != grid:
        v = sample(ScalarField(prev_grid, v), grid.points())
    v[bd] = data[bd]
    if cfg.finish:
        v = sharp_finish(v, bd, grid.spacing, cfg.eps_cells[-1] * grid.spacing, two_phase,
                         _q_floor(w, two_phase))
    u = ScalarField(grid, v)
    sharp = energy(u, w, sharp=True)
    return SolveResult(u, tuple(trace), sharp, bool(all_converged), total, tuple(stage_its))


def _q_floor(w: WeightField, two_phase: bool) -> float:
    q = w.q_plus.values
    if two_phase and np.any(w.q_minus.values > 0):
        q = np.concatenate([q.ravel(), w.q_minus.values[w.q_minus.values > 0]])
    return float(np.min(q))


def sharp_finish(v: np.ndarray, bd: np.ndarray, h: float, eps: float, two_phase: bool,
                 q_min: float, tol: float = 1e-10) -> np.ndarray:
    """Undo the ramp's inward bias and make the field harmonic off its zero set.

    Across a one-phase boundary the ramp-smoothed minimizer is a parabola
    ``q^2 (x - a)^2 / (4 eps)`` that meets the linear profile of the sharp
    problem where it equals ``eps / 4``. Nodes below that level are set to
    zero and the rest are re-solved harmonically with the current boundary
    data. In two-phase runs, nodes within two ramp widths of both a clearly
    positive and a clearly negative node are treated as a sign crossing and
    kept, so zero strips thinner than that are closed.
    """
    tau = 0.25 * eps
    out = np.array(v, dtype=float)
    zero = np.abs(out) <= tau
    if two_phase:
        from scipy import ndimage
        reach = 2.0 * eps / q_min + h
        d_pos = ndimage.distance_transform_edt(~(out > tau)) * h
        d_neg = ndimage.distance_transform_edt(~(out < -tau)) * h
        zero &= ~((d_pos <= reach) & (d_neg <= reach))
    zero &= ~bd
    out[zero] = 0.0
    unknown = ~zero & ~bd
    sup = max(float(np.max(np.abs(out))), 1e-300)
    return _solve_region(out, unknown, h, tol * sup)


# --- Laplace solves ---------------------------------------------------------------

def _positive_mask(u: ScalarField) -> np.ndarray:
    return u.values > 0


def _crop(mask: np.ndarray, pad: int = 1):
    idx = np.nonzero(mask)
    lo = [max(int(i.min()) - pad, 0) for i in idx]
    hi = [min(int(i.max()) + pad + 1, s) for i, s in zip(idx, mask.shape)]
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def _solve_region(values: np.ndarray, mask: np.ndarray, h: float, tol: float,
                  rhs: np.ndarray | None = None) -> np.ndarray:
    """Discrete Laplace (or Poisson with ``rhs``) on ``mask``; returns a new array."""
    out = np.array(values, dtype=float)
    if not np.any(mask):
        return out
    sl = _crop(mask)
    sub = np.ascontiguousarray(out[sl])
    m = mask[sl]
    length = max(s.stop - s.start for s in sl) * h
    omega = kernels.optimal_omega(h, length)
    r = None if rhs is None else np.ascontiguousarray(rhs[sl])
    sub, _, _ = kernels.sor_solve(sub, m, r, omega=omega, tol=tol)
    out[sl] = sub
    return out


def _unknowns(grid: Grid, base: np.ndarray) -> np.ndarray:
    m = base & ~boundary_mask(grid)
    return m


def harmonic_replace(u: ScalarField, w: WeightField, b: Ball) -> ScalarField:
    """Harmonic replacement on ``{u > 0}`` inside ``b``.

    Nodes with ``u > 0`` inside the ball become unknowns of the 5-point
    Laplace system; every other node keeps the value of ``u``. ``w`` is
    accepted for interface symmetry with the energy; the replacement does not
    depend on it.
    """
    g = u.grid
    if g.rank != 2:
        raise ParameterError("harmonic replacement is implemented for rank 2")
    if not g.contains_ball(b):
        raise DomainError("replacement ball leaves the grid")
    inside = np.linalg.norm(g.points() - np.asarray(b.center), axis=-1) < b.radius
    mask = _unknowns(g, inside & _positive_mask(u))
    if not np.any(mask):
        return u
    tol = 1e-10 * max(u.sup(), 1e-300)
    return ScalarField(g, _solve_region(u.values, mask, g.spacing, tol))


def _soft_target(grid: Grid, target: Ball) -> np.ndarray:
    """Boundary indicator of ``target`` with a one-cell linear ramp at the rim."""
    d = np.linalg.norm(grid.points() - np.asarray(target.center), axis=-1)
    return np.clip((target.radius - d) / grid.spacing + 0.5, 0.0, 1.0)


def _component(mask: np.ndarray, seed: tuple) -> np.ndarray:
    from scipy import ndimage
    lab, _ = ndimage.label(mask)
    return lab == lab[seed]


def harmonic_measure(u: ScalarField, pole, target: Ball, tol: float = 1e-10) -> float:
    """Discrete harmonic measure of ``target`` seen from ``pole`` in ``{u > 0}``.

    Boundary nodes of the positivity set (nodes with ``u <= 0`` and the grid
    edge) carry data 1 inside the target and 0 elsewhere; the target's rim is
    ramped over one cell so that the discrete measure tracks target length.
    """
    g = u.grid
    if g.rank != 2:
        raise ParameterError("harmonic measure is implemented for rank 2")
    idx = g.nearest_index(pole)
    interior = _unknowns(g, _positive_mask(u))
    if not interior[idx]:
        raise ParameterError("pole must lie in the positivity set")
    comp = _component(interior, idx)
    data = np.where(comp, 0.0, _soft_target(g, target))
    data[interior & ~comp] = 0.0
    sol = _solve_region(data, comp, g.spacing, tol)
    return float(min(max(sol[idx], 0.0), 1.0))


def harmonic_measure_density(u: ScalarField, pole, tol: float = 1e-12) -> np.ndarray:
    """Per-node discrete harmonic measure from ``pole`` (one adjoint solve).

    Returns an array on the grid, supported on the boundary nodes of the
    positivity component of the pole; ``harmonic_measure`` for any target
    equals the sum of this array against the target's boundary data.
    """
    g = u.grid
    idx = g.nearest_index(pole)
    interior = _unknowns(g, _positive_mask(u))
    if not interior[idx]:
        raise ParameterError("pole must lie in the positivity set")
    comp = _component(interior, idx)
    rhs = np.zeros(g.dims)
    rhs[idx] = 1.0
    green = _solve_region(np.zeros(g.dims), comp, g.spacing, tol, rhs=rhs)
    green[~comp] = 0.0
    dens = np.zeros(g.dims)
    for k in range(2):
        for s in (1, -1):
            dens += np.roll(green, s, axis=k)
    dens[comp] = 0.0
    return dens


def harmonic_measure_batch(u: ScalarField, pole, targets, tol: float = 1e-12) -> list:
    dens = harmonic_measure_density(u, pole, tol)
    return [float(np.sum(dens * _soft_target(u.grid, t))) for t in targets]

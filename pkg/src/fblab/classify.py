"""Flatness, blow-up fits, regular-point classification and boundary identities.

Direction convention: a field is flat in direction ``e`` at ``(x0, r)`` with
flatness ``sigma`` when it vanishes where ``<x - x0, e> <= -sigma r`` and
satisfies ``u >= q_+(x0) (<x - x0, e> - sigma r)`` where
``<x - x0, e> >= sigma r``; ``e`` therefore points into the positive phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from fblab.errors import DomainError, ParameterError
from fblab.field import Ball, Grid, ScalarField, rescale, sample, sphere_nodes
from fblab.geometry import FreeBoundary, extract_boundary, hausdorff_flatness
from fblab.monotone import extrapolate_density, radius_ladder, weiss
from fblab.problem import WeightField

EPS_GAP = 0.15


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def _ball_nodes(u: ScalarField, x0, r: float):
    g = u.grid
    b = Ball(tuple(float(c) for c in x0), r)
    if not g.contains_ball(b):
        raise DomainError("ball leaves the grid")
    c = np.asarray(b.center)
    org = np.asarray(g.origin)
    lo = np.maximum(np.floor((c - r - org) / g.spacing).astype(int), 0)
    hi = np.minimum(np.ceil((c + r - org) / g.spacing).astype(int) + 1, np.asarray(g.dims))
    sl = tuple(slice(int(a), int(z)) for a, z in zip(lo, hi))
    axes = [org[k] + g.spacing * np.arange(s.start, s.stop) for k, s in enumerate(sl)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = u.values[sl]
    inside = np.linalg.norm(pts - c, axis=-1) <= r
    return pts[inside] - c, vals[inside]


def _cell_min(u: ScalarField, pts: np.ndarray) -> np.ndarray:
    g = u.grid
    i = np.floor((pts - np.asarray(g.origin)) / g.spacing).astype(int)
    i = np.clip(i, 0, np.asarray(g.dims) - 2)
    v = u.values
    return np.minimum.reduce([v[i[:, 0] + a, i[:, 1] + b] for a in (0, 1) for b in (0, 1)])


# --- flatness -------------------------------------------------------------------------

@dataclass(frozen=True)
class FlatnessReport:
    x0: tuple
    r: float
    sigma: float
    direction: tuple
    hausdorff_sigma: float = math.nan

    def to_dict(self) -> dict:
        return {"x0": list(self.x0), "r": self.r, "sigma": self.sigma,
                "direction": list(self.direction), "hausdorff_sigma": self.hausdorff_sigma}


def _directions(n_dir: int) -> np.ndarray:
    th = 2 * np.pi * np.arange(n_dir) / n_dir
    return np.stack([np.cos(th), np.sin(th)], axis=-1)


def _feasible(p: np.ndarray, uv, q: float, r: float, sigma: np.ndarray, u_tol: float):
    """Both flatness conditions for every direction; ``p`` is ``(n_dir, m)``, normalized by ``r``.

    ``uv`` is a pair: values tested against the zero condition and against
    the linear lower bound.
    """
    u0, u1 = uv
    s = sigma[:, None]
    zero_ok = np.all((p > -s) | (u0[None, :] <= u_tol), axis=1)
    lin_ok = np.all((p < s) | (u1[None, :] >= q * r * (p - s) - 1e-14), axis=1)
    return zero_ok & lin_ok


def _sigma_search(p, uv, q, r, tol, u_tol):
    lo = np.zeros(p.shape[0])
    hi = np.ones(p.shape[0])
    ok0 = _feasible(p, uv, q, r, lo, u_tol)
    hi[ok0] = 0.0
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        ok = _feasible(p, uv, q, r, mid, u_tol)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return hi


def flatness(u: ScalarField, w: WeightField, x0, r: float, n_dir: int = 360,
             direction=None, fb: Optional[FreeBoundary] = None,
             with_hausdorff: bool = True) -> FlatnessReport:
    """Minimal flatness over ``n_dir`` directions (or at a forced ``direction``).

    Each direction's ``sigma`` is found by bisection to ``h / (4 r)`` over the
    grid nodes of ``B(x0, r)`` plus its rim sampled at spacing ``h``. Among directions sharing the minimal value the
    middle one of the run containing the first minimum is returned.
    """
    g = u.grid
    if g.rank != 2:
        raise ParameterError("flatness is implemented for rank 2")
    x0 = tuple(float(c) for c in x0)
    rel, uv = _ball_nodes(u, x0, r)
    # the ball is closed: its rim enters the zero condition so sigma = 1 is attainable;
    # a rim point counts as positive only when its whole cell is
    rim, _, _ = sphere_nodes(Ball(x0, r), max(8, int(math.ceil(2 * math.pi * r / g.spacing))))
    rel = np.concatenate([rel, rim - np.asarray(x0)])
    uv = (np.concatenate([uv, _cell_min(u, rim)]), np.concatenate([uv, np.full(len(rim), np.inf)]))
    q = w.at(np.asarray(x0))[0]
    u_tol = 1e-9 * max(u.sup(), 1e-300)
    dirs = _directions(n_dir) if direction is None else np.asarray(direction, float).reshape(1, 2)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    tol = g.spacing / (4 * r)
    sig = np.empty(len(dirs))
    for start in range(0, len(dirs), 45):
        p = dirs[start:start + 45] @ rel.T / r
        sig[start:start + 45] = _sigma_search(p, uv, q, r, tol, u_tol)
    k = int(np.argmin(sig))
    if direction is None:
        best = sig[k]
        tied = np.abs(sig - best) <= 1e-15
        lo_k, hi_k = k, k
        while tied[(lo_k - 1) % n_dir] and (k - lo_k) < n_dir - 1:
            lo_k -= 1
        while tied[(hi_k + 1) % n_dir] and (hi_k - lo_k) < n_dir - 1:
            hi_k += 1
        k = ((lo_k + hi_k) // 2) % n_dir
    e = dirs[k]
    hs = math.nan
    if with_hausdorff:
        fb = fb if fb is not None else extract_boundary(u)
        try:
            hs = hausdorff_flatness(fb, x0, r, e)
        except DomainError:
            hs = math.nan
    return FlatnessReport(x0, r, float(sig[k]), (float(e[0]), float(e[1])), hs)


# --- blow-ups ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlowupResult:
    x0: tuple
    r: float
    field: ScalarField
    slope: float
    normal: tuple
    misfit: float


def blowup_fit(u: ScalarField, w: WeightField, x0, r: float, resolution: int = 128) -> BlowupResult:
    """Sup-norm fit of ``a <x, nu>_+`` to the blow-up ``u(x0 + r x)/r`` on the unit ball.

    First a 1-degree search over ``nu`` with ``a = q_+(x0)``; then a joint
    refinement over ``a`` (0.5% steps within 10%) and ``nu`` (0.1-degree steps
    within 1 degree).
    """
    out = Grid.square(-1.0, 1.0, resolution)
    v = rescale(u, x0, r, out)
    pts = out.points()
    inside = np.linalg.norm(pts, axis=-1) <= 1.0
    xs = pts[inside]
    vals = v.values[inside]
    a0 = w.at(np.asarray(x0, dtype=float))[0]

    def misfit(a, th):
        nu = np.stack([np.cos(th), np.sin(th)], axis=-1)
        model = a[:, None] * np.maximum(nu @ xs.T, 0.0)
        return np.max(np.abs(model - vals[None, :]), axis=1)

    th = np.deg2rad(np.arange(360.0))
    m = misfit(np.full(th.shape, a0), th)
    k = int(np.argmin(m))
    th_grid = th[k] + np.deg2rad(np.arange(-1.0, 1.0001, 0.1))
    a_grid = a0 * (1 + np.arange(-0.1, 0.10001, 0.005))
    A, T = np.meshgrid(a_grid, th_grid, indexing="ij")
    mm = misfit(A.ravel(), T.ravel())
    j = int(np.argmin(mm))
    best_a, best_t, best_m = float(A.ravel()[j]), float(T.ravel()[j]), float(mm[j])
    if m[k] <= best_m:
        best_a, best_t, best_m = a0, float(th[k]), float(m[k])
    return BlowupResult(tuple(float(c) for c in x0), r, v, best_a,
                        (math.cos(best_t), math.sin(best_t)), best_m)


# --- classification -----------------------------------------------------------------------

@dataclass(frozen=True)
class Classification:
    x0: tuple
    W0: float
    gap_ratio: float
    label: str
    residual: float
    radii: tuple = ()
    values: tuple = ()

    def to_dict(self) -> dict:
        return {"x0": list(self.x0), "W0": self.W0, "gap_ratio": self.gap_ratio,
                "label": self.label, "residual": self.residual,
                "radii": list(self.radii), "W": list(self.values)}


def default_ladder(u: ScalarField, x0, r_max: float = 0.25, gamma: float = 0.8) -> list:
    g = u.grid
    room = min(min(np.asarray(x0) - np.asarray(g.origin)), min(np.asarray(g.upper) - np.asarray(x0)))
    return radius_ladder(min(r_max, 0.95 * room), 6 * g.spacing, gamma)


def classify_point(u: ScalarField, w: WeightField, x0, ladder: Optional[Sequence[float]] = None,
                   eps_gap: float = EPS_GAP) -> Classification:
    """Extrapolated Weiss density and its ratio to the half-plane value ``q_+^2 w_n / 2``."""
    ladder = list(ladder) if ladder is not None else default_ladder(u, x0)
    vals = [weiss(u, w, x0, r, check=(k == 0)).W for k, r in enumerate(sorted(ladder, reverse=True))]
    radii = sorted(ladder, reverse=True)
    fit = extrapolate_density(radii, vals, w.alpha)
    q = w.at(np.asarray(x0, dtype=float))[0]
    gap = fit.W0 / (q**2 * unit_ball_volume(u.grid.rank) / 2)
    if fit.residual > 0.05 * abs(fit.W0):
        label = "unresolved"
    else:
        label = "regular" if gap <= 1 + eps_gap else "unresolved"
    return Classification(tuple(float(c) for c in x0), fit.W0, gap, label, fit.residual,
                          tuple(radii), tuple(vals))


# --- normal derivatives and the weak identity ----------------------------------------------

def normal_derivatives(u: ScalarField, z: np.ndarray, nu: np.ndarray, n_min: int = 2,
                       n_max: int = 8) -> np.ndarray:
    """Least-squares slope of ``t -> u(z + t nu)`` over ``t = n_min h, ..., n_max h``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    nu = np.atleast_2d(np.asarray(nu, dtype=float))
    nu = nu / np.linalg.norm(nu, axis=-1, keepdims=True)
    h = u.grid.spacing
    t = h * np.arange(n_min, n_max + 1)
    pts = z[:, None, :] + t[None, :, None] * nu[:, None, :]
    if not np.all(u.grid.contains(pts)):
        raise DomainError("normal samples leave the grid")
    vals = sample(u, pts)
    tc = t - t.mean()
    return (vals - vals.mean(axis=1, keepdims=True)) @ tc / np.dot(tc, tc)


def normal_derivative(u: ScalarField, fb: FreeBoundary, z, nu=None) -> float:
    """Normal derivative at ``z``; ``nu`` defaults to the normal of the nearest vertex."""
    z = np.asarray(z, dtype=float)
    if nu is None:
        verts = fb.vertices()
        if len(verts) == 0:
            raise DomainError("free boundary is empty")
        nu = fb.normals()[int(np.argmin(np.linalg.norm(verts - z, axis=-1)))]
    return float(normal_derivatives(u, z, nu)[0])


@dataclass(frozen=True)
class WeakIdentityTrial:
    center: tuple
    half_width: float
    lhs: float
    rhs: float

    @property
    def residual(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return abs(self.lhs - self.rhs) / scale if scale > 0 else 0.0


def cosine_bump(center, half_width: float):
    """Tensor-product ``cos^2`` bump supported on the square of the given half-width."""
    c = np.asarray(center, dtype=float)

    def zeta(p):
        d = (np.asarray(p) - c) / half_width
        inside = np.all(np.abs(d) < 1, axis=-1)
        return np.where(inside, np.prod(np.cos(0.5 * np.pi * d) ** 2, axis=-1), 0.0)

    return zeta


def weak_identity_residual(h: ScalarField, fb: FreeBoundary, center, half_width: float) -> WeakIdentityTrial:
    """Compare ``-int <grad h, grad zeta>`` with ``int_Gamma zeta dh/dnu`` for one bump."""
    g = h.grid
    zeta = cosine_bump(center, half_width)
    zv = zeta(g.points())
    hv = h.values
    lhs = 0.0
    for k in range(2):
        lhs -= float(np.sum(np.diff(hv, axis=k) * np.diff(zv, axis=k)))
    lhs *= g.spacing ** (g.rank - 2)
    total = 0.0
    for pl in fb.polylines:
        segs = pl.segments()
        if len(segs) == 0:
            continue
        nrm = pl.normals
        nseg = 0.5 * (nrm + np.roll(nrm, -1, axis=0)) if pl.closed and len(nrm) > 2 else 0.5 * (nrm[:-1] + nrm[1:])
        mid = 0.5 * (segs[:, 0] + segs[:, 1])
        length = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=-1)
        zm = zeta(mid)
        sel = zm > 0
        if not np.any(sel):
            continue
        dn = normal_derivatives(h, mid[sel], nseg[sel])
        total += float(np.sum(length[sel] * zm[sel] * dn))
    return WeakIdentityTrial(tuple(float(c) for c in center), half_width, lhs, total)


@dataclass(frozen=True)
class WeakIdentityReport:
    trials: tuple

    @property
    def residuals(self) -> np.ndarray:
        return np.array([t.residual for t in self.trials])

    @property
    def median(self) -> float:
        return float(np.median(self.residuals)) if self.trials else math.nan


def weak_identity_check(h: ScalarField, fb: FreeBoundary, b: Ball, n_trials: int = 20,
                        seed: int = 0) -> WeakIdentityReport:
    """Random bumps centred near boundary vertices inside ``b``.

    Half-widths are drawn from ``[0.25, 0.5] * r / sqrt(2)`` and centres are
    boundary vertices whose bump support stays inside ``b``.
    """
    rng = np.random.default_rng(seed)
    c = np.asarray(b.center)
    verts = fb.vertices()
    trials = []
    for _ in range(n_trials):
        hw = rng.uniform(0.25, 0.5) * b.radius / math.sqrt(2)
        room = b.radius - hw * math.sqrt(2)
        cand = verts[np.linalg.norm(verts - c, axis=-1) <= room] if len(verts) else verts
        if len(cand) == 0:
            off = rng.uniform(-1, 1, size=2) * room / math.sqrt(2)
            center = c + off
        else:
            center = cand[rng.integers(len(cand))]
        trials.append(weak_identity_residual(h, fb, center, hw))
    return WeakIdentityReport(tuple(trials))


# --- decay audit ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayRow:
    r: float
    sigma: float
    direction: tuple
    floor: float
    step_pass: Optional[bool] = None
    drift: Optional[float] = None
    above_floor: bool = False
    truncated: bool = False


@dataclass(frozen=True)
class DecayReport:
    x0: tuple
    theta: float
    eta: float
    rows: tuple
    alpha_fit: float
    amplitude_fit: float
    drift_constant: float

    @property
    def resolved_rows(self) -> int:
        return sum(1 for r in self.rows if not r.truncated and r.sigma > r.floor)

    def pairs(self) -> list:
        """Rows that carry a per-step check above the resolution floor."""
        return [r for r in self.rows if r.step_pass is not None and r.above_floor]


def decay_audit(u: ScalarField, w: WeightField, x0, theta: float = 0.75, eta: float = 0.5,
                r0: float = 0.25, r_stop: Optional[float] = None, n_dir: int = 360) -> DecayReport:
    """Flatness on ``r_k = r0 eta^k`` with the per-step improvement check.

    A step ``k -> k+1`` passes when ``sigma_{k+1} <= max(theta sigma_k, 4h/r_{k+1})``
    and is counted as above the floor when ``sigma_k > 4h/r_k``. Rows below
    ``r_stop`` (default ``4h``) are reported as truncated. The power law
    ``sigma ~ A r^alpha`` is fitted only on rows above the floor and is NaN
    when fewer than two such rows exist.
    """
    if not (0 < theta < 1 and 0 < eta < 1):
        raise ParameterError("theta and eta must lie in (0, 1)")
    h = u.grid.spacing
    r_stop = 4 * h if r_stop is None else r_stop
    rows = []
    prev = None
    r = r0
    while r >= r_stop * (1 - 1e-12):
        rep = flatness(u, w, x0, r, n_dir=n_dir, with_hausdorff=False)
        floor = 4 * h / r
        step_pass = drift = None
        above = False
        if prev is not None:
            step_pass = bool(rep.sigma <= max(theta * prev.sigma, floor))
            drift = float(np.linalg.norm(np.subtract(rep.direction, prev.direction)))
            above = prev.sigma > 4 * h / prev.r
        rows.append(DecayRow(r, rep.sigma, rep.direction, floor, step_pass, drift, above))
        prev = rep
        r *= eta
    if r < r_stop and r > 0:
        rows.append(DecayRow(r, math.nan, (math.nan, math.nan), 4 * h / r, truncated=True))
    good = [row for row in rows if not row.truncated and row.sigma > row.floor]
    if len(good) >= 2:
        lr = np.log([row.r for row in good])
        ls = np.log([row.sigma for row in good])
        alpha, logA = np.polyfit(lr, ls, 1)
        amp = float(np.exp(logA))
    else:
        alpha, amp = math.nan, math.nan
    ratios = [rows[k + 1].drift / rows[k].sigma for k in range(len(rows) - 1)
              if rows[k + 1].drift is not None and rows[k + 1].above_floor and rows[k].sigma > 0]
    c_drift = float(max(ratios)) if ratios else 0.0
    return DecayReport(tuple(float(c) for c in x0), theta, eta, tuple(rows), float(alpha), amp, c_drift)

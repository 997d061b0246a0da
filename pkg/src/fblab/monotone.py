"""Weiss energies, the dissipation integral, the two-phase ACF functional and
ladder audits of almost-monotonicity.

For ``u`` on a rank-``n`` grid, a centre ``x0`` and radius ``r``::

    W(r)      = (D + V) / r^n - S / r^(n+1)
    W~(r)     = (D + V) / r^n - (1/r) int_0^r t^(1-n) int_{dB_t} (grad u . nu)^2
    D         = int_{B_r} |grad u|^2
    V         = q_+(x0)^2 |B_r & {u > 0}| + q_-(x0)^2 |B_r & {u < 0}|
    S         = int_{dB_r} u^2

Gradients are those of the multilinear interpolant, so fields whose kinks lie
on grid lines are integrated without smearing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from fblab.errors import DomainError, ParameterError, PreconditionError
from fblab.field import Ball, ScalarField, ball_integral, default_n_theta, sample, sample_gradient, sphere_nodes
from fblab.problem import AlmostMinParams, WeightField

TAU_DISC = 5e-3
SIMPSON_PANELS = 32
LOG_STEP = 1.0 / 64.0  # radial lattice step in log(t) for the dissipation integral


@dataclass(frozen=True)
class WeissSample:
    x0: tuple
    r: float
    W: float
    W_tilde: float
    dirichlet_part: float
    volume_part: float
    sphere_part: float
    normal_part: float
    dissipation: float = 0.0

    def reconstruct(self) -> float:
        n = len(self.x0)
        return (self.dirichlet_part + self.volume_part) / self.r**n - self.sphere_part / self.r ** (n + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _ball(u: ScalarField, x0, r: float) -> Ball:
    b = Ball(tuple(float(c) for c in x0), r)
    if not u.grid.contains_ball(b):
        raise DomainError("Weiss ball leaves the grid")
    return b


def _local_lipschitz(u: ScalarField, b: Ball) -> float:
    g = u.grid
    c = np.asarray(b.center)
    org = np.asarray(g.origin)
    lo = np.maximum(np.floor((c - b.radius - org) / g.spacing).astype(int), 0)
    hi = np.minimum(np.ceil((c + b.radius - org) / g.spacing).astype(int) + 1, np.asarray(g.dims))
    v = u.values[tuple(slice(a, z) for a, z in zip(lo, hi))]
    slopes = [np.max(np.abs(np.diff(v, axis=k))) for k in range(v.ndim) if v.shape[k] > 1]
    return float(max(slopes, default=0.0)) / g.spacing


def check_center(u: ScalarField, x0, r: float) -> None:
    """Raise :class:`PreconditionError` unless ``|u(x0)| <= 2 h Lip(u)``."""
    b = _ball(u, x0, r)
    val = abs(float(sample(u, np.asarray(b.center)[None, :])[0]))
    tol = 2 * u.grid.spacing * _local_lipschitz(u, b)
    if val > tol:
        raise PreconditionError(f"u(x0) = {val:.3g} exceeds 2h Lip(u) = {tol:.3g}")


def _radial_term(u: ScalarField, x0: np.ndarray, t: float, kind: str) -> float:
    """``t^(1-n) int_{dB_t} (grad u . nu)^2`` (kind 'normal') or ``int_{dB_t} (u - grad u.(x-x0))^2``."""
    h = u.grid.spacing
    n = u.grid.rank
    pts, dirs, w = sphere_nodes(Ball(tuple(x0), t), default_n_theta(t, h))
    grad = sample_gradient(u, pts)
    if kind == "normal":
        return float(np.dot(w, np.sum(grad * dirs, axis=-1) ** 2)) / t ** (n - 1)
    val = sample(u, pts) - t * np.sum(grad * dirs, axis=-1)
    return float(np.dot(w, val * val))


def _simpson(values: np.ndarray, a: float, b: float) -> float:
    m = len(values) - 1
    if m % 2:
        raise ParameterError("Simpson rule needs an even number of panels")
    wts = np.ones(m + 1)
    wts[1:-1:2] = 4
    wts[2:-1:2] = 2
    return float((b - a) / (3 * m) * np.dot(wts, values))


def weiss(u: ScalarField, w: WeightField, x0, r: float, check: bool = True,
          panels: int = SIMPSON_PANELS) -> WeissSample:
    """Weiss energies ``W`` and ``W~`` at ``(x0, r)`` with all four parts.

    ``q_+`` and ``q_-`` are frozen at ``x0``. With ``check`` the centre must
    satisfy ``|u(x0)| <= 2 h Lip(u)``.
    """
    b = _ball(u, x0, r)
    if check:
        check_center(u, x0, r)
    c = np.asarray(b.center)
    n = u.grid.rank
    h = u.grid.spacing
    qp, qm = w.at(c)

    def grad_sq(p):
        gr = sample_gradient(u, p)
        return np.sum(gr * gr, axis=-1)

    def phase(p):
        v = sample(u, p)
        return qp**2 * (v > 0) + qm**2 * (v < 0)

    dirichlet = ball_integral(grad_sq, b, grid=u.grid)
    volume = ball_integral(phase, b, grid=u.grid)
    pts, _, wts = sphere_nodes(b, default_n_theta(r, h))
    sphere = float(np.dot(wts, sample(u, pts) ** 2))
    ts = np.linspace(0.0, r, panels + 1)
    ts[0] = 1e-9 * r
    g = np.array([_radial_term(u, c, t, "normal") for t in ts])
    normal = _simpson(g, 0.0, r) / r
    bulk = (dirichlet + volume) / r**n
    return WeissSample(tuple(c), r, bulk - sphere / r ** (n + 1), bulk - normal,
                       dirichlet, volume, sphere, normal)


def dissipation(u: ScalarField, x0, s: float, r: float) -> float:
    """``int_s^r t^-(n+2) int_{dB_t} (u - grad u . (x - x0))^2 dsigma dt``.

    The radial integral is composite Simpson on a fixed lattice in ``log t``
    (step :data:`LOG_STEP`); partial panels at the ends integrate the same
    panel quadratic, so the result is additive over adjacent intervals.
    """
    if not 0 < s < r:
        raise ParameterError("dissipation needs 0 < s < r")
    _ball(u, x0, r)
    c = np.asarray(x0, dtype=float)
    n = u.grid.rank
    lo, hi = math.log(s), math.log(r)
    k0 = math.floor(lo / (2 * LOG_STEP))
    k1 = math.ceil(hi / (2 * LOG_STEP))
    cache: dict = {}

    def G(j):  # integrand in log t at lattice node j (t = e^{j * LOG_STEP})
        if j not in cache:
            t = math.exp(j * LOG_STEP)
            cache[j] = _radial_term(u, c, t, "dissipation") * t ** (-(n + 2)) * t
        return cache[j]

    total = 0.0
    for p in range(k0, k1):
        a = 2 * p * LOG_STEP
        b = a + 2 * LOG_STEP
        x_lo, x_hi = max(a, lo), min(b, hi)
        if x_hi <= x_lo:
            continue
        f0, f1, f2 = G(2 * p), G(2 * p + 1), G(2 * p + 2)
        # quadratic through (a, f0), (a+d, f1), (b, f2), integrated over [x_lo, x_hi]
        d = LOG_STEP
        A = (f0 - 2 * f1 + f2) / (2 * d * d)
        B = (f1 - f0) / d - A * d
        y0, y1 = x_lo - a, x_hi - a
        total += A * (y1**3 - y0**3) / 3 + B * (y1**2 - y0**2) / 2 + f0 * (y1 - y0)
    return max(total, 0.0)


# --- ladder audit ------------------------------------------------------------------

def radius_ladder(r_max: float, r_min: float, gamma: float = 0.8) -> list:
    if not 0 < gamma < 1:
        raise ParameterError("ladder ratio must lie in (0, 1)")
    if r_min <= 0 or r_max < r_min:
        raise ParameterError("need 0 < r_min <= r_max")
    out = []
    r = r_max
    while r >= r_min * (1 - 1e-12):
        out.append(r)
        r *= gamma
    return out


@dataclass(frozen=True)
class MonotoneAudit:
    x0: tuple
    samples: tuple           # WeissSample, radius decreasing
    defects: tuple           # W(r_{k+1}) - W(r_k)
    c_hat: float
    alpha: float
    tau: float
    step_pass: tuple
    dissipation_pass: tuple
    kappa: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.step_pass) and all(self.dissipation_pass)

    def rows(self) -> list:
        out = []
        for k, smp in enumerate(self.samples):
            row = smp.to_dict()
            row["Wtilde"] = row.pop("W_tilde")
            row["x0"] = list(smp.x0)
            if k < len(self.defects):
                row.update(defect=self.defects[k], pass_step=self.step_pass[k],
                           pass_dissipation=self.dissipation_pass[k])
            out.append(row)
        return out


def audit_monotone(u: ScalarField, w: WeightField, amp: AlmostMinParams, x0,
                   ladder: Sequence[float], tau: float = TAU_DISC) -> MonotoneAudit:
    """Check ``W(r_k) >= W(r_{k+1}) - (C r_k^alpha + tau)`` along a decreasing ladder.

    ``C`` is fitted as the least value making every step pass. Each step also
    checks ``W(r_k) - W(r_{k+1}) + C r_k^alpha >= dissipation(r_{k+1}, r_k) - tau``.
    """
    ladder = sorted((float(r) for r in ladder), reverse=True)
    if len(ladder) < 2 or any(a <= b for a, b in zip(ladder, ladder[1:])):
        raise ParameterError("ladder must hold at least two strictly decreasing radii")
    check_center(u, x0, ladder[0])
    alpha = amp.alpha
    samples = []
    for k, r in enumerate(ladder):
        smp = weiss(u, w, x0, r, check=False)
        if k + 1 < len(ladder):
            smp = WeissSample(**{**smp.to_dict(), "dissipation": dissipation(u, x0, ladder[k + 1], r)})
        samples.append(smp)
    defects = [samples[k + 1].W - samples[k].W for k in range(len(ladder) - 1)]
    c_hat = max([0.0] + [(d - tau) / ladder[k] ** alpha for k, d in enumerate(defects)])
    step_pass = [d <= c_hat * ladder[k] ** alpha + tau + 1e-15 for k, d in enumerate(defects)]
    diss_pass = [samples[k].W - samples[k + 1].W + c_hat * ladder[k] ** alpha
                 >= samples[k].dissipation - tau for k in range(len(defects))]
    return MonotoneAudit(tuple(float(c) for c in x0), tuple(samples), tuple(defects), c_hat, alpha,
                         tau, tuple(step_pass), tuple(diss_pass), amp.kappa)


@dataclass(frozen=True)
class DensityFit:
    W0: float
    slope: float
    residual: float
    radii: tuple
    values: tuple


def extrapolate_density(radii: Sequence[float], values: Sequence[float], alpha: float) -> DensityFit:
    """Least-squares ``W(r) ~ W0 + c r^alpha`` on the four smallest radii.

    ``residual`` is the root-mean-square misfit of the fit.
    """
    pairs = sorted(zip((float(r) for r in radii), (float(v) for v in values)))[:4]
    if len(pairs) < 2:
        raise ParameterError("need at least two radii to extrapolate")
    r = np.array([p[0] for p in pairs])
    v = np.array([p[1] for p in pairs])
    A = np.stack([np.ones_like(r), r**alpha], axis=-1)
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - v) ** 2)))
    return DensityFit(float(coef[0]), float(coef[1]), res, tuple(r), tuple(v))


# --- ACF ------------------------------------------------------------------------------

@dataclass(frozen=True)
class AcfSample:
    R: float
    phi_f: float
    phi_g: float

    @property
    def F(self) -> float:
        return self.phi_f * self.phi_g

    def to_dict(self) -> dict:
        return {"R": self.R, "phi_f": self.phi_f, "phi_g": self.phi_g, "F": self.F}


def acf(u: ScalarField, x0, radii: Sequence[float]) -> list:
    """``phi_f(R) = R^-2 int_{B_R} |grad u_+|^2`` and ``phi_g`` for ``u_-`` (rank 2)."""
    if u.grid.rank != 2:
        raise ParameterError("the ACF functional is implemented for rank 2")
    out = []
    for R in sorted(float(r) for r in radii):
        b = _ball(u, x0, R)

        def part(sign):
            def f(p):
                gr = sample_gradient(u, p)
                return np.sum(gr * gr, axis=-1) * (sign * sample(u, p) > 0)
            return f

        pf = ball_integral(part(1), b, grid=u.grid) / R**2
        pg = ball_integral(part(-1), b, grid=u.grid) / R**2
        out.append(AcfSample(R, pf, pg))
    return out

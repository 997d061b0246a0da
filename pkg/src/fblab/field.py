"""Uniform-grid scalar fields, interpolation and quadrature.

Conventions
-----------
``values[i0, i1, ...]`` holds the sample at ``origin + h * (i0, i1, ...)``, so
array axis ``k`` is coordinate ``x_{k+1}``. Points are passed as arrays whose
last axis has length ``rank``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from fblab.errors import DomainError, ParameterError

_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class Grid:
    origin: tuple
    spacing: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", float(self.spacing))
        if len(self.origin) != len(self.dims):
            raise ParameterError("origin and dims must have the same rank")
        if self.rank not in (2, 3):
            raise ParameterError(f"rank must be 2 or 3, got {self.rank}")
        if not self.spacing > 0 or not math.isfinite(self.spacing):
            raise ParameterError("spacing must be positive")
        if any(d < 2 for d in self.dims):
            raise ParameterError("every axis needs at least 2 samples")
        if math.prod(self.dims) > np.iinfo(np.intp).max:
            raise ParameterError("grid too large for the address space")

    @classmethod
    def square(cls, lo: float, hi: float, cells: int, rank: int = 2) -> "Grid":
        """Grid on ``[lo, hi]^rank`` with ``cells`` cells (``cells + 1`` nodes) per axis."""
        h = (hi - lo) / cells
        return cls((lo,) * rank, h, (cells + 1,) * rank)

    @classmethod
    def box(cls, lo: Sequence[float], hi: Sequence[float], h: float) -> "Grid":
        dims = tuple(int(round((b - a) / h)) + 1 for a, b in zip(lo, hi))
        return cls(tuple(lo), h, dims)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def h(self) -> float:
        return self.spacing

    @property
    def upper(self) -> tuple:
        return tuple(o + (d - 1) * self.spacing for o, d in zip(self.origin, self.dims))

    @property
    def extent(self) -> tuple:
        return tuple((d - 1) * self.spacing for d in self.dims)

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing * np.arange(self.dims[k])

    def mesh(self) -> tuple:
        return np.meshgrid(*(self.axis(k) for k in range(self.rank)), indexing="ij")

    def points(self) -> np.ndarray:
        """All node coordinates, shape ``dims + (rank,)``."""
        return np.stack(self.mesh(), axis=-1)

    def node(self, index: Sequence[int]) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * np.asarray(index, dtype=float)

    def nearest_index(self, p) -> tuple:
        p = np.asarray(p, dtype=float)
        idx = np.rint((p - np.asarray(self.origin)) / self.spacing).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.dims) - 1)
        return tuple(int(i) for i in idx)

    def contains(self, p, tol: float = _EDGE_EPS) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        lo = np.asarray(self.origin) - tol * self.spacing
        hi = np.asarray(self.upper) + tol * self.spacing
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def contains_ball(self, ball: "Ball") -> bool:
        c = np.asarray(ball.center)
        return bool(
            np.all(c - ball.radius >= np.asarray(self.origin) - _EDGE_EPS * self.spacing)
            and np.all(c + ball.radius <= np.asarray(self.upper) + _EDGE_EPS * self.spacing)
        )

    def to_json(self) -> dict:
        return {"rank": self.rank, "dims": list(self.dims), "origin": list(self.origin),
                "spacing": self.spacing}


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != self.grid.dims:
            raise ParameterError(f"values shape {v.shape} does not match dims {self.grid.dims}")
        if not np.all(np.isfinite(v)):
            raise ParameterError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "ScalarField":
        return cls(grid, fn(grid.points()))

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.ravel(self.center)))
        if not self.radius > 0:
            raise ParameterError("ball radius must be positive")


Integrand = Union[ScalarField, Callable[[np.ndarray], np.ndarray]]


def _cell_coords(grid: Grid, pts: np.ndarray, check: bool = True):
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] != grid.rank:
        raise ParameterError(f"points must have trailing dimension {grid.rank}")
    if check and not np.all(grid.contains(pts)):
        raise DomainError("point outside the grid rectangle")
    s = (pts - np.asarray(grid.origin)) / grid.spacing
    hi = np.asarray(grid.dims) - 2
    i = np.clip(np.floor(s).astype(np.intp), 0, hi)
    t = np.clip(s - i, 0.0, 1.0)
    return i, t


def sample(f: ScalarField, pts) -> np.ndarray:
    """Multilinear interpolation of ``f`` at an array of points."""
    i, t = _cell_coords(f.grid, pts)
    out = np.zeros(t.shape[:-1])
    n = f.grid.rank
    for corner in range(1 << n):
        bits = [(corner >> k) & 1 for k in range(n)]
        w = np.ones(t.shape[:-1])
        idx = []
        for k, b in enumerate(bits):
            w = w * (t[..., k] if b else 1.0 - t[..., k])
            idx.append(i[..., k] + b)
        out += w * f.values[tuple(idx)]
    return out


def eval_bilinear(f: ScalarField, p) -> float:
    """Value of the multilinear interpolant of ``f`` at a single point."""
    return float(sample(f, np.asarray(p, dtype=float)[None, :])[0])


def sample_gradient(f: ScalarField, pts) -> np.ndarray:
    """Gradient of the multilinear interpolant (cell-wise), shape ``pts.shape``.

    Unlike :func:`gradient` this is exact for piecewise-linear fields whose
    kinks sit on grid lines, which is what the energy quadratures need.
    """
    i, t = _cell_coords(f.grid, pts)
    n = f.grid.rank
    out = np.zeros(t.shape)
    for corner in range(1 << n):
        bits = [(corner >> k) & 1 for k in range(n)]
        idx = tuple(i[..., k] + b for k, b in enumerate(bits))
        val = f.values[idx]
        for a in range(n):
            w = np.ones(t.shape[:-1])
            for k, b in enumerate(bits):
                if k == a:
                    w = w * (1.0 if b else -1.0)
                else:
                    w = w * (t[..., k] if b else 1.0 - t[..., k])
            out[..., a] += w * val
    return out / f.grid.spacing


def gradient(f: ScalarField) -> np.ndarray:
    """Nodal gradient, shape ``dims + (rank,)``: centered inside, one-sided at faces."""
    if any(d < 3 for d in f.grid.dims):
        raise ParameterError("gradient needs at least 3 samples per axis")
    parts = np.gradient(f.values, f.grid.spacing, edge_order=1)
    if f.grid.rank == 1:
        parts = [parts]
    return np.stack(parts, axis=-1)


def _evaluate(integrand: Integrand, pts: np.ndarray) -> np.ndarray:
    if isinstance(integrand, ScalarField):
        return sample(integrand, pts)
    return np.asarray(integrand(pts), dtype=float)


def default_n_theta(r: float, h: float) -> int:
    return max(64, math.ceil(2 * math.pi * r / h))


def sphere_nodes(ball: Ball, n_theta: int):
    """Quadrature nodes and weights on the boundary sphere of ``ball``.

    Rank 2: equispaced trapezoid. Rank 3: Gauss-Legendre in the polar cosine
    times trapezoid in azimuth.
    """
    c = np.asarray(ball.center)
    r = ball.radius
    if c.size == 2:
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
        w = np.full(n_theta, 2 * np.pi * r / n_theta)
        return c + r * dirs, dirs, w
    n_pol = max(8, n_theta // 2)
    z, wz = np.polynomial.legendre.leggauss(n_pol)
    ph = 2 * np.pi * np.arange(n_theta) / n_theta
    Z, P = np.meshgrid(z, ph, indexing="ij")
    s = np.sqrt(1 - Z**2)
    dirs = np.stack([s * np.cos(P), s * np.sin(P), Z], axis=-1).reshape(-1, 3)
    w = (wz[:, None] * np.full(n_theta, 2 * np.pi / n_theta)[None, :]).ravel() * r**2
    return c + r * dirs, dirs, w


def circle_integral(f: Integrand, b: Ball, n_theta: int | None = None,
                    grid: Grid | None = None) -> float:
    """Surface integral of ``f`` over the boundary of ``b`` (trapezoid in angle)."""
    grid = f.grid if isinstance(f, ScalarField) else grid
    if grid is None:
        raise ParameterError("a grid is needed for callable integrands")
    if not grid.contains_ball(b):
        raise DomainError("circle leaves the grid")
    if n_theta is None:
        n_theta = default_n_theta(b.radius, grid.spacing)
    if n_theta < 16:
        raise ParameterError("n_theta must be at least 16")
    pts, _, w = sphere_nodes(b, n_theta)
    return float(np.dot(w, _evaluate(f, pts)))


_SUB = 16


def ball_integral(f: Integrand, b: Ball, grid: Grid | None = None) -> float:
    """Volume integral of ``f`` over ``b``.

    Cells entirely inside use the cell-center value; cells cut by the sphere
    are subsampled 4 per axis and only subsamples inside the ball count.
    """
    grid = f.grid if isinstance(f, ScalarField) else grid
    if grid is None:
        raise ParameterError("a grid is needed for callable integrands")
    if not grid.contains_ball(b):
        raise DomainError("ball leaves the grid")
    h = grid.spacing
    n = grid.rank
    c = np.asarray(b.center)
    org = np.asarray(grid.origin)
    lo = np.maximum(np.floor((c - b.radius - org) / h).astype(int), 0)
    hi = np.minimum(np.ceil((c + b.radius - org) / h).astype(int), np.asarray(grid.dims) - 1)
    axes = [org[k] + h * (np.arange(lo[k], hi[k]) + 0.5) for k in range(n)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    d = np.linalg.norm(centers - c, axis=-1)
    half_diag = 0.5 * h * math.sqrt(n)
    inner = centers[d + half_diag <= b.radius]
    rim = centers[(d - half_diag < b.radius) & (d + half_diag > b.radius)]
    total = float(np.sum(_evaluate(f, inner))) * h**n if len(inner) else 0.0
    if len(rim):
        off = (np.arange(_SUB) + 0.5) / _SUB - 0.5
        sub = np.stack(np.meshgrid(*([off] * n), indexing="ij"), axis=-1).reshape(-1, n) * h
        pts = (rim[:, None, :] + sub[None, :, :]).reshape(-1, n)
        keep = np.linalg.norm(pts - c, axis=-1) < b.radius
        if np.any(keep):
            total += float(np.sum(_evaluate(f, pts[keep]))) * h**n / _SUB**n
    return total


def rescale(f: ScalarField, x0, r: float, out_grid: Grid) -> ScalarField:
    """Blow-up ``x -> f(x0 + r x) / r`` sampled on ``out_grid``."""
    if r <= 0:
        raise ParameterError("scale must be positive")
    pts = np.asarray(x0, dtype=float) + r * out_grid.points()
    if not np.all(f.grid.contains(pts)):
        raise DomainError("rescaled grid pulls back outside the source grid")
    return ScalarField(out_grid, sample(f, pts) / r)


# --- file format -----------------------------------------------------------

def save_field(f: ScalarField, stem: Union[str, Path]) -> tuple:
    """Write ``<stem>.json`` (header) and ``<stem>.raw`` (little-endian f64, row-major)."""
    stem = Path(stem)
    header = dict(f.grid.to_json(), dtype="f64-le")
    js = stem.with_name(stem.name + ".json")
    raw = stem.with_name(stem.name + ".raw")
    js.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    raw.write_bytes(np.ascontiguousarray(f.values, dtype="<f8").tobytes(order="C"))
    return js, raw


def load_field(stem: Union[str, Path]) -> ScalarField:
    stem = Path(stem)
    if stem.suffix in (".json", ".raw"):
        stem = stem.with_suffix("")
    header = json.loads(stem.with_name(stem.name + ".json").read_text())
    if header.get("dtype") != "f64-le":
        raise ParameterError(f"unsupported dtype {header.get('dtype')!r}")
    grid = Grid(tuple(header["origin"]), header["spacing"], tuple(header["dims"]))
    if header.get("rank", grid.rank) != grid.rank:
        raise ParameterError("header rank does not match dims")
    data = np.frombuffer(stem.with_name(stem.name + ".raw").read_bytes(), dtype="<f8")
    if data.size != math.prod(grid.dims):
        raise ParameterError("raw file size does not match header dims")
    return ScalarField(grid, data.reshape(grid.dims))


def export_pgm(f: ScalarField, path: Union[str, Path]) -> Path:
    """8-bit binary PGM, min-max scaled, x2 increasing upward."""
    if f.grid.rank != 2:
        raise ParameterError("PGM export needs a rank-2 field")
    v = f.values
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.round(255 * scaled).astype(np.uint8).T[::-1]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path

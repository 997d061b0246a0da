"""Free-boundary extraction and metric audits of the positivity set.

All routines work on rank-2 fields. The free boundary is the contour of
``{u > 0}``; distances to it are exact point-to-segment distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from fblab.errors import DomainError, ParameterError, ResolutionError
from fblab.field import Ball, Grid, ScalarField, sample
from fblab.problem import AlmostMinParams, WeightField
from fblab.solver import energy, harmonic_measure_batch, harmonic_replace

TAU_DISC = 5e-3


def _require_rank2(grid: Grid):
    if grid.rank != 2:
        raise ParameterError("geometry routines are implemented for rank 2 only")


# --- extraction -------------------------------------------------------------------

@dataclass(frozen=True)
class Polyline:
    points: np.ndarray   # (k, 2)
    normals: np.ndarray  # (k, 2), unit, pointing into {u > 0}
    closed: bool

    def segments(self) -> np.ndarray:
        p = self.points
        if self.closed and len(p) > 2:
            return np.stack([p, np.roll(p, -1, axis=0)], axis=1)
        return np.stack([p[:-1], p[1:]], axis=1)


@dataclass(frozen=True)
class FreeBoundary:
    grid: Grid
    polylines: tuple = field(default=())

    @property
    def empty(self) -> bool:
        return not any(len(p.points) >= 2 for p in self.polylines)

    def vertices(self) -> np.ndarray:
        if not self.polylines:
            return np.zeros((0, 2))
        return np.concatenate([p.points for p in self.polylines])

    def normals(self) -> np.ndarray:
        if not self.polylines:
            return np.zeros((0, 2))
        return np.concatenate([p.normals for p in self.polylines])

    def segments(self) -> np.ndarray:
        segs = [p.segments() for p in self.polylines if len(p.points) >= 2]
        return np.concatenate(segs) if segs else np.zeros((0, 2, 2))

    def length(self) -> float:
        s = self.segments()
        return float(np.sum(np.linalg.norm(s[:, 1] - s[:, 0], axis=-1)))

    @cached_property
    def _index(self) -> "_SegmentIndex":
        if self.empty:
            raise DomainError("free boundary is empty")
        return _SegmentIndex(self.segments())

    @cached_property
    def node_distance(self) -> np.ndarray:
        """Boundary distance at every grid node.

        Each node takes the exact distance to the segments owning its 8
        nearest samples of the polylines (sample spacing ``h/4``). The result
        is an upper bound within ``h/8`` of the exact distance, and within
        ``h^2/(128 d)`` at distance ``d``; it is used for path searches, while
        reported clearances use :func:`fb_distance`.
        """
        segs = self.segments()
        if len(segs) == 0:
            raise DomainError("free boundary is empty")
        step = 0.25 * self.grid.spacing
        lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=-1)
        counts = np.maximum(np.ceil(lengths / step).astype(int), 1)
        owner = np.repeat(np.arange(len(segs)), counts)
        frac = (np.arange(owner.size) - np.repeat(np.cumsum(counts) - counts, counts)) / counts[owner]
        samples = segs[owner, 0] + frac[:, None] * (segs[owner, 1] - segs[owner, 0])
        tree = cKDTree(samples)
        pts = self.grid.points().reshape(-1, 2)
        out = np.empty(len(pts))
        index = self._index
        k = min(8, len(samples))
        for start in range(0, len(pts), 16384):
            chunk = pts[start:start + 16384]
            _, nn = tree.query(chunk, k=k)
            nn = nn.reshape(len(chunk), k)
            out[start:start + len(chunk)] = np.min(index._exact(chunk, owner[nn]), axis=-1)
        return out.reshape(self.grid.dims)

    def rows(self) -> list:
        """One dict per vertex: polyline id, position, normal."""
        out = []
        for k, p in enumerate(self.polylines):
            for q, nv in zip(p.points, p.normals):
                out.append({"polyline": k, "x": float(q[0]), "y": float(q[1]),
                            "nx": float(nv[0]), "ny": float(nv[1])})
        return out


def _crossing(ua, ub, uc):
    """Parameter from the non-positive node ``a`` towards the positive node ``b``.

    ``uc`` is the next sample beyond ``b`` on the same grid line (NaN when off
    the grid). When ``u(a) < 0`` this is ordinary linear interpolation. When
    ``u(a) == 0`` the sample only says that ``a`` is on the zero plateau, so
    the crossing is extrapolated from the slope between ``b`` and ``c``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -ua / (ub - ua)
        slope = uc - ub
        ext = 1.0 - ub / slope
    plateau = (ua == 0) & np.isfinite(uc) & (slope > 0)
    t = np.where(plateau, ext, t)
    return np.clip(t, 0.0, 1.0)


def _cell_grad(v, i, j, s, t, h):
    """Gradient of the bilinear interpolant on cell ``(i, j)`` at local ``(s, t)``."""
    f00, f10 = v[i, j], v[i + 1, j]
    f01, f11 = v[i, j + 1], v[i + 1, j + 1]
    gx = ((f10 - f00) * (1 - t) + (f11 - f01) * t) / h
    gy = ((f01 - f00) * (1 - s) + (f11 - f10) * s) / h
    return np.stack([gx, gy], axis=-1)


def extract_boundary(u: ScalarField) -> FreeBoundary:
    """Marching-squares contour of ``{u > 0}``.

    Crossings are placed by linear interpolation along cell edges (see
    :func:`_crossing` for zero-plateau nodes); four-crossing cells are split
    by the sign of the cell-centre value. Normals are perpendicular to the
    polyline tangent and point towards ``u > 0`` (see :func:`_tangent_normals`).
    """
    g = u.grid
    _require_rank2(g)
    v = u.values
    n0, n1 = v.shape
    h = g.spacing
    pos = v > 0
    if pos.all() or not pos.any():
        return FreeBoundary(g, ())

    nh = (n0 - 1) * n1

    def hid(i, j):
        return i * n1 + j

    def vid(i, j):
        return nh + i * (n1 - 1) + j

    a = pos[:-1, :-1]
    b = pos[1:, :-1]
    c = pos[1:, 1:]
    d = pos[:-1, 1:]
    ii, jj = np.meshgrid(np.arange(n0 - 1), np.arange(n1 - 1), indexing="ij")
    # edges: 0 = a-b (bottom), 1 = b-c (right), 2 = d-c (top), 3 = a-d (left)
    ids = np.stack([hid(ii, jj), vid(ii + 1, jj), hid(ii, jj + 1), vid(ii, jj)], axis=-1)
    cross = np.stack([a != b, b != c, d != c, a != d], axis=-1)
    ncross = cross.sum(axis=-1)

    seg_a, seg_b = [], []
    two = ncross == 2
    e = ids[two]
    cr = cross[two]
    first = np.argmax(cr, axis=-1)
    last = 3 - np.argmax(cr[:, ::-1], axis=-1)
    rows = np.arange(len(e))
    seg_a.append(e[rows, first])
    seg_b.append(e[rows, last])

    four = ncross == 4
    if np.any(four):
        fi, fj = ii[four], jj[four]
        centre = 0.25 * (v[fi, fj] + v[fi + 1, fj] + v[fi + 1, fj + 1] + v[fi, fj + 1])
        a_pos = pos[fi, fj]
        ef = ids[four]
        # corners cut off: the ones whose sign differs from the centre's
        cut_ac = (centre > 0) != a_pos  # True: cut corners a and c, else b and d
        for k in range(len(ef)):
            if cut_ac[k]:
                pairs = ((0, 3), (1, 2))
            else:
                pairs = ((0, 1), (2, 3))
            for p, q in pairs:
                seg_a.append(np.array([ef[k, p]]))
                seg_b.append(np.array([ef[k, q]]))
    sa = np.concatenate(seg_a)
    sb = np.concatenate(seg_b)

    # crossing points and normals per edge id
    used = np.unique(np.concatenate([sa, sb]))
    pts = {}
    nrm = {}
    org = np.asarray(g.origin)
    is_h = used < nh
    hu = used[is_h]
    vu = used[~is_h] - nh
    for kind, idx in (("h", hu), ("v", vu)):
        if kind == "h":
            i, j = idx // n1, idx % n1
            pa, pb = (i, j), (i + 1, j)
            step = np.array([1, 0])
        else:
            i, j = idx // (n1 - 1), idx % (n1 - 1)
            pa, pb = (i, j), (i, j + 1)
            step = np.array([0, 1])
        ua, ub = v[pa], v[pb]
        a_is_pos = ua > 0
        # orient each edge from its non-positive end to its positive end
        lo = (np.where(a_is_pos, pb[0], pa[0]), np.where(a_is_pos, pb[1], pa[1]))
        hi = (np.where(a_is_pos, pa[0], pb[0]), np.where(a_is_pos, pa[1], pb[1]))
        sgn = np.where(a_is_pos, -1, 1)
        beyond = (hi[0] + sgn * step[0], hi[1] + sgn * step[1])
        ok = (beyond[0] >= 0) & (beyond[0] < n0) & (beyond[1] >= 0) & (beyond[1] < n1)
        bc = (np.clip(beyond[0], 0, n0 - 1), np.clip(beyond[1], 0, n1 - 1))
        uc = np.where(ok, v[bc], np.nan)
        t = _crossing(v[lo], v[hi], uc)
        frac = np.where(a_is_pos, 1.0 - t, t)  # parameter from node pa
        p = np.stack([i + frac * step[0], j + frac * step[1]], axis=-1).astype(float)
        # gradient averaged over the (one or two) cells sharing the edge
        grads = np.zeros((len(idx), 2))
        count = np.zeros(len(idx))
        for off in (0, -1):
            if kind == "h":
                ci, cj = i, j + off
                s_loc, t_loc = frac, np.full(len(idx), -float(off))
            else:
                ci, cj = i + off, j
                s_loc, t_loc = np.full(len(idx), -float(off)), frac
            valid = (ci >= 0) & (ci < n0 - 1) & (cj >= 0) & (cj < n1 - 1)
            if np.any(valid):
                gv = _cell_grad(v, ci[valid], cj[valid], s_loc[valid], t_loc[valid], h)
                grads[valid] += gv
                count[valid] += 1
        grads /= np.maximum(count, 1)[:, None]
        toward = np.where(a_is_pos[:, None], -step[None, :], step[None, :]).astype(float)
        norm = np.linalg.norm(grads, axis=-1)
        bad = (norm <= 1e-14 * max(u.sup(), 1e-300)) | (np.sum(grads * toward, axis=-1) <= 0)
        grads[bad] = toward[bad]
        grads /= np.linalg.norm(grads, axis=-1)[:, None]
        for k, eid in enumerate(idx + (0 if kind == "h" else nh)):
            pts[int(eid)] = org + h * p[k]
            nrm[int(eid)] = grads[k]

    # chain segments through shared edges
    adj: dict = {}
    for k, (x, y) in enumerate(zip(sa.tolist(), sb.tolist())):
        adj.setdefault(x, []).append(k)
        adj.setdefault(y, []).append(k)
    seg_used = np.zeros(len(sa), dtype=bool)
    polylines = []

    def walk(start_edge, start_seg):
        chain = [start_edge]
        cur_edge, seg = start_edge, start_seg
        while seg is not None and not seg_used[seg]:
            seg_used[seg] = True
            nxt = sb[seg] if sa[seg] == cur_edge else sa[seg]
            nxt = int(nxt)
            if nxt == chain[0]:
                return chain, True
            chain.append(nxt)
            cur_edge = nxt
            seg = next((s for s in adj[cur_edge] if not seg_used[s]), None)
        return chain, False

    ends = sorted(e_ for e_, segs in adj.items() if len(segs) == 1)
    for e0 in ends:
        s0 = adj[e0][0]
        if not seg_used[s0]:
            polylines.append(walk(e0, s0))
    for s0 in range(len(sa)):
        if not seg_used[s0]:
            polylines.append(walk(int(min(sa[s0], sb[s0])), s0))

    out = []
    for chain, closed in polylines:
        p = np.array([pts[e_] for e_ in chain])
        q = np.array([nrm[e_] for e_ in chain])
        if len(p) >= 2:
            tang = np.gradient(p, axis=0)
            left = np.stack([-tang[:, 1], tang[:, 0]], axis=-1)
            if np.sum(left * q) < 0:
                p, q = p[::-1].copy(), q[::-1].copy()
                left = -left[::-1]
            q = _tangent_normals(left, q, h)
        out.append(Polyline(p, q, bool(closed)))
    return FreeBoundary(g, tuple(out))


def _tangent_normals(left: np.ndarray, grad_n: np.ndarray, h: float) -> np.ndarray:
    """Unit normals from the polyline tangent, with the gradient normal as fallback.

    The interpolant's gradient is biased in cells that touch the zero plateau,
    while the crossings are not, so the tangent gives the better direction.
    Vertices with a degenerate tangent or a normal on the wrong side keep the
    gradient normal.
    """
    norm = np.linalg.norm(left, axis=-1)
    ok = norm > 0.1 * h
    t = np.where(ok[:, None], left / np.where(ok, norm, 1.0)[:, None], grad_n)
    ok &= np.sum(t * grad_n, axis=-1) > 0
    return np.where(ok[:, None], t, grad_n)


# --- distances ----------------------------------------------------------------------

class _SegmentIndex:
    """Exact point-to-polyline distance with a k-d tree prefilter on midpoints."""

    K = 16

    def __init__(self, segs: np.ndarray):
        self.a = segs[:, 0]
        self.d = segs[:, 1] - segs[:, 0]
        self.dd = np.maximum(np.sum(self.d * self.d, axis=-1), 1e-300)
        mid = self.a + 0.5 * self.d
        self.half = 0.5 * float(np.max(np.sqrt(self.dd)))
        self.tree = cKDTree(mid)
        self.m = len(segs)

    def _exact(self, p, idx):
        a = self.a[idx]
        d = self.d[idx]
        s = np.clip(np.sum((p[..., None, :] - a) * d, axis=-1) / self.dd[idx], 0.0, 1.0)
        q = a + s[..., None] * d
        return np.linalg.norm(p[..., None, :] - q, axis=-1)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        k = min(self.K, self.m)
        dk, idx = self.tree.query(pts, k=k)
        if k == 1:
            dk, idx = dk[:, None], idx[:, None]
        out = np.min(self._exact(pts, idx), axis=-1)
        if k < self.m:
            bad = np.nonzero(dk[:, -1] - self.half < out)[0]
            all_idx = np.arange(self.m)
            for start in range(0, len(bad), 256):
                sel = bad[start:start + 256]
                out[sel] = np.min(self._exact(pts[sel], all_idx), axis=-1)
        return out


def fb_distance(fb: FreeBoundary, p):
    """Distance from ``p`` (one point or an array of points) to the polylines."""
    p = np.asarray(p, dtype=float)
    d = fb._index.distance(p)
    return float(d[0]) if p.ndim == 1 else d.reshape(p.shape[:-1])


def _edge_distance(grid: Grid, pts: np.ndarray) -> np.ndarray:
    lo = np.asarray(grid.origin)
    hi = np.asarray(grid.upper)
    return np.min(np.concatenate([pts - lo, hi - pts], axis=-1), axis=-1)


def _window(grid: Grid, center, radius: float):
    org = np.asarray(grid.origin)
    lo = np.maximum(np.floor((np.asarray(center) - radius - org) / grid.spacing).astype(int), 0)
    hi = np.minimum(np.ceil((np.asarray(center) + radius - org) / grid.spacing).astype(int) + 1,
                    np.asarray(grid.dims))
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def _window_points(grid: Grid, sl) -> np.ndarray:
    axes = [grid.origin[k] + grid.spacing * np.arange(s.start, s.stop) for k, s in enumerate(sl)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# --- corkscrews ---------------------------------------------------------------------

@dataclass(frozen=True)
class Corkscrew:
    x: tuple
    r: float
    side: str
    found: bool
    point: Optional[tuple] = None
    clearance: float = 0.0
    reason: str = ""

    @property
    def constant(self) -> float:
        """Achieved ``C1 = r / clearance`` (infinite on failure)."""
        return self.r / self.clearance if self.found and self.clearance > 0 else math.inf


def corkscrew(u: ScalarField, fb: FreeBoundary, x, r: float, side: str = "interior") -> Corkscrew:
    """Grid node of ``B(x, r/2)`` on the requested side farthest from the boundary.

    ``side`` is ``"interior"`` (``u > 0``) or ``"exterior"`` (``u <= 0``). Ties
    go to the lexicographically smallest node index. Failures are returned,
    not raised.
    """
    g = u.grid
    _require_rank2(g)
    if side not in ("interior", "exterior"):
        raise ParameterError("side must be 'interior' or 'exterior'")
    x = tuple(float(c) for c in x)
    if not g.contains_ball(Ball(x, r)):
        raise DomainError("corkscrew ball leaves the grid")
    if r < 2 * g.spacing:
        return Corkscrew(x, r, side, False, reason="radius below 2h")
    sl = _window(g, x, 0.5 * r)
    pts = _window_points(g, sl)
    vals = u.values[sl]
    inside = np.linalg.norm(pts - np.asarray(x), axis=-1) < 0.5 * r
    cand = inside & ((vals > 0) if side == "interior" else (vals <= 0))
    if not np.any(cand):
        return Corkscrew(x, r, side, False, reason=f"no {side} node in B(x, r/2)")
    dist = np.full(vals.shape, -np.inf)
    dist[cand] = fb_distance(fb, pts[cand])
    k = int(np.argmax(dist))  # first maximum in C order = lexicographic tie-break
    loc = np.unravel_index(k, vals.shape)
    return Corkscrew(x, r, side, True, tuple(float(c) for c in pts[loc]), float(dist[loc]))


# --- Harnack chains -----------------------------------------------------------------

@dataclass(frozen=True)
class HarnackChain:
    x: tuple
    y: tuple
    ok: bool
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clearance: float = 0.0
    retried: bool = False
    ell: int = 1
    c2: float = math.inf
    reason: str = ""

    @property
    def n(self) -> int:
        return len(self.radii)

    @property
    def c3(self) -> float:
        """Achieved ``C3`` in ``N <= C3 * ell + 1``."""
        return (self.n - 1) / self.ell if self.ok else math.inf


def _chain_ell(x, y, dmin: float) -> int:
    d = float(np.linalg.norm(np.asarray(x) - np.asarray(y)))
    if d <= 0 or dmin <= 0:
        return 1
    return max(int(math.ceil(math.log2(d / dmin))), 0) + 1


def _delta_u(fb: FreeBoundary, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Distance to the boundary of ``{u > 0}`` inside the grid rectangle."""
    return np.minimum(fb_distance(fb, pts), _edge_distance(grid, pts))


def harnack_chain(u: ScalarField, fb: FreeBoundary, x, y) -> HarnackChain:
    """Chain of balls ``B(p, delta(p)/2)`` joining ``x`` to ``y`` inside ``{u > 0}``.

    The path is a Dijkstra shortest path on the 8-neighbour grid graph of
    positive nodes with boundary distance at least ``min(delta(x), delta(y))/2``
    (halved once if no path exists). Edge lengths are weighted by
    ``1/delta``, so the path is a discrete quasi-hyperbolic geodesic. Balls are
    placed along the path so that consecutive centres are at most ``delta/4``
    apart; the straight segment is used instead when it keeps the clearance
    and gives a shorter chain.
    """
    g = u.grid
    _require_rank2(g)
    x = tuple(float(c) for c in x)
    y = tuple(float(c) for c in y)
    xa, ya = np.asarray(x), np.asarray(y)
    for p in (xa, ya):
        if not g.contains(p) or u.values[g.nearest_index(p)] <= 0:
            raise ParameterError("chain endpoints must lie in the positivity set")
    dx, dy = (float(v) for v in _delta_u(fb, g, np.stack([xa, ya])))
    ell = _chain_ell(x, y, min(dx, dy))
    if np.allclose(xa, ya):
        return HarnackChain(x, y, True, xa[None, :], np.array([0.5 * dx]), min(dx, dy), False,
                            ell, 2.0)
    dist = float(np.linalg.norm(xa - ya))
    sl = _window(g, 0.5 * (xa + ya), dist + 4 * max(dx, dy))
    pts = _window_points(g, sl)
    posm = u.values[sl] > 0
    delta = np.where(posm, np.minimum(fb.node_distance[sl], _edge_distance(g, pts)), 0.0)
    c = 0.5 * min(dx, dy)
    for attempt in range(2):
        path = _grid_path(pts, delta, posm & (delta >= c), xa, ya, g.spacing)
        if path is not None:
            centers, radii = _place_balls(path, fb, g)
            straight = _straight_path(u, fb, xa, ya, c)
            if straight is not None:
                alt = _place_balls(straight, fb, g)
                if len(alt[0]) < len(centers):
                    centers, radii = alt
            dist_b = _delta_u(fb, g, centers) - radii
            diam = 2 * radii
            with np.errstate(divide="ignore"):
                c2 = float(np.max(np.maximum(diam / dist_b, dist_b / diam)))
            return HarnackChain(x, y, True, centers, radii, c, attempt == 1, ell, c2)
        c *= 0.5
    return HarnackChain(x, y, False, clearance=2 * c, retried=True, ell=ell,
                        reason="no path at clearance min(delta)/4")


def _straight_path(u, fb, xa, ya, c):
    """The segment ``[x, y]`` when it keeps boundary distance ``c`` and ``u > 0``."""
    g = u.grid
    n = max(2, int(np.ceil(np.linalg.norm(ya - xa) / (0.5 * g.spacing))) + 1)
    seg = xa + np.linspace(0.0, 1.0, n)[:, None] * (ya - xa)
    if np.any(_delta_u(fb, g, seg) < c) or np.any(sample(u, seg) <= 0):
        return None
    return seg


def _grid_path(pts, delta, allowed, xa, ya, h):
    shape = allowed.shape
    flat = np.flatnonzero(allowed)
    if flat.size == 0:
        return None
    lab = -np.ones(allowed.size, dtype=np.int64)
    lab[flat] = np.arange(flat.size)
    lab = lab.reshape(shape)
    p2 = pts.reshape(-1, 2)[flat]

    def nearest(p):
        d = np.linalg.norm(p2 - p, axis=-1)
        k = int(np.argmin(d))
        return k if d[k] <= 1.5 * math.sqrt(2) * h else None

    s, t = nearest(xa), nearest(ya)
    if s is None or t is None:
        return None
    n0, n1 = shape
    dflat = delta.reshape(-1)[flat]
    rows, cols, wts = [], [], []
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        ra, rb = slice(0, n0 - di), slice(di, n0)
        ca, cb = (slice(0, n1 - dj), slice(dj, n1)) if dj >= 0 else (slice(1, n1), slice(0, n1 - 1))
        a, b = lab[ra, ca], lab[rb, cb]
        m = (a >= 0) & (b >= 0)
        ia, ib = a[m], b[m]
        w = 2.0 * np.linalg.norm(p2[ia] - p2[ib], axis=-1) / (dflat[ia] + dflat[ib])
        rows += [ia, ib]
        cols += [ib, ia]
        wts += [w, w]
    n = flat.size
    graph = sparse.csr_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, n))
    dist, pred = csgraph.dijkstra(graph, indices=s, return_predecessors=True)
    if not np.isfinite(dist[t]):
        return None
    seq = [t]
    while seq[-1] != s:
        seq.append(int(pred[seq[-1]]))
    path = p2[seq[::-1]]
    return np.concatenate([xa[None, :], path, ya[None, :]])


def _place_balls(path, fb, grid):
    # walk the polyline; each new center is where the path exits B(c, delta(c)/4)
    centers = [path[0]]
    step = 0.25 * float(_delta_u(fb, grid, path[:1])[0])
    last = 0.25 * float(_delta_u(fb, grid, path[-1:])[0])
    k = 0
    # spacing is measured against the larger of the two neighbouring balls
    while np.linalg.norm(path[-1] - centers[-1]) > max(step, last):
        c = centers[-1]
        while np.linalg.norm(path[k + 1] - c) <= step:
            k += 1
        a, d = path[k] - c, path[k + 1] - path[k]
        A, B, C = d @ d, 2 * (a @ d), a @ a - step * step
        t = (-B + np.sqrt(max(B * B - 4 * A * C, 0.0))) / (2 * A)
        nxt = path[k] + min(max(t, 0.0), 1.0) * d
        centers.append(nxt)
        step = 0.25 * float(_delta_u(fb, grid, nxt[None])[0])
        if step <= 0:
            break
    centers.append(path[-1])
    centers = np.asarray(centers)
    return centers, 0.5 * _delta_u(fb, grid, centers)


# --- Ahlfors, flatness ---------------------------------------------------------------

def _clip_to_disk(segs: np.ndarray, c, r: float):
    """Parameter interval of each segment inside the closed disk ``B(c, r)``."""
    a = segs[:, 0] - np.asarray(c)
    d = segs[:, 1] - segs[:, 0]
    A = np.sum(d * d, axis=-1)
    B = 2 * np.sum(a * d, axis=-1)
    C = np.sum(a * a, axis=-1) - r * r
    disc = B * B - 4 * A * C
    ok = (disc > 0) & (A > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = np.where(ok, (-B - sq) / (2 * A), 1.0)
        s1 = np.where(ok, (-B + sq) / (2 * A), 0.0)
    s0 = np.clip(s0, 0.0, 1.0)
    s1 = np.clip(s1, 0.0, 1.0)
    keep = s1 > s0
    return s0, s1, keep


def ahlfors_ratio(fb: FreeBoundary, x, r: float) -> float:
    """Polyline length inside ``B(x, r)`` divided by ``2r``."""
    g = fb.grid
    if r < 4 * g.spacing:
        raise ResolutionError("ahlfors_ratio needs r >= 4h")
    if not g.contains_ball(Ball(x, r)):
        raise DomainError("Ahlfors ball leaves the grid")
    segs = fb.segments()
    if len(segs) == 0:
        return 0.0
    s0, s1, keep = _clip_to_disk(segs, x, r)
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=-1)
    return float(np.sum((lengths * (s1 - s0))[keep]) / (2 * r))


def _sample_inside(fb: FreeBoundary, x0, r: float, step: float) -> np.ndarray:
    segs = fb.segments()
    if len(segs) == 0:
        return np.zeros((0, 2))
    s0, s1, keep = _clip_to_disk(segs, x0, r)
    out = []
    for seg, a, b in zip(segs[keep], s0[keep], s1[keep]):
        p, q = seg[0] + a * (seg[1] - seg[0]), seg[0] + b * (seg[1] - seg[0])
        m = max(int(math.ceil(np.linalg.norm(q - p) / step)), 1)
        t = np.linspace(0.0, 1.0, m + 1)[:, None]
        out.append(p + t * (q - p))
    return np.concatenate(out) if out else np.zeros((0, 2))


def hausdorff_flatness(fb: FreeBoundary, x0, r: float, e) -> float:
    """Two-sided Hausdorff distance between the boundary and the hyperplane
    through ``x0`` normal to ``e``, both restricted to ``B(x0, r)``, over ``r``."""
    g = fb.grid
    if not g.contains_ball(Ball(x0, r)):
        raise DomainError("flatness ball leaves the grid")
    e = np.asarray(e, dtype=float)
    e = e / np.linalg.norm(e)
    step = 0.5 * g.spacing
    gam = _sample_inside(fb, x0, r, step)
    if len(gam) == 0:
        raise DomainError("no boundary inside the ball")
    x0 = np.asarray(x0, dtype=float)
    d1 = float(np.max(np.abs((gam - x0) @ e)))
    perp = np.array([-e[1], e[0]])
    s = np.linspace(-r, r, max(int(math.ceil(2 * r / step)), 1) + 1)
    line = x0 + s[:, None] * perp
    segs = fb.segments()
    a0, a1, keep = _clip_to_disk(segs, x0, r)
    segs = segs[keep]
    pa = segs[:, 0] + a0[keep, None] * (segs[:, 1] - segs[:, 0])
    pb = segs[:, 0] + a1[keep, None] * (segs[:, 1] - segs[:, 0])
    d2 = 0.0
    for chunk in np.array_split(line, max(len(line) // 256, 1)):
        d2 = max(d2, float(np.max(np.min(_point_segment_distance(chunk, pa, pb), axis=1))))
    return max(d1, d2) / r


def _point_segment_distance(pts: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Distances of shape ``(len(pts), len(pa))`` from points to segments ``[pa, pb]``."""
    d = pb - pa
    dd = np.maximum(np.sum(d * d, axis=-1), 1e-300)
    rel = pts[:, None, :] - pa[None, :, :]
    t = np.clip(np.sum(rel * d[None], axis=-1) / dd[None], 0.0, 1.0)
    return np.linalg.norm(rel - t[..., None] * d[None], axis=-1)


# --- almost-minimality and replacement -------------------------------------------------

@dataclass(frozen=True)
class AminReport:
    x: tuple
    r: float
    j_u: float
    j_v: float
    defect: float
    bound: float
    passed: bool
    degenerate: bool = False


def verify_almost_min(u: ScalarField, w: WeightField, amp: AlmostMinParams, x, r: float,
                      tau_disc: float = TAU_DISC) -> AminReport:
    """Compare ``J_{x,r}(u)`` with its harmonic-replacement competitor."""
    x = tuple(float(c) for c in x)
    b = Ball(x, r)
    if not u.grid.contains_ball(b):
        raise DomainError("ball leaves the grid")
    v = harmonic_replace(u, w, b)
    ju = energy(u, w, region=b)
    jv = energy(v, w, region=b)
    bound = amp.bound(r) + tau_disc
    if jv <= 0:
        return AminReport(x, r, ju, jv, math.nan, bound, False, True)
    defect = ju / jv - 1.0
    return AminReport(x, r, ju, jv, defect, bound, bool(defect <= bound))


def replacement_comparability(u: ScalarField, w: WeightField, fb: FreeBoundary, x0, r: float,
                              alpha: float) -> dict:
    """``sup |h/u - 1|`` over nodes of ``B(x0, r)`` with ``delta >= r^(1 + alpha/16)``."""
    g = u.grid
    b = Ball(tuple(float(c) for c in x0), r)
    hrep = harmonic_replace(u, w, b)
    sl = _window(g, x0, r)
    pts = _window_points(g, sl)
    uv = u.values[sl]
    hv = hrep.values[sl]
    inside = (np.linalg.norm(pts - np.asarray(x0), axis=-1) < r) & (uv > 0)
    thresh = r ** (1 + alpha / 16)
    sel = np.zeros_like(inside)
    if np.any(inside):
        d = fb_distance(fb, pts[inside])
        sel[inside] = d >= thresh
    if not np.any(sel):
        return {"x": b.center, "r": r, "threshold": thresh, "n": 0, "value": math.nan}
    val = float(np.max(np.abs(hv[sel] / uv[sel] - 1.0)))
    return {"x": b.center, "r": r, "threshold": thresh, "n": int(sel.sum()), "value": val}


# --- audit points and harmonic measure ---------------------------------------------------

def audit_points(fb: FreeBoundary, n: int = 16, margin: float | None = None):
    """``n`` boundary points equispaced by arc length inside the shrunken rectangle.

    The rectangle is the grid shrunk by ``margin`` on every side (default 10%
    of the smallest extent). Returns ``(points, normals)``.
    """
    g = fb.grid
    if margin is None:
        margin = 0.1 * min(g.extent)
    lo = np.asarray(g.origin) + margin
    hi = np.asarray(g.upper) - margin
    runs = []
    for pl in fb.polylines:
        p, q = pl.points, pl.normals
        if pl.closed and len(p) > 2:
            p = np.concatenate([p, p[:1]])
            q = np.concatenate([q, q[:1]])
        inside = np.all((p >= lo) & (p <= hi), axis=-1)
        k = 0
        while k < len(p):
            if not inside[k]:
                k += 1
                continue
            m = k
            while m < len(p) and inside[m]:
                m += 1
            if m - k >= 2:
                runs.append((p[k:m], q[k:m]))
            k = m
    if not runs or n < 1:
        return np.zeros((0, 2)), np.zeros((0, 2))
    seg_p, seg_q, seg_len = [], [], []
    for p, q in runs:
        seg_p.append(np.stack([p[:-1], p[1:]], axis=1))
        seg_q.append(np.stack([q[:-1], q[1:]], axis=1))
        seg_len.append(np.linalg.norm(p[1:] - p[:-1], axis=-1))
    sp = np.concatenate(seg_p)
    sq = np.concatenate(seg_q)
    sl = np.concatenate(seg_len)
    cum = np.concatenate([[0.0], np.cumsum(sl)])
    total = cum[-1]
    targets = (np.arange(n) + 0.5) * total / n
    k = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(sl) - 1)
    t = np.where(sl[k] > 0, (targets - cum[k]) / np.where(sl[k] > 0, sl[k], 1.0), 0.0)[:, None]
    pts = sp[k, 0] + t * (sp[k, 1] - sp[k, 0])
    nrm = sq[k, 0] + t * (sq[k, 1] - sq[k, 0])
    nrm /= np.maximum(np.linalg.norm(nrm, axis=-1), 1e-300)[:, None]
    return pts, nrm


def harmonic_measure_profile(u: ScalarField, z, pole, radii) -> list:
    """``omega^pole(B(z, r)) / r^(n-1)`` for each radius (one adjoint solve)."""
    radii = [float(r) for r in radii]
    targets = [Ball(tuple(float(c) for c in z), r) for r in radii]
    om = harmonic_measure_batch(u, pole, targets)
    return [{"r": r, "omega": o, "ratio": o / r} for r, o in zip(radii, om)]

"""Laplace relaxation kernels with a compiled fast path.

``sor_solve`` and ``shrink_solve`` dispatch to the Cython extension when it was
built and to the NumPy red-black implementations otherwise. The choice is made
at import; :func:`use_backend` switches it (the benchmark and tests use this).
"""

from __future__ import annotations

import math

import numpy as np

try:  # pragma: no cover - depends on the build
    from fblab._ext.sor import shrink_sor as _shrink_compiled
    from fblab._ext.sor import sor_solve as _sor_compiled
except ImportError:  # pragma: no cover
    _sor_compiled = _shrink_compiled = None

BACKENDS = ("compiled", "python") if _sor_compiled is not None else ("python",)
_backend = BACKENDS[0]


def backend() -> str:
    return _backend


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previous one."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {BACKENDS})")
    prev, _backend = _backend, name
    return prev


def sor_python(u, mask, rhs, omega, tol, max_iter):
    """Red-black SOR in NumPy; same contract as the compiled kernel."""
    n0, n1 = u.shape
    ii, jj = np.meshgrid(np.arange(n0), np.arange(n1), indexing="ij")
    colors = [mask & ((ii + jj) % 2 == c) for c in (0, 1)]
    colors = [(c[1:-1, 1:-1]) for c in colors]
    core = u[1:-1, 1:-1]
    b = rhs[1:-1, 1:-1]
    it = 0
    res = 0.0
    while it < max_iter:
        res = 0.0
        for sel in colors:
            nb = u[:-2, 1:-1] + u[2:, 1:-1] + u[1:-1, :-2] + u[1:-1, 2:]
            r = 0.25 * (nb[sel] + b[sel]) - core[sel]
            core[sel] += omega * r
            if r.size:
                res = max(res, float(np.max(np.abs(r))))
        it += 1
        if res < tol:
            break
    return it, res


def shrink_python(u, mask, shift_pos, shift_neg, lower, omega, tol, max_iter):
    """Red-black version of the compiled ``shrink_sor`` kernel."""
    n0, n1 = u.shape
    ii, jj = np.meshgrid(np.arange(n0), np.arange(n1), indexing="ij")
    colors = [(mask & ((ii + jj) % 2 == c))[1:-1, 1:-1] for c in (0, 1)]
    core = u[1:-1, 1:-1]
    sp = shift_pos[1:-1, 1:-1]
    sn = shift_neg[1:-1, 1:-1]
    it = 0
    res = 0.0
    while it < max_iter:
        res = 0.0
        for sel in colors:
            nb = u[:-2, 1:-1] + u[2:, 1:-1] + u[1:-1, :-2] + u[1:-1, 2:]
            m = 0.25 * nb[sel]
            tp = m - sp[sel]
            tn = m + sn[sel]
            t = np.where(tp > 0, tp, np.where(tn < 0, tn, 0.0))
            t = np.maximum(t, lower)
            old = core[sel]
            if t.size:
                res = max(res, float(np.max(np.abs(t - old))))
            new = old + omega * (t - old)
            new = np.where((t == 0.0) | ((new > 0) != (t > 0)), 0.0, new)
            core[sel] = np.maximum(new, lower)
        it += 1
        if res < tol:
            break
    return it, res


def optimal_omega(h: float, length: float) -> float:
    """Classical SOR relaxation factor for a square of side ``length``."""
    if length <= h:
        return 1.0
    return 2.0 / (1.0 + math.sin(math.pi * h / length))


def sor_solve(u: np.ndarray, mask: np.ndarray, rhs: np.ndarray | None = None,
              omega: float = 1.0, tol: float = 1e-10, max_iter: int = 200_000):
    """Relax ``u`` in place; returns ``(sweeps, residual)``.

    ``mask`` marks unknowns; it is cleared on the array edge before solving.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    m = np.ascontiguousarray(mask, dtype=np.uint8).copy()
    m[0, :] = m[-1, :] = 0
    m[:, 0] = m[:, -1] = 0
    if rhs is None:
        rhs = np.zeros_like(u)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    if _backend == "compiled":
        it, res = _sor_compiled(u, m, rhs, float(omega), float(tol), int(max_iter))
    else:
        it, res = sor_python(u, m.astype(bool), rhs, float(omega), float(tol), int(max_iter))
    return u, int(it), float(res)


def shrink_solve(u: np.ndarray, mask: np.ndarray, shift_pos: np.ndarray,
                 shift_neg: np.ndarray, lower: float = 0.0, omega: float = 1.0,
                 tol: float = 1e-10, max_iter: int = 200_000):
    """Nonlinear SOR for the linearized one-/two-phase subproblem (in place).

    Minimizes ``sum_edges (du)^2 + 8 * sum_i (shift_pos_i u_i^+ + shift_neg_i u_i^-)``
    over the masked nodes subject to ``u >= lower``.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    m = np.ascontiguousarray(mask, dtype=np.uint8).copy()
    m[0, :] = m[-1, :] = 0
    m[:, 0] = m[:, -1] = 0
    sp = np.ascontiguousarray(shift_pos, dtype=np.float64)
    sn = np.ascontiguousarray(shift_neg, dtype=np.float64)
    if _backend == "compiled":
        it, res = _shrink_compiled(u, m, sp, sn, float(lower), float(omega), float(tol), int(max_iter))
    else:
        it, res = shrink_python(u, m.astype(bool), sp, sn, float(lower), float(omega),
                                float(tol), int(max_iter))
    return u, int(it), float(res)

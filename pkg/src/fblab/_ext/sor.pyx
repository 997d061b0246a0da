# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Lexicographic masked SOR for the 5-point Laplacian."""

from libc.math cimport fabs


def sor_solve(double[:, ::1] u, const unsigned char[:, ::1] mask,
              double[:, ::1] rhs, double omega, double tol, long max_iter):
    """Relax ``u`` in place on nodes where ``mask`` is set.

    Solves ``4 u_i - sum(neighbours) = rhs_i`` at masked nodes, all other
    nodes acting as Dirichlet data. Masked nodes must not touch the array
    edge. Returns ``(sweeps, last max |gauss-seidel correction|)``.
    """
    cdef Py_ssize_t n0 = u.shape[0], n1 = u.shape[1]
    cdef Py_ssize_t i, j
    cdef long it = 0
    cdef double res = 0.0, r, a
    with nogil:
        while it < max_iter:
            res = 0.0
            for i in range(1, n0 - 1):
                for j in range(1, n1 - 1):
                    if mask[i, j]:
                        r = 0.25 * (u[i - 1, j] + u[i + 1, j] + u[i, j - 1]
                                    + u[i, j + 1] + rhs[i, j]) - u[i, j]
                        u[i, j] += omega * r
                        a = fabs(r)
                        if a > res:
                            res = a
            it += 1
            if res < tol:
                break
    return it, res


def shrink_sor(double[:, ::1] u, const unsigned char[:, ::1] mask,
               double[:, ::1] shift_pos, double[:, ::1] shift_neg,
               double lower, double omega, double tol, long max_iter):
    """Nonlinear SOR for ``sum_edges (du)^2 + sum_i a_i u_i^+ + b_i u_i^-``.

    ``shift_pos = a / 8`` and ``shift_neg = b / 8`` (per unit edge weight);
    values are kept ``>= lower``. The exact nodal minimizer is
    ``m - shift_pos`` when that is positive, ``m + shift_neg`` when that is
    negative, and 0 otherwise (``m`` the neighbour mean). Returns
    ``(sweeps, last max |nodal correction|)``.
    """
    cdef Py_ssize_t n0 = u.shape[0], n1 = u.shape[1]
    cdef Py_ssize_t i, j
    cdef long it = 0
    cdef double res = 0.0, m, t, old, new, a
    with nogil:
        while it < max_iter:
            res = 0.0
            for i in range(1, n0 - 1):
                for j in range(1, n1 - 1):
                    if mask[i, j]:
                        m = 0.25 * (u[i - 1, j] + u[i + 1, j] + u[i, j - 1] + u[i, j + 1])
                        t = m - shift_pos[i, j]
                        if t <= 0.0:
                            t = m + shift_neg[i, j]
                            if t >= 0.0:
                                t = 0.0
                        if t < lower:
                            t = lower
                        old = u[i, j]
                        a = fabs(t - old)
                        if a > res:
                            res = a
                        if t == 0.0:
                            new = 0.0
                        else:
                            new = old + omega * (t - old)
                            if (new > 0.0) != (t > 0.0):
                                new = 0.0
                            if new < lower:
                                new = lower
                        u[i, j] = new
            it += 1
            if res < tol:
                break
    return it, res

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Newton-Raphson kernel for small dense feeders.

Polar formulation with the Jacobian assembled element by element and solved
by in-place Gaussian elimination with partial pivoting. Mirrors the contract
of ``_pfkernel_py.newton_solve``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, fabs, isfinite

cnp.import_array()

cdef double VM_FLOOR = 0.3
cdef double VM_CEIL = 3.0


cdef void _calc_pq(const double[:, ::1] G, const double[:, ::1] B,
                   double[::1] vm, double[::1] va,
                   double[::1] pc, double[::1] qc) noexcept nogil:
    cdef Py_ssize_t n = vm.shape[0], i, j
    cdef double t, c, s, acc_p, acc_q
    for i in range(n):
        acc_p = 0.0
        acc_q = 0.0
        for j in range(n):
            if G[i, j] == 0.0 and B[i, j] == 0.0:
                continue
            t = va[i] - va[j]
            c = cos(t)
            s = sin(t)
            acc_p += vm[j] * (G[i, j] * c + B[i, j] * s)
            acc_q += vm[j] * (G[i, j] * s - B[i, j] * c)
        pc[i] = vm[i] * acc_p
        qc[i] = vm[i] * acc_q


cdef void _jacobian(const double[:, ::1] G, const double[:, ::1] B,
                    double[::1] vm, double[::1] va,
                    double[::1] pc, double[::1] qc,
                    double[:, ::1] J) noexcept nogil:
    # unknowns: theta_1..theta_{n-1}, |V|_1..|V|_{n-1}
    cdef Py_ssize_t n = vm.shape[0], m = n - 1, i, j, r, k
    cdef double t, c, s, gij, bij
    for r in range(2 * m):
        for k in range(2 * m):
            J[r, k] = 0.0
    for i in range(1, n):
        r = i - 1
        for j in range(1, n):
            k = j - 1
            gij = G[i, j]
            bij = B[i, j]
            if i == j:
                J[r, k] = -qc[i] - bij * vm[i] * vm[i]
                J[r, m + k] = pc[i] / vm[i] + gij * vm[i]
                J[m + r, k] = pc[i] - gij * vm[i] * vm[i]
                J[m + r, m + k] = qc[i] / vm[i] - bij * vm[i]
            elif gij != 0.0 or bij != 0.0:
                t = va[i] - va[j]
                c = cos(t)
                s = sin(t)
                J[r, k] = vm[i] * vm[j] * (gij * s - bij * c)
                J[r, m + k] = vm[i] * (gij * c + bij * s)
                J[m + r, k] = -vm[i] * vm[j] * (gij * c + bij * s)
                J[m + r, m + k] = vm[i] * (gij * s - bij * c)


cdef int _solve_inplace(double[:, ::1] A, double[::1] b) noexcept nogil:
    """Solve A x = b, overwriting b with x. Returns 0, or -1 if singular."""
    cdef Py_ssize_t n = A.shape[0], col, row, piv, k
    cdef double best, tmp, factor
    for col in range(n):
        piv = col
        best = fabs(A[col, col])
        for row in range(col + 1, n):
            if fabs(A[row, col]) > best:
                best = fabs(A[row, col])
                piv = row
        if best == 0.0 or not isfinite(best):
            return -1
        if piv != col:
            for k in range(col, n):
                tmp = A[col, k]
                A[col, k] = A[piv, k]
                A[piv, k] = tmp
            tmp = b[col]
            b[col] = b[piv]
            b[piv] = tmp
        for row in range(col + 1, n):
            factor = A[row, col] / A[col, col]
            if factor != 0.0:
                for k in range(col + 1, n):
                    A[row, k] -= factor * A[col, k]
                b[row] -= factor * b[col]
    for row in range(n - 1, -1, -1):
        tmp = b[row]
        for k in range(row + 1, n):
            tmp -= A[row, k] * b[k]
        b[row] = tmp / A[row, row]
    return 0


def newton_solve(Y, p, q, double v_ref, double tol, int max_iter):
    """Returns (vm, va, iterations, max_mismatch, converged)."""
    cdef cnp.ndarray[double, ndim=2, mode="c"] G_arr = np.ascontiguousarray(Y.real, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] B_arr = np.ascontiguousarray(Y.imag, dtype=np.float64)
    cdef const double[:, ::1] G = G_arr
    cdef const double[:, ::1] B = B_arr
    cdef double[::1] ps = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[::1] qs = np.ascontiguousarray(q, dtype=np.float64)
    cdef Py_ssize_t n = G.shape[0], m = n - 1, i
    vm_arr = np.ones(n)
    va_arr = np.zeros(n)
    cdef double[::1] vm = vm_arr
    cdef double[::1] va = va_arr
    vm[0] = v_ref
    if n == 1:
        return vm_arr, va_arr, 1, 0.0, True
    cdef double[::1] pc = np.empty(n)
    cdef double[::1] qc = np.empty(n)
    cdef double[:, ::1] J = np.empty((2 * m, 2 * m))
    cdef double[::1] f = np.empty(2 * m)
    cdef double norm = 0.0, d
    cdef int it, status
    cdef bint bad
    for it in range(1, max_iter + 1):
        with nogil:
            _calc_pq(G, B, vm, va, pc, qc)
            norm = 0.0
            bad = False
            for i in range(1, n):
                f[i - 1] = -(pc[i] - ps[i])
                f[m + i - 1] = -(qc[i] - qs[i])
                d = fabs(f[i - 1])
                if not isfinite(d):
                    bad = True
                elif d > norm:
                    norm = d
                d = fabs(f[m + i - 1])
                if not isfinite(d):
                    bad = True
                elif d > norm:
                    norm = d
        if bad:
            return vm_arr, va_arr, it, float("inf"), False
        if norm <= tol:
            return vm_arr, va_arr, it, norm, True
        with nogil:
            _jacobian(G, B, vm, va, pc, qc, J)
            status = _solve_inplace(J, f)
        if status != 0:
            return vm_arr, va_arr, it, norm, False
        bad = False
        for i in range(1, n):
            va[i] += f[i - 1]
            vm[i] += f[m + i - 1]
            if not (VM_FLOOR <= vm[i] <= VM_CEIL):
                bad = True
        if bad:
            return vm_arr, va_arr, it, norm, False
    return vm_arr, va_arr, max_iter, norm, False

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Same signatures and results as ``_kernels_py``."""

import numpy as np

from libc.math cimport exp, log, fabs, tanh, cosh, pow


def smooth_mu(const double[::1] a):
    cdef Py_ssize_t i, n = a.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double t, g
    for i in range(n):
        t = fabs(a[i])
        if t == 0.0:
            o[i] = 0.0
            continue
        g = 1.0 - 0.5 * tanh(t)
        o[i] = pow(t, g) if a[i] > 0 else -pow(t, g)
    return out


def smooth_mu_grad(const double[::1] a):
    cdef Py_ssize_t i, n = a.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double t, g, ch, dg
    for i in range(n):
        t = fabs(a[i])
        if t == 0.0:
            o[i] = 1.0
            continue
        g = 1.0 - 0.5 * tanh(t)
        ch = cosh(t)
        # sech^2 underflows to 0 for large t, cosh overflows to inf: both fine
        dg = -0.5 / (ch * ch)
        o[i] = pow(t, g) * (dg * log(t) + g / t)
    return out


def ba_iterate(const double[::1] p, const double[:, ::1] d, double slope,
               double tol, long max_iter, bint record):
    """Blahut-Arimoto fixed point on the reproduction marginal.

    Returns (q, iterations, converged, functional_trace).
    """
    cdef Py_ssize_t n = d.shape[0], m = d.shape[1]
    cdef Py_ssize_t i, j
    cdef long it
    cdef double z, w, resid, f, dmin, diff

    A_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] A = A_arr
    offs_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] offs = offs_arr
    for i in range(n):
        dmin = d[i, 0]
        for j in range(1, m):
            if d[i, j] < dmin:
                dmin = d[i, j]
        offs[i] = slope * dmin
        for j in range(m):
            A[i, j] = exp(slope * (d[i, j] - dmin))

    q_arr = np.full(m, 1.0 / m, dtype=np.float64)
    qn_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] q = q_arr
    cdef double[::1] qn = qn_arr
    trace = []
    cdef bint converged = False

    it = 0
    while it < max_iter:
        it += 1
        for j in range(m):
            qn[j] = 0.0
        f = 0.0
        for i in range(n):
            if p[i] == 0.0:
                continue
            z = 0.0
            for j in range(m):
                z += q[j] * A[i, j]
            f -= p[i] * (log(z) + offs[i])
            w = p[i] / z
            for j in range(m):
                qn[j] += w * q[j] * A[i, j]
        if record:
            trace.append(f)
        resid = 0.0
        for j in range(m):
            diff = fabs(qn[j] - q[j])
            if diff > resid:
                resid = diff
            q[j] = qn[j]
        if resid < tol:
            converged = True
            break
    return q_arr, it, converged, trace

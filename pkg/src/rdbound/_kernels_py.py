"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def smooth_mu(a):
    t = np.abs(a)
    g = 1.0 - 0.5 * np.tanh(t)
    safe = np.where(t > 0, t, 1.0)
    out = np.sign(a) * np.power(safe, g)
    return np.where(t > 0, out, 0.0)


def smooth_mu_grad(a):
    t = np.abs(a)
    safe = np.where(t > 0, t, 1.0)
    g = 1.0 - 0.5 * np.tanh(safe)
    with np.errstate(over="ignore"):
        ch = np.cosh(safe)
        dg = -0.5 / (ch * ch)
    out = np.power(safe, g) * (dg * np.log(safe) + g / safe)
    return np.where(t > 0, out, 1.0)


def ba_iterate(p, d, slope, tol, max_iter, record):
    n, m = d.shape
    dmin = d.min(axis=1)
    offs = slope * dmin
    A = np.exp(slope * (d - dmin[:, None]))
    live = p > 0
    p, A, offs = p[live], A[live], offs[live]

    q = np.full(m, 1.0 / m)
    trace = []
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        z = A @ q
        if record:
            trace.append(float(-np.sum(p * (np.log(z) + offs))))
        qn = q * ((p / z) @ A)
        resid = np.max(np.abs(qn - q))
        q = qn
        if resid < tol:
            converged = True
            break
    return q, it, converged, trace

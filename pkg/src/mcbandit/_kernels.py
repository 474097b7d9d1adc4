"""Numba kernels for the per-step hot path.

Everything here works on plain float64 arrays so the same code serves the
library API and the simulation loops.
"""
import numpy as np
from numba import njit

# Gram eigenvalues below GRAM_FLOOR * largest are clamped.
GRAM_FLOOR = 1e-12


@njit(cache=True)
def rebalance_factors(u, v, floor):
    """Balanced factors with the same product as ``u @ v.T``.

    Uses eigendecompositions of the r x r Gram matrices and one r x r SVD.
    Returns ``(u_new, v_new, singular_values, n_clamped)``.
    """
    r = u.shape[1]
    du, ru = np.linalg.eigh(u.T @ u)
    dv, rv = np.linalg.eigh(v.T @ v)
    n_clamped = 0
    top_u = max(du[r - 1], 0.0)
    top_v = max(dv[r - 1], 0.0)
    if top_u == 0.0 or top_v == 0.0:
        # zero factor: product is zero, return zeros of the same shape
        return np.zeros_like(u), np.zeros_like(v), np.zeros(r), r
    for i in range(r):
        if du[i] < floor * top_u:
            du[i] = floor * top_u
            n_clamped += 1
        if dv[i] < floor * top_v:
            dv[i] = floor * top_v
            n_clamped += 1
    su = np.sqrt(du)
    sv = np.sqrt(dv)
    core = ru.T @ rv
    for i in range(r):
        for j in range(r):
            core[i, j] *= su[i] * sv[j]
    qu, d, qvt = np.linalg.svd(core)
    a = ru.copy()
    b = rv.copy()
    for j in range(r):
        a[:, j] /= su[j]
        b[:, j] /= sv[j]
    tu = a @ qu
    tv = b @ qvt.T
    for j in range(r):
        s = np.sqrt(d[j])
        tu[:, j] *= s
        tv[:, j] *= s
    return u @ tu, v @ tv, d, n_clamped


@njit(cache=True)
def row_gradient_step(u, v, j1, j2, scale):
    """Gradient step of ``0.5 * (<U V^T, e_j1 e_j2^T> - r)^2`` touching two rows.

    ``scale`` is ``eta * weight * residual``; both rows use the old factors.
    """
    u_new = u.copy()
    v_new = v.copy()
    r = u.shape[1]
    for k in range(r):
        u_new[j1, k] = u[j1, k] - scale * v[j2, k]
        v_new[j2, k] = v[j2, k] - scale * u[j1, k]
    return u_new, v_new


@njit(cache=True)
def sgd_rebalance(u, v, j1, j2, scale, floor):
    """Row-local gradient step followed by balanced re-factorization.

    Returns ``(u_new, v_new, incoherence, n_clamped)`` where incoherence is
    evaluated from the balanced output (columns of u_new are L * sqrt(d)).
    """
    ut, vt = row_gradient_step(u, v, j1, j2, scale)
    u_new, v_new, d, n_clamped = rebalance_factors(ut, vt, floor)
    mu = factor_incoherence(u_new, v_new, d)
    return u_new, v_new, mu, n_clamped


@njit(cache=True)
def factor_incoherence(u, v, d):
    """Incoherence of balanced factors whose column norms squared are ``d``."""
    d1, r = u.shape
    d2 = v.shape[0]
    best_u = 0.0
    best_v = 0.0
    for i in range(d1):
        s = 0.0
        for k in range(r):
            if d[k] > 0.0:
                s += u[i, k] * u[i, k] / d[k]
        if s > best_u:
            best_u = s
    for i in range(d2):
        s = 0.0
        for k in range(r):
            if d[k] > 0.0:
                s += v[i, k] * v[i, k] / d[k]
        if s > best_v:
            best_v = s
    return max(np.sqrt(d1 / r * best_u), np.sqrt(d2 / r * best_v))


@njit(cache=True)
def patch_running_sum(total, cache, stamp, u, v, j1, j2, now):
    """Flush row ``j1`` and column ``j2`` of a lazily accumulated sum.

    ``cache`` holds the current product entries, each valid since ``stamp``.
    The flushed entries are credited for ``now - stamp`` steps, then
    refreshed from ``u @ v.T`` and restamped with ``now``.
    """
    d1, d2 = cache.shape
    r = u.shape[1]
    for j in range(d2):
        total[j1, j] += cache[j1, j] * (now - stamp[j1, j])
        s = 0.0
        for k in range(r):
            s += u[j1, k] * v[j, k]
        cache[j1, j] = s
        stamp[j1, j] = now
    for i in range(d1):
        if i == j1:
            continue
        total[i, j2] += cache[i, j2] * (now - stamp[i, j2])
        s = 0.0
        for k in range(r):
            s += u[i, k] * v[j2, k]
        cache[i, j2] = s
        stamp[i, j2] = now

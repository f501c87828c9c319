"""Reference (non-compiled) versions of the hot kernels.

Signatures mirror ``_kernels.pyx`` exactly; :mod:`slotmix.kernels` picks one
at import time.
"""
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def log_gaussian_fwd(x, mu, var, quadratic_only=False):
    """Diagonal log-density for every (point, component) pair.

    x: (B, N, D); mu, var: (B, K, D). Returns (B, N, K).
    """
    diff = x[:, :, None, :] - mu[:, None, :, :]
    quad = (diff * diff / var[:, None, :, :]).sum(axis=-1)
    if quadratic_only:
        return -0.5 * quad
    logdet = (np.log(var) + LOG_2PI).sum(axis=-1)
    return -0.5 * (quad + logdet[:, None, :])


def log_gaussian_bwd(g, x, mu, var, quadratic_only=False):
    """Gradients of sum(g * log_gaussian_fwd(x, mu, var)) w.r.t. x, mu, var."""
    inv = 1.0 / var
    diff = x[:, :, None, :] - mu[:, None, :, :]
    scaled = diff * inv[:, None, :, :]
    gs = g[..., None] * scaled
    gx = -gs.sum(axis=2)
    gmu = gs.sum(axis=1)
    gvar = 0.5 * (g[..., None] * scaled * scaled).sum(axis=1)
    if not quadratic_only:
        gvar -= 0.5 * g.sum(axis=1)[..., None] * inv
    return gx, gmu, gvar


def hungarian(cost):
    """Minimum-cost perfect matching on a square matrix.

    Shortest augmenting path with row/column potentials, O(K^3).
    Returns ``assign`` with ``assign[row] = col``.
    """
    n = len(cost)
    c = [[float(v) for v in row] for row in cost]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[col] = row matched to col (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = c[i0 - 1]
            ui = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign

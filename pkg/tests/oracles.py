"""Independent reference computations (plain numpy / itertools).

Nothing here imports the package under test.
"""

import itertools
import math

import numpy as np


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def lasso_obj(t, V, lam, a):
    r = t - V @ a
    return float(r @ r + lam * np.abs(a).sum())


def _grid_eval(t, V, lam, pts):
    r = t[None, :] - pts @ V.T
    return (r * r).sum(1) + lam * np.abs(pts).sum(1)


def lasso_grid(t, V, lam, lo=-3.0, hi=3.0, step=1e-3):
    """Grid minimum of ||t - Va||^2 + lam ||a||_1 over ``[lo, hi]^k``.

    Coarse-to-fine: a full coarse grid, then successive 21-point grids per
    axis around the incumbent, down to spacing below ``step``.  The
    objective is convex, so the refinement tracks the global grid minimum.
    """
    k = V.shape[1]
    if k == 0:
        return float(t @ t), np.zeros(0)
    npts = {1: 601, 2: 121, 3: 41}.get(k, 25)
    axis = np.linspace(lo, hi, npts)
    pts = np.array(np.meshgrid(*[axis] * k, indexing="ij")).reshape(k, -1).T
    vals = _grid_eval(t, V, lam, pts)
    arg = pts[vals.argmin()]
    best = float(vals.min())
    spacing = axis[1] - axis[0]
    while spacing > step / 10:
        axes = [np.union1d(np.clip(c + spacing * np.linspace(-1, 1, 21), lo, hi), [0.0]) for c in arg]
        pts = np.array(np.meshgrid(*axes, indexing="ij")).reshape(k, -1).T
        vals = _grid_eval(t, V, lam, pts)
        if vals.min() < best:
            best, arg = float(vals.min()), pts[vals.argmin()]
        spacing /= 10
    return best, arg


def normalized_adjacency(n, edges):
    A = np.eye(n)
    for u, v in edges:
        A[u, v] = A[v, u] = 1.0
    d = A.sum(1)
    return A / np.sqrt(np.outer(d, d))


def softmax_rows(x):
    z = np.exp(x - x.max(1, keepdims=True))
    return z / z.sum(1, keepdims=True)


def categorical_kl(p, q):
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))


def tv(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(-1)

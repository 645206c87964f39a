"""Independent reference implementations used by the tests."""

import itertools

import numpy as np


def simplex_kkt(v):
    """Projection onto the simplex by enumerating every support set.

    For support S the KKT conditions give x_S = v_S - t with t = (sum v_S - 1)/|S|
    and x_i = 0 elsewhere; the feasible candidate closest to v is the projection.
    """
    v = np.asarray(v, dtype=float)
    k = len(v)
    best, best_d = None, np.inf
    for r in range(1, k + 1):
        for S in itertools.combinations(range(k), r):
            S = list(S)
            t = (v[S].sum() - 1.0) / len(S)
            x = np.zeros(k)
            x[S] = v[S] - t
            if (x < -1e-15).any():
                continue
            d = np.sum((x - v) ** 2)
            if d < best_d:
                best, best_d = x, d
    return best


def simplex_grid(v, step=1e-3):
    """Brute-force nearest grid point of the simplex (k = 2 or 3)."""
    v = np.asarray(v, dtype=float)
    n = int(round(1 / step))
    if len(v) == 2:
        a = np.arange(n + 1) * step
        pts = np.stack([a, 1 - a], axis=1)
    elif len(v) == 3:
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        mask = i + j <= n
        a, b = i[mask] * step, j[mask] * step
        pts = np.stack([a, b, 1 - a - b], axis=1)
    else:
        raise ValueError("grid oracle supports k = 2 or 3")
    return pts[np.argmin(((pts - v) ** 2).sum(axis=1))]

"""Euclidean projection onto the probability simplex."""

import numpy as np


def project_simplex(v) -> np.ndarray:
    """argmin_{x >= 0, sum x = 1} ||x - v||_2 by the sorted-threshold method."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a nonempty vector, got shape {v.shape}")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    x = np.maximum(v - theta, 0.0)
    # remove the last-ulp drift so the sum is 1 to machine precision
    x /= x.sum()
    return x

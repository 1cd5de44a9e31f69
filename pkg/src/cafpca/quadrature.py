"""Trapezoid quadrature and grid interpolation helpers."""

import numpy as np


def trapezoid_weights(grid) -> np.ndarray:
    """Weights w with sum(w * f(grid)) equal to the trapezoid rule over the grid's span."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing with at least 2 nodes")
    dg = np.diff(g)
    w = np.zeros(g.size)
    w[:-1] += dg / 2
    w[1:] += dg / 2
    return w


def integrate(values, grid, axis=-1):
    return np.tensordot(np.moveaxis(np.asarray(values, float), axis, -1), trapezoid_weights(grid), axes=1)


def integrate2(values, grid):
    """Trapezoid double integral of a (G, G) array over grid x grid."""
    w = trapezoid_weights(grid)
    return float(w @ np.asarray(values, float) @ w)


def interp_columns(x, grid, values) -> np.ndarray:
    """Linear interpolation of each column of ``values`` (G, K) at points ``x``."""
    values = np.asarray(values, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if values.ndim == 1:
        return np.interp(x, grid, values)
    return np.column_stack([np.interp(x, grid, values[:, k]) for k in range(values.shape[1])]) if values.shape[1] else np.zeros((x.size, 0))

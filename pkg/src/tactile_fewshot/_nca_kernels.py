"""Pairwise weighted-L1 kernels for diagonal NCA (numba)."""
import numba
import numpy as np

TILE = 16  # rows of X sharing each streamed row; keeps the tile in cache


@numba.njit(cache=True, fastmath=True)
def weighted_l1_distances(X, w2):
    n, p = X.shape
    D = np.zeros((n, n))
    for ib in range(0, n, TILE):
        ie = min(ib + TILE, n)
        for j in range(ib + 1, n):
            xj = X[j]
            for i in range(ib, min(ie, j)):
                xi = X[i]
                s = 0.0
                for d in range(p):
                    s += w2[d] * abs(xi[d] - xj[d])
                D[i, j] = s
                D[j, i] = s
    return D


@numba.njit(cache=True, fastmath=True)
def weighted_abs_diff_sum(X, A):
    """``sum_ij A[i, j] * |X[i] - X[j]|`` per feature."""
    n, p = X.shape
    g = np.zeros(p)
    for i in range(n):
        for j in range(i + 1, n):
            a = A[i, j] + A[j, i]
            if a == 0.0:
                continue
            for d in range(p):
                g[d] += a * abs(X[i, d] - X[j, d])
    return g

"""Orthonormal discrete wavelet transform with periodization padding.

Daubechies filters are derived by spectral factorization instead of being
copied from a table, so the orthonormality conditions hold to machine
precision. The analysis step is a circular correlation followed by
downsampling by two; the synthesis step is its exact transpose.
"""
from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np

__all__ = [
    "ShapeError",
    "daubechies_lowpass",
    "wavelet_filters",
    "dwt_step",
    "idwt_step",
    "dwt3",
    "idwt3",
    "SUBBANDS",
]

SUBBANDS = ("A3", "D3", "D2", "D1")


class ShapeError(ValueError):
    """Signal length incompatible with the padding convention."""


@lru_cache(maxsize=None)
def daubechies_lowpass(vanishing_moments: int) -> tuple[float, ...]:
    """Minimum-phase Daubechies scaling filter with ``vanishing_moments`` moments.

    Returns the ``2 * vanishing_moments`` taps, normalized so that the taps
    sum to sqrt(2) and their squares sum to one.
    """
    p = int(vanishing_moments)
    if p < 1:
        raise ValueError("vanishing_moments must be >= 1")
    if p == 1:
        return (2 ** -0.5, 2 ** -0.5)
    # P(y) = sum_k C(p-1+k, k) y^k with y = sin^2(w/2)
    poly_y = [comb(p - 1 + k, k) for k in range(p)][::-1]
    zeros = []
    for y in np.roots(poly_y):
        pair = np.roots([1.0, -(2.0 - 4.0 * y), 1.0])
        zeros.append(pair[np.argmin(np.abs(pair))])
    q = np.real(np.poly(zeros))
    h = np.real(np.convolve(np.poly([-1.0] * p), q))
    h = h * np.sqrt(2.0) / h.sum()
    return tuple(float(v) for v in h)


def wavelet_filters(wavelet: str = "db4") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(lowpass, highpass)`` analysis filters for a ``dbN`` name."""
    name = wavelet.lower()
    if name == "haar":
        name = "db1"
    if not name.startswith("db") or not name[2:].isdigit():
        raise ValueError(f"unsupported wavelet {wavelet!r}; expected 'dbN' or 'haar'")
    lo = np.asarray(daubechies_lowpass(int(name[2:])))
    n = lo.size
    hi = np.array([(-1) ** k * lo[n - 1 - k] for k in range(n)])
    return lo, hi


def _periodic_index(length: int, taps: int) -> np.ndarray:
    # row k holds (2k + m) mod length for m in range(taps)
    half = length // 2
    return (2 * np.arange(half)[:, None] + np.arange(taps)[None, :]) % length


def dwt_step(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One analysis level along the last axis. Length must be even."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n < 2 or n % 2:
        raise ShapeError(f"periodized DWT step needs an even length >= 2, got {n}")
    idx = _periodic_index(n, lo.size)
    # explicit tap loop: elementwise, so a row's result does not depend on the batch
    a = np.zeros(x.shape[:-1] + (n // 2,))
    d = np.zeros_like(a)
    for m in range(lo.size):
        col = x[..., idx[:, m]]
        a += lo[m] * col
        d += hi[m] * col
    return a, d


def idwt_step(approx: np.ndarray, detail: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`dwt_step` (transpose of the orthonormal map)."""
    approx = np.asarray(approx, dtype=float)
    detail = np.asarray(detail, dtype=float)
    half = approx.shape[-1]
    n = 2 * half
    idx = _periodic_index(n, lo.size)
    contrib = approx[..., :, None] * lo + detail[..., :, None] * hi
    out = np.zeros(approx.shape[:-1] + (n,))
    flat_out = out.reshape(-1, n)
    flat_contrib = contrib.reshape(-1, half * lo.size)
    flat_idx = idx.ravel()
    for row in range(flat_out.shape[0]):
        flat_out[row] = np.bincount(flat_idx, weights=flat_contrib[row], minlength=n)
    return out


def dwt3(signal: np.ndarray, wavelet: str = "db4") -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Three-level Mallat cascade; returns ``(A3, D3, D2, D1)``.

    Works along the last axis, so a 2-D array transforms each row. The
    length must be at least 8 and divisible by 8.
    """
    x = np.asarray(signal, dtype=float)
    n = x.shape[-1]
    if n < 8 or n % 8:
        raise ShapeError(f"3-level periodized DWT needs length >= 8 divisible by 8, got {n}")
    lo, hi = wavelet_filters(wavelet)
    a1, d1 = dwt_step(x, lo, hi)
    a2, d2 = dwt_step(a1, lo, hi)
    a3, d3 = dwt_step(a2, lo, hi)
    return a3, d3, d2, d1


def idwt3(a3: np.ndarray, d3: np.ndarray, d2: np.ndarray, d1: np.ndarray, wavelet: str = "db4") -> np.ndarray:
    lo, hi = wavelet_filters(wavelet)
    a2 = idwt_step(a3, d3, lo, hi)
    a1 = idwt_step(a2, d2, lo, hi)
    return idwt_step(a1, d1, lo, hi)

"""Episode-level summary statistics."""
from __future__ import annotations

import math

import numpy as np

Z95 = 1.96


class StatisticsError(ValueError):
    pass


def confidence_interval(values, z: float = Z95) -> tuple[float, float]:
    """Mean and normal-approximation half-width ``z * s / sqrt(n)`` (s uses n-1)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise StatisticsError(f"need at least 2 values for a confidence interval, got {v.size}")
    mean = math.fsum(v) / v.size
    var = math.fsum((x - mean) ** 2 for x in v) / (v.size - 1)
    return mean, z * math.sqrt(var / v.size)

"""Planted-signal datasets shared by the feature-selection tests."""
import numpy as np


def planted_dataset(seed, n_classes=10, per_class=20, n_features=20, informative=(0, 1, 2, 3, 4), spread=2.0):
    """Class means differ only on ``informative`` columns; every column has unit noise.

    Each informative column holds the evenly spaced levels
    ``linspace(-spread, spread, n_classes)`` in a random class order, so all
    of them carry the same amount of signal. The remaining columns are pure
    N(0, 1) distractors. Returns z-scored ``X`` and integer labels ``y``.
    """
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(n_classes), per_class)
    means = np.zeros((n_classes, n_features))
    levels = np.linspace(-spread, spread, n_classes)
    for f in informative:
        means[:, f] = rng.permutation(levels)
    X = means[y] + rng.standard_normal((y.size, n_features))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    return X, y

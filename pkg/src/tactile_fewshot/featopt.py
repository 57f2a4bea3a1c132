"""Feature ranking by diagonal NCA and selection of the dimensionality D.

NCA here learns one scale ``w_d`` per feature. Distances are
``sum_d w_d^2 |x_id - x_jd|``, neighbours are chosen with a leave-one-out
softmax over ``-distance / kernel_width``, and the objective is the mean
probability of picking a same-class neighbour minus ``lambda * sum w_d^2``.
Importance is ``w_d^2``.

The D-scan scores every prefix length of the ranking with 5-way-5-shot
validation episodes drawn from the training partition and classified by
the unadapted prototype head. The same episodes are reused for every D so
that differences between candidates are not sampling noise.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import _nca_kernels
from .features import DEFAULT_CATALOG, Standardizer, apply_standardizer, fit_standardizer
from .head import HeadConfig, init_head, predict
from .stats import confidence_interval

DEFAULT_GRID = tuple(range(1, 21)) + (24, 28, 32, 40, 48, 64, 96, 128, 192, 386)
MODEL_FORMAT = "tactile-fewshot/pretrained-model/v1"


class NcaError(ValueError):
    pass


class EpisodeInfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class NcaConfig:
    lambda_nca: float | None = None  # None -> 1 / n_samples
    kernel_width: float = 1.0
    max_iters: int = 60
    tol: float = 1e-6
    learning_rate: float = 0.05  # mini-batch path only
    batch_size: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class DScanConfig:
    grid: tuple[int, ...] = DEFAULT_GRID
    episodes_per_D: int = 200
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 15
    alpha: float = 10.0
    seed: int = 0


@dataclass(eq=False)
class NcaWeights:
    weights: np.ndarray
    objective_trace: np.ndarray
    config: NcaConfig
    lambda_used: float = 0.0

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "objective_trace": self.objective_trace.tolist(),
            "config": asdict(self.config),
            "lambda_used": self.lambda_used,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NcaWeights":
        return cls(np.array(d["weights"], float), np.array(d["objective_trace"], float), NcaConfig(**d["config"]), d["lambda_used"])


@dataclass(eq=False)
class DScanResult:
    grid: np.ndarray
    mean_accuracy: np.ndarray
    ci_halfwidth: np.ndarray
    selected_D: int
    episodes_per_D: int

    def curve_rows(self) -> list[tuple[int, float, float]]:
        """``(D, acc, ci)`` per grid point."""
        return [(int(d), float(m), float(h)) for d, m, h in zip(self.grid, self.mean_accuracy, self.ci_halfwidth)]

    def to_json(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "mean_accuracy": self.mean_accuracy.tolist(),
            "ci_halfwidth": self.ci_halfwidth.tolist(),
            "selected_D": self.selected_D,
            "episodes_per_D": self.episodes_per_D,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DScanResult":
        return cls(np.array(d["grid"], int), np.array(d["mean_accuracy"], float), np.array(d["ci_halfwidth"], float), int(d["selected_D"]), int(d["episodes_per_D"]))


# ---------------------------------------------------------------------------
# NCA


def _nca_soft_neighbours(X, y, w2, sigma):
    """Leave-one-out neighbour probabilities and the same-class mask."""
    dist = _nca_kernels.weighted_l1_distances(X, w2)
    logits = -dist / sigma
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    return P, y[:, None] == y[None, :]


def _nca_value(X, y, w, lam, sigma):
    w2 = w * w
    P, same = _nca_soft_neighbours(X, y, w2, sigma)
    return (P * same).sum() / X.shape[0] - lam * w2.sum()


def _nca_value_and_grad(X, y, w, lam, sigma):
    n = X.shape[0]
    w2 = w * w
    P, same = _nca_soft_neighbours(X, y, w2, sigma)
    p_correct = (P * same).sum(axis=1)
    A = P * (p_correct[:, None] - same)
    S = _nca_kernels.weighted_abs_diff_sum(X, A)
    value = p_correct.sum() / n - lam * w2.sum()
    grad = 2.0 * w * (S / (n * sigma) - lam)
    return value, grad


def nca_objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float, kernel_width: float = 1.0) -> tuple[float, np.ndarray]:
    """Objective and gradient at feature scales ``w`` (exposed for testing)."""
    X = np.ascontiguousarray(X, dtype=float)
    return _nca_value_and_grad(X, np.asarray(y), np.asarray(w, dtype=float), lam, kernel_width)


def fit_nca(X: np.ndarray, y: np.ndarray, config: NcaConfig | None = None) -> NcaWeights:
    """Learn per-feature importances on a standardized matrix."""
    cfg = config or NcaConfig()
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise NcaError(f"X {X.shape} and y {y.shape} do not line up")
    if not np.all(np.isfinite(X)):
        raise NcaError("X contains NaN or infinite values")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise NcaError("NCA needs at least two classes")
    if counts.min() < 2:
        raise NcaError(f"class {classes[np.argmin(counts)]!r} has fewer than 2 samples")
    n, p = X.shape
    lam = 1.0 / n if cfg.lambda_nca is None else float(cfg.lambda_nca)
    w0 = np.ones(p)

    if n > cfg.batch_size:
        return _fit_nca_minibatch(X, y, w0, lam, cfg)

    trace: list[float] = []
    cache: dict = {}

    def fun(w):
        key = w.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _nca_value_and_grad(X, y, w, lam, cfg.kernel_width)
        v, g = cache[key]
        return -v, -g

    trace.append(-fun(w0)[0])
    res = minimize(
        fun,
        w0,
        jac=True,
        method="L-BFGS-B",
        callback=lambda wk: trace.append(-fun(wk)[0]),
        options={"maxiter": cfg.max_iters, "ftol": cfg.tol * 1e-3, "gtol": cfg.tol},
    )
    w = res.x
    return NcaWeights(w * w, np.array(trace), cfg, lam)


TRACE_EVERY = 10


def _fit_nca_minibatch(X, y, w, lam, cfg: NcaConfig) -> NcaWeights:
    """Stochastic ascent on random subsets of ``batch_size`` samples.

    The objective trace is evaluated on one fixed subset every
    ``TRACE_EVERY`` steps and after the last one.
    """
    rng = np.random.default_rng([cfg.seed, 0xCA])
    n = X.shape[0]
    eval_idx = np.sort(rng.choice(n, cfg.batch_size, replace=False))
    Xe, ye = np.ascontiguousarray(X[eval_idx]), y[eval_idx]
    trace = [_nca_value(Xe, ye, w, lam, cfg.kernel_width)]
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for it in range(1, cfg.max_iters + 1):
        idx = np.sort(rng.choice(n, cfg.batch_size, replace=False))
        _, g = _nca_value_and_grad(np.ascontiguousarray(X[idx]), y[idx], w, lam, cfg.kernel_width)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w + cfg.learning_rate * (m / (1 - 0.9**it)) / (np.sqrt(v / (1 - 0.999**it)) + 1e-8)
        if it % TRACE_EVERY == 0 or it == cfg.max_iters:
            trace.append(_nca_value(Xe, ye, w, lam, cfg.kernel_width))
    return NcaWeights(w * w, np.array(trace), cfg, lam)


def rank_features(weights) -> np.ndarray:
    """Indices by importance descending; equal importances keep catalog order."""
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    return np.lexsort((np.arange(w.size), -w))


def select_top_d(x: np.ndarray, ranking: np.ndarray, D: int) -> np.ndarray:
    """Values at ``ranking[:D]`` in ranking order (works on a vector or row matrix)."""
    ranking = np.asarray(ranking, dtype=int)
    if not 1 <= int(D) <= ranking.size:
        raise ValueError(f"D must lie in 1..{ranking.size}, got {D}")
    return np.asarray(x)[..., ranking[: int(D)]]


# ---------------------------------------------------------------------------
# D-scan


def sample_episode_indices(labels: np.ndarray, n_way: int, k_shot: int, q_query: int, rng: np.random.Generator, classes=None):
    """Pick ``n_way`` classes and ``k_shot + q_query`` distinct members of each.

    Returns ``(chosen_classes, support_idx[n_way, k_shot], query_idx[n_way, q_query])``.
    """
    labels = np.asarray(labels)
    if classes is None:
        classes = np.unique(labels)
    if len(classes) < n_way:
        raise EpisodeInfeasibleError(f"{n_way}-way episodes need {n_way} classes, only {len(classes)} available")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    need = k_shot + q_query
    for c, idx in members.items():
        if idx.size < need:
            raise EpisodeInfeasibleError(f"class {c.item() if hasattr(c, 'item') else c} has {idx.size} trials, episodes need k_shot + q_query = {need}")
    chosen = rng.choice(np.asarray(classes), n_way, replace=False)
    picks = np.stack([rng.choice(members[c], need, replace=False) for c in chosen])
    return chosen, picks[:, :k_shot], picks[:, k_shot:]


def episode_accuracy(features: np.ndarray, support_idx: np.ndarray, query_idx: np.ndarray, head_config: HeadConfig | None = None) -> float:
    """No-adaptation prototype accuracy for one index-form episode.

    Goes through the same head code that adaptation starts from, so a
    0-step adapted head makes identical predictions.
    """
    n_way, k = support_idx.shape
    q = query_idx.shape[1]
    s_lab = np.repeat(np.arange(n_way), k)
    q_lab = np.repeat(np.arange(n_way), q)
    alpha = head_config.alpha if head_config else 10.0
    head = init_head(features[support_idx.ravel()], s_lab, n_way, alpha)
    return float(np.mean(predict(features[query_idx.ravel()], head) == q_lab))


def d_scan(features: np.ndarray, labels: np.ndarray, ranking: np.ndarray, grid=None, episodes_per_D: int | None = None, rng=None, config: DScanConfig | None = None) -> DScanResult:
    """Score each candidate D on training episodes and keep the best (ties: smallest D)."""
    cfg = config or DScanConfig()
    features = np.asarray(features, dtype=float)
    p = features.shape[1]
    if grid is None:
        grid = sorted({d for d in cfg.grid if d <= p} | {p})
    grid = np.array(sorted(set(int(d) for d in grid)), dtype=int)
    if grid.size == 0 or grid.min() < 1 or grid.max() > p:
        raise ValueError(f"grid must be a non-empty subset of [1, {p}]")
    episodes = cfg.episodes_per_D if episodes_per_D is None else int(episodes_per_D)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 0xD5])
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    plan = [sample_episode_indices(labels, cfg.n_way, cfg.k_shot, cfg.q_query, rng)[1:] for _ in range(episodes)]
    hc = HeadConfig(alpha=cfg.alpha, steps=0)
    means, halves = [], []
    ranked = features[:, np.asarray(ranking, dtype=int)]
    for D in grid:
        emb = np.ascontiguousarray(ranked[:, :D])
        acc = [episode_accuracy(emb, s, q, hc) for s, q in plan]
        if len(acc) >= 2:
            m, h = confidence_interval(acc)
        else:
            m, h = float(np.mean(acc)), 0.0
        means.append(m)
        halves.append(h)
    means = np.array(means)
    best = int(grid[np.flatnonzero(means == means.max())[0]])
    return DScanResult(grid, means, np.array(halves), best, episodes)


# ---------------------------------------------------------------------------
# pretraining


@dataclass(eq=False)
class PretrainedModel:
    """Frozen feature map: standardization followed by top-D selection."""

    standardizer: Standardizer
    nca_weights: NcaWeights | None
    ranking: np.ndarray
    selected_D: int
    catalog_version: str = DEFAULT_CATALOG.version
    pretrain_wall_time_s: float = 0.0
    dscan: DScanResult | None = None

    def embed(self, raw: np.ndarray) -> np.ndarray:
        z = apply_standardizer(raw, self.standardizer, self.catalog_version)
        return select_top_d(z, self.ranking, self.selected_D)

    @property
    def top_features(self) -> np.ndarray:
        return self.ranking[: self.selected_D]

    def fingerprint(self) -> bytes:
        """Byte string covering every learned quantity (timing excluded)."""
        parts = [
            self.standardizer.means.tobytes(),
            self.standardizer.stds.tobytes(),
            self.ranking.tobytes(),
            str(self.selected_D).encode(),
        ]
        if self.nca_weights is not None:
            parts.append(self.nca_weights.weights.tobytes())
        if self.dscan is not None:
            parts.append(self.dscan.mean_accuracy.tobytes())
        return b"|".join(parts)

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "catalog_version": self.catalog_version,
            "selected_D": self.selected_D,
            "ranking": self.ranking.tolist(),
            "pretrain_wall_time_s": self.pretrain_wall_time_s,
            "standardizer": self.standardizer.to_json(),
            "nca": self.nca_weights.to_json() if self.nca_weights is not None else None,
            "dscan": self.dscan.to_json() if self.dscan is not None else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PretrainedModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a pretrained model file (format={d.get('format')!r})")
        return cls(
            Standardizer.from_json(d["standardizer"]),
            NcaWeights.from_json(d["nca"]) if d.get("nca") else None,
            np.array(d["ranking"], int),
            int(d["selected_D"]),
            d["catalog_version"],
            float(d["pretrain_wall_time_s"]),
            DScanResult.from_json(d["dscan"]) if d.get("dscan") else None,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "PretrainedModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class PretrainConfig:
    nca: NcaConfig = field(default_factory=NcaConfig)
    dscan: DScanConfig = field(default_factory=DScanConfig)
    optimize_features: bool = True


def pretrain(train_features: np.ndarray, train_labels: np.ndarray, config: PretrainConfig | None = None, catalog_version: str = DEFAULT_CATALOG.version) -> PretrainedModel:
    """Offline stage: standardize, NCA, rank, D-scan. Sees training rows only.

    With ``optimize_features=False`` the ranking is the identity and D is the
    full feature count (the all-features baseline).
    """
    cfg = config or PretrainConfig()
    t0 = time.perf_counter()
    std = fit_standardizer(train_features, catalog_version)
    Z = apply_standardizer(train_features, std)
    p = Z.shape[1]
    if not cfg.optimize_features:
        model = PretrainedModel(std, None, np.arange(p), p, catalog_version)
    else:
        nca = fit_nca(Z, train_labels, cfg.nca)
        ranking = rank_features(nca)
        scan = d_scan(Z, train_labels, ranking, config=cfg.dscan)
        model = PretrainedModel(std, nca, ranking, scan.selected_D, catalog_version, dscan=scan)
    model.pretrain_wall_time_s = time.perf_counter() - t0
    return model

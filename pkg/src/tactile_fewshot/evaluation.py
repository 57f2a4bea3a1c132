"""Episodic evaluation: sampling, protocol runs, latency and embedding diagnostics."""
from __future__ import annotations

import time
import weakref
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import (
    ClosedSet,
    CrossMaterial,
    CrossShape,
    ForceSpeed,
    Material,
    SplitSpec,
    TactileDataset,
    make_split,
    protocol_label,
)
from .featopt import EpisodeInfeasibleError, PretrainConfig, PretrainedModel, pretrain, sample_episode_indices
from .features import DEFAULT_CATALOG, FeatureCatalog, extract_features
from .head import Episode, HeadConfig, adapt, classify_queries
from .stats import StatisticsError, confidence_interval


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("n_way must be >= 2")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.q_query < 1:
            raise ValueError("q_query must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 500
    head: HeadConfig = field(default_factory=HeadConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    split_seed: int = 0


@dataclass
class EvalReport:
    protocol: str
    n_way: int
    k_shot: int
    q_query: int
    episodes_run: int
    accuracy_mean: float
    ci_halfwidth: float
    pretrain_wall_s: float
    adapt_ms_per_episode: float
    selected_D: int
    pvdf_fraction: float
    episode_accuracies: list = field(default_factory=list)
    seed: int = 0
    method: str = "afop"

    TIMING_FIELDS = ("pretrain_wall_s", "adapt_ms_per_episode")

    def to_json(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            for k in self.TIMING_FIELDS:
                d.pop(k)
        return d

    def table_row(self) -> dict:
        return {
            "protocol": self.protocol,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "acc_mean": self.accuracy_mean,
            "ci": self.ci_halfwidth,
            "pretrain_s": self.pretrain_wall_s,
            "adapt_ms": self.adapt_ms_per_episode,
            "selected_D": self.selected_D,
            "pvdf_fraction": self.pvdf_fraction,
        }


@dataclass
class ProtocolResult:
    """Per-split reports; ``summary`` is the median across folds for multi-fold protocols."""

    reports: list[EvalReport]
    summary: EvalReport
    models: list[PretrainedModel]
    splits: list[SplitSpec]


# ---------------------------------------------------------------------------
# feature cache

_FEATURE_CACHE: "weakref.WeakKeyDictionary[TactileDataset, np.ndarray]" = weakref.WeakKeyDictionary()


def dataset_features(dataset: TactileDataset, wavelet: str = "db4") -> np.ndarray:
    """Raw feature matrix for every trial, cached per dataset object."""
    cached = _FEATURE_CACHE.get(dataset)
    if cached is None:
        cached = extract_features(dataset, wavelet)
        cached.flags.writeable = False
        _FEATURE_CACHE[dataset] = cached
    return cached


def attach_features(dataset: TactileDataset, features: np.ndarray) -> None:
    """Seed the cache with an already computed matrix (e.g. rows of a parent dataset)."""
    features = np.array(features, dtype=float)
    if features.shape[0] != len(dataset):
        raise ValueError(f"{features.shape[0]} feature rows for {len(dataset)} trials")
    features.flags.writeable = False
    _FEATURE_CACHE[dataset] = features


# ---------------------------------------------------------------------------
# episodes


def sample_episode(features: np.ndarray, labels: np.ndarray, spec: EpisodeSpec, rng: np.random.Generator, pretrained: PretrainedModel | None = None, trial_ids=None) -> Episode:
    """Draw one N-way-K-shot episode.

    ``features`` are Top-D embeddings, or raw 386-D features when
    ``pretrained`` is given (they are then mapped through it).
    """
    emb = pretrained.embed(features) if pretrained is not None else np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    chosen, s_idx, q_idx = sample_episode_indices(labels, spec.n_way, spec.k_shot, spec.q_query, rng)
    ids = np.arange(len(labels)) if trial_ids is None else np.asarray(trial_ids)
    return Episode(
        n_way=spec.n_way,
        k_shot=spec.k_shot,
        support=emb[s_idx.ravel()],
        support_labels=np.repeat(np.arange(spec.n_way), spec.k_shot),
        query=emb[q_idx.ravel()],
        query_labels=np.repeat(np.arange(spec.n_way), spec.q_query),
        class_map=tuple(int(c) for c in chosen),
        support_ids=ids[s_idx.ravel()],
        query_ids=ids[q_idx.ravel()],
    )


def pvdf_fraction(ranking: np.ndarray, D: int, catalog: FeatureCatalog = DEFAULT_CATALOG) -> float:
    top = np.asarray(ranking, dtype=int)[: int(D)]
    kinds = catalog.sensor_kinds()
    return float(np.mean(kinds[top] == "PVDF")) if top.size else 0.0


def pretrain_on_split(features: np.ndarray, labels: np.ndarray, split: SplitSpec, config: PretrainConfig) -> PretrainedModel:
    """Fit the offline stage using only the training partition of ``split``."""
    train = np.asarray(split.train_trial_ids, dtype=int)
    return pretrain(features[train], labels[train], config)


def run_split(dataset: TactileDataset, split: SplitSpec, spec: EpisodeSpec, config: EvalConfig, features: np.ndarray | None = None, model: PretrainedModel | None = None, method: str = "afop") -> tuple[EvalReport, PretrainedModel]:
    features = dataset_features(dataset) if features is None else features
    labels = dataset.labels()
    if model is None:
        model = pretrain_on_split(features, labels, split, config.pretrain)
    test = np.asarray(split.test_trial_ids, dtype=int)
    emb = model.embed(features[test])
    test_labels = labels[test]
    accs = np.empty(config.episodes)
    elapsed = 0.0
    for e in range(config.episodes):
        rng = np.random.default_rng([spec.seed, e, 0xE7])
        ep = sample_episode(emb, test_labels, spec, rng, trial_ids=test)
        t0 = time.perf_counter()
        head = adapt(ep.support, ep.support_labels, ep.n_way, config.head)
        _, acc = classify_queries(ep, head)
        elapsed += time.perf_counter() - t0
        accs[e] = acc
    if config.episodes >= 2:
        mean, half = confidence_interval(accs)
    else:
        mean, half = float(accs.mean()), 0.0
    report = EvalReport(
        protocol=split.label,
        n_way=spec.n_way,
        k_shot=spec.k_shot,
        q_query=spec.q_query,
        episodes_run=config.episodes,
        accuracy_mean=mean,
        ci_halfwidth=half,
        pretrain_wall_s=model.pretrain_wall_time_s,
        adapt_ms_per_episode=1000.0 * elapsed / max(config.episodes, 1),
        selected_D=model.selected_D,
        pvdf_fraction=pvdf_fraction(model.ranking, model.selected_D),
        episode_accuracies=accs.tolist(),
        seed=spec.seed,
        method=method,
    )
    return report, model


def protocol_splits(protocol) -> list:
    """Expand a protocol family into its concrete folds."""
    if protocol in ("cross-shape",) or protocol is CrossShape:
        return [CrossShape(f) for f in range(3)]
    if protocol in ("cross-material",) or protocol is CrossMaterial:
        return [CrossMaterial(m) for m in Material]
    if protocol in ("closed-set",) or protocol is ClosedSet:
        return [ClosedSet()]
    if protocol in ("force-speed",) or protocol is ForceSpeed:
        return [ForceSpeed()]
    if isinstance(protocol, (ClosedSet, CrossShape, CrossMaterial, ForceSpeed)):
        return [protocol]
    raise ValueError(f"unknown protocol {protocol!r}")


def _median_summary(reports: list[EvalReport], family: str) -> EvalReport:
    if len(reports) == 1:
        return reports[0]
    med = lambda k: float(np.median([getattr(r, k) for r in reports]))
    first = reports[0]
    return replace(
        first,
        protocol=f"{family}/median",
        episodes_run=sum(r.episodes_run for r in reports),
        accuracy_mean=med("accuracy_mean"),
        ci_halfwidth=med("ci_halfwidth"),
        pretrain_wall_s=med("pretrain_wall_s"),
        adapt_ms_per_episode=med("adapt_ms_per_episode"),
        selected_D=int(np.median([r.selected_D for r in reports])),
        pvdf_fraction=med("pvdf_fraction"),
        episode_accuracies=[],
    )


def run_protocol(dataset: TactileDataset, protocol, spec: EpisodeSpec, episodes: int | None = None, config: EvalConfig | None = None, optimize_features: bool = True) -> ProtocolResult:
    """Split, pretrain on the training side, and evaluate episodes on the test side.

    ``protocol`` is a concrete protocol object or a family name
    (``closed-set``, ``cross-shape``, ``cross-material``, ``force-speed``);
    families with several folds get per-fold reports plus a median summary.
    """
    cfg = config or EvalConfig()
    if episodes is not None:
        cfg = replace(cfg, episodes=int(episodes))
    if cfg.pretrain.optimize_features != optimize_features:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, optimize_features=optimize_features))
    method = "afop" if optimize_features else "direct-prot"
    features = dataset_features(dataset)
    reports, models, splits = [], [], []
    for proto in protocol_splits(protocol):
        split = make_split(dataset, proto, cfg.split_seed)
        report, model = run_split(dataset, split, spec, cfg, features, method=method)
        reports.append(report)
        models.append(model)
        splits.append(split)
    family = protocol if isinstance(protocol, str) else protocol_label(protocol).split("/")[0]
    return ProtocolResult(reports, _median_summary(reports, family), models, splits)


def run_baseline_direct_prot(dataset: TactileDataset, protocol, spec: EpisodeSpec, episodes: int | None = None, config: EvalConfig | None = None) -> ProtocolResult:
    """All 386 standardized features, identity ranking, same head and adaptation."""
    return run_protocol(dataset, protocol, spec, episodes, config, optimize_features=False)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class EmbeddingDiagnostics:
    one_nn_shape_acc: float
    mix_sil: float
    dgi: float
    space: str = "Top-D standardized features"
    k: int = 10


def _pairwise_sq(X: np.ndarray) -> np.ndarray:
    # direct differences; the Gram-matrix shortcut loses digits to cancellation
    return cdist(X, X, "sqeuclidean")


def silhouette_mean(X: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette with Euclidean distance.

    Points in singleton clusters score 0, as do points with ``max(a, b) == 0``;
    fewer than two clusters gives 0.
    """
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        return 0.0
    dist = np.sqrt(_pairwise_sq(np.asarray(X, dtype=float)))
    masks = [labels == c for c in uniq]
    s = np.zeros(len(labels))
    for ci, m in enumerate(masks):
        idx = np.flatnonzero(m)
        if idx.size < 2:
            continue
        a = dist[np.ix_(idx, idx)].sum(axis=1) / (idx.size - 1)
        b = np.min([dist[np.ix_(idx, np.flatnonzero(o))].mean(axis=1) for cj, o in enumerate(masks) if cj != ci], axis=0)
        den = np.maximum(a, b)
        s[idx] = np.divide(b - a, den, out=np.zeros_like(den), where=den > 0)
    return float(s.mean())


def embedding_diagnostics(embeddings: np.ndarray, shape_labels: np.ndarray, material_labels: np.ndarray, k: int = 10) -> EmbeddingDiagnostics:
    """Shape separability and material mixing in the Top-D space.

    * ``one_nn_shape_acc``: leave-one-out 1-NN shape accuracy (ties -> lowest index)
    * ``mix_sil``: ``(1 - s) / 2`` clipped to [0, 1], s the material-label silhouette
    * ``dgi``: mean ratio of different- to same-material points among each
      sample's ``k`` nearest same-shape neighbours (same count floored at 1)
    """
    X = np.asarray(embeddings, dtype=float)
    shapes = np.asarray(shape_labels)
    mats = np.asarray(material_labels)
    n = X.shape[0]
    if np.unique(mats).size < 2:
        raise DiagnosticsError("material metrics need at least two materials")
    if np.unique(shapes).size < 2:
        raise DiagnosticsError("1-NN shape accuracy is degenerate with a single shape")
    _, counts = np.unique(shapes, return_counts=True)
    if counts.min() < 2:
        raise DiagnosticsError("every shape needs at least two samples")
    d = _pairwise_sq(X)
    np.fill_diagonal(d, np.inf)
    nn = np.argmin(d, axis=1)  # first minimum -> lowest index
    one_nn = float(np.mean(shapes[nn] == shapes))

    s = silhouette_mean(X, mats)
    mix = float(np.clip((1.0 - s) / 2.0, 0.0, 1.0))

    ratios = np.empty(n)
    for i in range(n):
        same_shape = np.flatnonzero((shapes == shapes[i]) & (np.arange(n) != i))
        order = same_shape[np.lexsort((same_shape, d[i, same_shape]))][:k]
        diff = np.sum(mats[order] != mats[i])
        same = np.sum(mats[order] == mats[i])
        ratios[i] = diff / max(same, 1)
    return EmbeddingDiagnostics(one_nn, mix, float(ratios.mean()), k=k)


def adaptive_d_report(models: dict[str, list[PretrainedModel]], catalog: FeatureCatalog = DEFAULT_CATALOG) -> list[dict]:
    """Median selected D and PVDF share of the Top-D set per protocol family."""
    rows = []
    for name, group in models.items():
        if not group:
            continue
        rows.append(
            {
                "protocol": name,
                "median_D": float(np.median([m.selected_D for m in group])),
                "pvdf_fraction": float(np.median([pvdf_fraction(m.ranking, m.selected_D, catalog) for m in group])),
                "folds": len(group),
            }
        )
    return rows


__all__ = [
    "EpisodeSpec",
    "EvalConfig",
    "EvalReport",
    "ProtocolResult",
    "EmbeddingDiagnostics",
    "DiagnosticsError",
    "EpisodeInfeasibleError",
    "StatisticsError",
    "confidence_interval",
    "dataset_features",
    "attach_features",
    "sample_episode",
    "pvdf_fraction",
    "pretrain_on_split",
    "run_split",
    "protocol_splits",
    "run_protocol",
    "run_baseline_direct_prot",
    "silhouette_mean",
    "embedding_diagnostics",
    "adaptive_d_report",
]

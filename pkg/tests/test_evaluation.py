import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from planted import planted_dataset
from tactile_fewshot.evaluation import (
    DiagnosticsError,
    EpisodeInfeasibleError,
    EpisodeSpec,
    EvalConfig,
    StatisticsError,
    adaptive_d_report,
    confidence_interval,
    dataset_features,
    embedding_diagnostics,
    pvdf_fraction,
    run_split,
    sample_episode,
    silhouette_mean,
)
from tactile_fewshot.featopt import PretrainConfig, pretrain
from tactile_fewshot.features import DEFAULT_CATALOG
from tactile_fewshot.head import HeadConfig, adapt, classify_queries

FAST = EvalConfig(episodes=60)


def exact_halfwidth(values, z=Fraction(196, 100)):
    """``z * s / sqrt(n)`` with the variance in rationals; one final square root."""
    v = [Fraction(x) for x in values]
    n = len(v)
    mean = sum(v) / n
    var = sum((x - mean) ** 2 for x in v) / (n - 1)
    return float(z) * math.sqrt(var / n)


# ---------------------------------------------------------------------------
# episode spec and sampling


@pytest.mark.parametrize("kwargs", [{"n_way": 1}, {"k_shot": 0}, {"q_query": 0}])
def test_episode_spec_bounds(kwargs):
    with pytest.raises(ValueError):
        EpisodeSpec(**kwargs)


def test_episode_counts(default_features, default_dataset, rng):
    ep = sample_episode(default_features, default_dataset.labels(), EpisodeSpec(5, 1, 15), rng)
    assert ep.support.shape == (5, 386) and ep.query.shape == (75, 386)
    assert np.bincount(ep.query_labels).tolist() == [15] * 5
    assert not set(ep.support_ids) & set(ep.query_ids)
    labels = default_dataset.labels()
    for slot, cid in enumerate(ep.class_map):
        assert np.all(labels[ep.query_ids[ep.query_labels == slot]] == cid)


def test_too_many_ways_is_infeasible(default_features, default_dataset, rng):
    with pytest.raises(EpisodeInfeasibleError):
        sample_episode(default_features, default_dataset.labels(), EpisodeSpec(37, 1, 15), rng)


def test_sample_through_pretrained_model(default_features, default_dataset, closed_model, rng):
    ep = sample_episode(default_features, default_dataset.labels(), EpisodeSpec(5, 1, 5), rng, pretrained=closed_model)
    assert ep.support.shape[1] == closed_model.selected_D


# ---------------------------------------------------------------------------
# confidence intervals


def test_ci_zeros_and_ones():
    values = [0] * 250 + [1] * 250
    mean, half = confidence_interval(values)
    assert mean == 0.5
    assert abs(half - exact_halfwidth(values)) < 1e-12
    assert half == pytest.approx(0.04388, abs=2e-5)  # rounded reference figure


def test_ci_constant_and_small():
    assert confidence_interval([0.7] * 10) == (pytest.approx(0.7), 0.0)
    with pytest.raises(StatisticsError):
        confidence_interval([1.0])


def test_ci_matches_exact_on_random_values(rng):
    values = rng.integers(0, 16, 200) / 15
    assert abs(confidence_interval(values)[1] - exact_halfwidth(values)) < 1e-12


# ---------------------------------------------------------------------------
# split runs


@pytest.fixture(scope="module")
def closed_report(default_dataset, default_features, closed_split, closed_model):
    return run_split(default_dataset, closed_split, EpisodeSpec(5, 1, 15, seed=4), FAST, default_features, closed_model)[0]


def test_report_fields(closed_report, closed_model):
    assert closed_report.episodes_run == 60 and len(closed_report.episode_accuracies) == 60
    assert closed_report.accuracy_mean == pytest.approx(math.fsum(closed_report.episode_accuracies) / 60, abs=1e-15)
    assert closed_report.selected_D == closed_model.selected_D
    assert 0 <= closed_report.pvdf_fraction <= 1
    assert set(closed_report.table_row()) == {"protocol", "n_way", "k_shot", "acc_mean", "ci", "pretrain_s", "adapt_ms", "selected_D", "pvdf_fraction"}


def test_same_seed_same_report(closed_report, default_dataset, default_features, closed_split, closed_model):
    again = run_split(default_dataset, closed_split, EpisodeSpec(5, 1, 15, seed=4), FAST, default_features, closed_model)[0]
    assert again.to_json(timing=False) == closed_report.to_json(timing=False)
    assert "adapt_ms_per_episode" not in again.to_json(timing=False)


def test_adaptation_does_not_hurt_five_shot(default_dataset, default_features, closed_split, closed_model):
    spec = EpisodeSpec(5, 5, 15, seed=1)
    base = EvalConfig(episodes=100, head=HeadConfig(steps=0))
    frozen = run_split(default_dataset, closed_split, spec, base, default_features, closed_model)[0]
    tuned = run_split(default_dataset, closed_split, spec, replace(base, head=HeadConfig()), default_features, closed_model)[0]
    assert tuned.accuracy_mean >= frozen.accuracy_mean - 0.005


def _paired_planted_run(n_features, seed=0, episodes=200):
    """AFOP vs all-features accuracies on a planted dataset, same episodes."""
    X, y = planted_dataset(seed, per_class=40, n_features=n_features)
    train = np.tile(np.arange(40) < 20, 10)
    out = {}
    for optimize in (True, False):
        model = pretrain(X[train], y[train], PretrainConfig(optimize_features=optimize), catalog_version="planted")
        emb, labels = model.embed(X[~train]), y[~train]
        accs = []
        for e in range(episodes):
            ep = sample_episode(emb, labels, EpisodeSpec(5, 1, 15), np.random.default_rng([seed, e]))
            accs.append(classify_queries(ep, adapt(ep.support, ep.support_labels, 5))[1])
        out[optimize] = confidence_interval(accs)
    return out[True], out[False]


def test_feature_selection_helps_with_distractors():
    (afop, _), (direct, _) = _paired_planted_run(n_features=40)
    assert direct < afop


def test_no_distractor_control():
    (afop, h1), (direct, h2) = _paired_planted_run(n_features=5)
    assert abs(afop - direct) <= h1 + h2


def test_protocol_difficulty_ordering(family_models, force_speed_setup):
    spec = EpisodeSpec(5, 1, 15, seed=0)
    cfg = EvalConfig(episodes=200)
    ds, families = family_models(0)
    X = dataset_features(ds)
    acc = {}
    for fam, runs in families.items():
        acc[fam] = np.median([run_split(ds, split, spec, cfg, X, model)[0].accuracy_mean for split, model in runs])
    fs_ds, fs_split, fs_model = force_speed_setup
    acc["force-speed"] = run_split(fs_ds, fs_split, spec, cfg, dataset_features(fs_ds), fs_model)[0].accuracy_mean
    # unseen shapes transfer better than unseen materials; perturbed contact costs accuracy
    assert acc["closed-set"] > acc["cross-shape"] > acc["cross-material"]
    assert acc["force-speed"] < acc["closed-set"]


# ---------------------------------------------------------------------------
# adaptive D


def test_pvdf_fraction_hand_case():
    kinds = DEFAULT_CATALOG.sensor_kinds()
    pvdf = np.flatnonzero(kinds == "PVDF")[:3]
    sg = np.flatnonzero(kinds == "SG")[:5]
    ranking = np.concatenate([sg[:2], pvdf, sg[2:]])
    assert pvdf_fraction(ranking, 8) == 0.375
    assert pvdf_fraction(ranking, 2) == 0.0


def test_adaptive_d_report_single_fold(closed_model):
    (row,) = adaptive_d_report({"closed-set": [closed_model], "empty": []})
    assert row == {
        "protocol": "closed-set",
        "median_D": float(closed_model.selected_D),
        "pvdf_fraction": pvdf_fraction(closed_model.ranking, closed_model.selected_D),
        "folds": 1,
    }


# ---------------------------------------------------------------------------
# diagnostics


def test_silhouette_matches_sklearn(rng):
    X = rng.standard_normal((60, 4)) + np.repeat(rng.standard_normal((3, 4)) * 2, 20, axis=0)
    labels = np.repeat([0, 1, 2], 20)
    assert silhouette_mean(X, labels) == pytest.approx(silhouette_score(X, labels), abs=1e-12)


def test_silhouette_single_cluster_is_zero(rng):
    assert silhouette_mean(rng.standard_normal((5, 2)), np.zeros(5)) == 0.0


def test_diagnostics_clustered_shapes():
    # shapes far apart, materials interleaved inside each shape cluster
    rng = np.random.default_rng(0)
    shapes = np.repeat(np.arange(4), 9)
    mats = np.tile(np.arange(3), 12)
    X = 100.0 * np.eye(4)[shapes] + 0.1 * rng.standard_normal((36, 4))
    diag = embedding_diagnostics(X, shapes, mats, k=8)
    assert diag.one_nn_shape_acc == 1.0
    assert diag.dgi > 1.0
    assert diag.mix_sil > 0.5


def test_diagnostics_identical_points_are_finite():
    X = np.ones((12, 3))
    shapes = np.repeat([0, 1], 6)
    mats = np.tile([0, 1], 6)
    diag = embedding_diagnostics(X, shapes, mats)
    assert diag.mix_sil == 0.5
    # every tie resolves to index 0 (row 0 picks 1): exactly the shape-0 rows are right
    assert diag.one_nn_shape_acc == 0.5
    assert np.isfinite(diag.dgi)


def test_diagnostics_errors(rng):
    X = rng.standard_normal((8, 2))
    with pytest.raises(DiagnosticsError):
        embedding_diagnostics(X, np.repeat([0, 1], 4), np.zeros(8))
    with pytest.raises(DiagnosticsError):
        embedding_diagnostics(X, np.zeros(8), np.tile([0, 1], 4))
    with pytest.raises(DiagnosticsError):
        embedding_diagnostics(X, np.array([0, 1, 1, 1, 1, 1, 1, 1]), np.tile([0, 1], 4))

import json

import numpy as np
import pytest

from planted import planted_dataset
from tactile_fewshot.featopt import (
    DScanConfig,
    EpisodeInfeasibleError,
    NcaConfig,
    NcaError,
    PretrainConfig,
    PretrainedModel,
    d_scan,
    fit_nca,
    nca_objective,
    pretrain,
    rank_features,
    sample_episode_indices,
    select_top_d,
)

INFORMATIVE = {0, 1, 2, 3, 4}


def naive_nca_value(X, y, w, lam, sigma=1.0):
    """Leave-one-out soft-neighbour accuracy minus the ridge term, by loops."""
    n = X.shape[0]
    total = 0.0
    for i in range(n):
        d = [np.sum(w * w * np.abs(X[i] - X[j])) if j != i else np.inf for j in range(n)]
        k = np.exp(-(np.array(d) - min(d)) / sigma)
        k /= k.sum()
        total += sum(k[j] for j in range(n) if y[j] == y[i] and j != i)
    return total / n - lam * np.sum(w * w)


# ---------------------------------------------------------------------------
# NCA


def test_objective_matches_naive_loop(rng):
    X = rng.standard_normal((25, 4))
    y = rng.integers(0, 3, 25)
    w = rng.uniform(0.5, 1.5, 4)
    value, _ = nca_objective(X, y, w, 0.05)
    assert value == pytest.approx(naive_nca_value(X, y, w, 0.05), rel=1e-12)


def test_objective_gradient_matches_finite_differences(rng):
    X = rng.standard_normal((30, 5))
    y = rng.integers(0, 3, 30)
    w = rng.uniform(0.5, 1.5, 5)
    _, g = nca_objective(X, y, w, 0.02)
    h = 1e-6
    fd = np.array([(nca_objective(X, y, w + h * e, 0.02)[0] - nca_objective(X, y, w - h * e, 0.02)[0]) / (2 * h) for e in np.eye(5)])
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_planted_features_ranked_first():
    X, y = planted_dataset(0)
    ranking = rank_features(fit_nca(X, y))
    assert set(ranking[:5]) == INFORMATIVE


def test_shuffled_labels_stay_at_chance():
    X, y = planted_dataset(0)
    planted = fit_nca(X, y).objective_trace[-1]
    for seed in range(3):
        null = fit_nca(X, np.random.default_rng(seed).permutation(y)).objective_trace[-1]
        # 10 classes: leave-one-out soft accuracy near 0.1 once labels carry no signal
        assert null < 0.15 and null < 0.3 * planted


def test_column_permutation_equivariance():
    X, y = planted_dataset(2)
    perm = np.random.default_rng(3).permutation(X.shape[1])
    w = fit_nca(X, y).weights
    wp = fit_nca(X[:, perm], y).weights
    np.testing.assert_allclose(wp, w[perm], rtol=1e-6, atol=1e-9)


def test_larger_ridge_shrinks_weights():
    X, y = planted_dataset(4)
    totals = [fit_nca(X, y, NcaConfig(lambda_nca=lam)).weights.sum() for lam in (0.0, 0.01, 0.1, 1.0)]
    assert all(b <= a + 1e-9 for a, b in zip(totals, totals[1:]))


def test_objective_trace_improves():
    X, y = planted_dataset(5)
    fit = fit_nca(X, y)
    assert fit.objective_trace[-1] >= fit.objective_trace[0]
    assert fit.lambda_used == pytest.approx(1 / 200)


def test_minibatch_path_runs_and_improves():
    X, y = planted_dataset(6, per_class=30)
    fit = fit_nca(X, y, NcaConfig(batch_size=120, max_iters=25))
    assert fit.objective_trace.size == 1 + 3  # start, steps 10 and 20, final
    assert fit.objective_trace[-1] > fit.objective_trace[0]
    assert np.all(fit.weights >= 0)


def test_nca_errors():
    X, y = planted_dataset(0)
    with pytest.raises(NcaError):
        fit_nca(X, np.zeros_like(y))
    y1 = y.copy()
    y1[0] = 99  # singleton class
    with pytest.raises(NcaError):
        fit_nca(X, y1)
    Xn = X.copy()
    Xn[3, 3] = np.nan
    with pytest.raises(NcaError):
        fit_nca(Xn, y)
    with pytest.raises(NcaError):
        fit_nca(X[:10], y)


# ---------------------------------------------------------------------------
# ranking and selection


def test_rank_small_case():
    np.testing.assert_array_equal(rank_features(np.array([0.1, 0.9, 0.5])), [1, 2, 0])


def test_equal_weights_keep_catalog_order():
    np.testing.assert_array_equal(rank_features(np.ones(7)), np.arange(7))


def test_rank_matches_stable_sort_oracle(rng):
    w = rng.integers(0, 4, 50).astype(float)
    expected = sorted(range(50), key=lambda i: -w[i])  # sorted() is stable
    np.testing.assert_array_equal(rank_features(w), expected)


def test_select_top_d(rng):
    x = rng.standard_normal(386)
    ranking = rng.permutation(386)
    np.testing.assert_array_equal(select_top_d(x, ranking, 386), x[ranking])
    np.testing.assert_array_equal(select_top_d(x, ranking, 1), [x[ranking[0]]])
    M = rng.standard_normal((4, 386))
    np.testing.assert_array_equal(select_top_d(M, ranking, 10), np.array([[row[ranking[j]] for j in range(10)] for row in M]))
    for bad in (0, 387):
        with pytest.raises(ValueError):
            select_top_d(x, ranking, bad)


# ---------------------------------------------------------------------------
# episodes and D-scan


def test_episode_indices_are_disjoint(rng):
    labels = np.repeat(np.arange(8), 25)
    for _ in range(50):
        classes, s, q = sample_episode_indices(labels, 5, 3, 7, rng)
        assert s.shape == (5, 3) and q.shape == (5, 7)
        assert len(set(s.ravel()) | set(q.ravel())) == 50
        for c, srow, qrow in zip(classes, s, q):
            assert np.all(labels[srow] == c) and np.all(labels[qrow] == c)


def test_episode_infeasible_messages():
    labels = np.repeat(np.arange(4), 10)
    with pytest.raises(EpisodeInfeasibleError, match="5-way episodes need 5 classes"):
        sample_episode_indices(labels, 5, 1, 1, np.random.default_rng(0))
    with pytest.raises(EpisodeInfeasibleError, match="class 0 has 10 trials"):
        sample_episode_indices(labels, 3, 5, 6, np.random.default_rng(0))


def test_single_element_grid():
    X, y = planted_dataset(0)
    ranking = rank_features(fit_nca(X, y))
    assert d_scan(X, y, ranking, grid=[7], episodes_per_D=10).selected_D == 7


def test_d_scan_on_planted_data():
    X, y = planted_dataset(0)
    ranking = rank_features(fit_nca(X, y))
    scan = d_scan(X, y, ranking)
    assert 3 <= scan.selected_D <= 8
    acc = dict(zip(scan.grid.tolist(), scan.mean_accuracy))
    assert acc[scan.selected_D] >= acc[20]
    assert [r[0] for r in scan.curve_rows()] == scan.grid.tolist()


def test_d_scan_ties_pick_smallest_d():
    # all signal lives in two columns; trailing zero columns leave every cosine unchanged
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(5), 20)
    angles = 2 * np.pi * y / 5
    X = np.zeros((y.size, 4))
    X[:, 0] = np.cos(angles) + 0.2 * rng.standard_normal(y.size)
    X[:, 1] = np.sin(angles) + 0.2 * rng.standard_normal(y.size)
    scan = d_scan(X, y, np.arange(4), episodes_per_D=20)
    assert scan.mean_accuracy[1] == scan.mean_accuracy[2] == scan.mean_accuracy[3] > scan.mean_accuracy[0]
    assert scan.selected_D == 2


def test_d_scan_reuses_episodes_across_d():
    X, y = planted_dataset(1)
    ranking = rank_features(fit_nca(X, y))
    a = d_scan(X, y, ranking, grid=[2, 5], episodes_per_D=30)
    b = d_scan(X, y, ranking, grid=[5], episodes_per_D=30)
    assert a.mean_accuracy[1] == b.mean_accuracy[0]


def test_d_scan_errors():
    X, y = planted_dataset(0)
    with pytest.raises(ValueError):
        d_scan(X, y, np.arange(20), grid=[0, 3])
    with pytest.raises(ValueError):
        d_scan(X, y, np.arange(20), grid=[21])
    with pytest.raises(EpisodeInfeasibleError):
        d_scan(X, y, np.arange(20), config=DScanConfig(k_shot=10, q_query=15))


# ---------------------------------------------------------------------------
# pretraining


@pytest.fixture(scope="module")
def planted_model():
    X, y = planted_dataset(0)
    return X, y, pretrain(X, y, catalog_version="test")


def test_pretrain_is_deterministic(planted_model):
    X, y, model = planted_model
    assert pretrain(X, y, catalog_version="test").fingerprint() == model.fingerprint()


def test_pretrain_embed_shape(planted_model):
    X, _, model = planted_model
    assert model.embed(X).shape == (200, model.selected_D)
    np.testing.assert_array_equal(model.top_features, model.ranking[: model.selected_D])


def test_all_features_baseline(planted_model):
    X, y, _ = planted_model
    base = pretrain(X, y, PretrainConfig(optimize_features=False), catalog_version="test")
    assert base.selected_D == 20 and base.nca_weights is None
    np.testing.assert_array_equal(base.ranking, np.arange(20))


def test_model_json_round_trip(tmp_path, planted_model):
    _, _, model = planted_model
    path = tmp_path / "model.json"
    model.save(path)
    back = PretrainedModel.load(path)
    assert back.fingerprint() == model.fingerprint()
    assert back.dscan.selected_D == model.selected_D
    doc = json.loads(path.read_text())
    doc["format"] = "other"
    with pytest.raises(ValueError):
        PretrainedModel.from_json(doc)


def test_closed_set_selection_is_compact(closed_model):
    # the synthetic catalog is mostly redundant; a small prefix should win
    assert 2 <= closed_model.selected_D <= 64

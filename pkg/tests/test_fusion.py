import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbvr.core import RankedList, ScoreMatrix, ap_of_scores
from cbvr.exceptions import ConfigError, DataError
from cbvr.fusion import (
    AverageFusion,
    LinearRegressionFusion,
    MhlfConfig,
    MultistageHybridFusion,
    baseline_fuse,
    fuse_ranked_lists,
    mhlf_fuse,
    pca_tree_cluster,
    project_to_simplex,
    rank_augment,
    smoothed_ap,
    strategy_weights,
    write_fusion_report,
)


def ids(n):
    return tuple(f"v{i:04d}" for i in range(n))


def duplicated_signals(seed=0, n=300, noise=0.3):
    """5 noisy copies of each of two orthogonal clean signals."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=n)
    B = rng.normal(size=n)
    B -= (A @ B) / (A @ A) * A
    rows = [A + noise * rng.normal(size=n) for _ in range(5)] + [B + noise * rng.normal(size=n) for _ in range(5)]
    return np.vstack(rows), A, B


def planted(seed=0, n=400, rows=6):
    rng = np.random.default_rng(seed)
    labels = rng.random(n) < 0.1
    labels[:3] = True
    values = rng.normal(size=(rows, n)) + labels[None, :] * np.linspace(0.2, 2.0, rows)[:, None]
    return values, labels


def test_essential_features_recover_clean_signals():
    values, A, B = duplicated_signals()
    m = ScoreMatrix(tuple(f"r{i}" for i in range(10)), ids(300), values)
    ess = pca_tree_cluster(m, leaf_size=5)
    assert ess.n_rows == 2
    corr = np.corrcoef(np.vstack([ess.values, A, B]))[:2, 2:]
    assert np.all(np.abs(corr).max(1) > 0.95)
    assert {int(np.argmax(np.abs(c))) for c in corr} == {0, 1}


def test_pca_tree_trivial_cases():
    row = np.arange(5.0)
    m = ScoreMatrix(("a", "b", "c"), ids(5), np.vstack([row] * 3))
    out = pca_tree_cluster(m, leaf_size=1)
    assert out.n_rows == 1
    np.testing.assert_array_equal(out.values[0], row)
    values, *_ = duplicated_signals()
    m = ScoreMatrix(tuple(f"r{i}" for i in range(10)), ids(300), values)
    single = pca_tree_cluster(m, leaf_size=10)
    np.testing.assert_allclose(single.values[0], values.mean(0))


def test_rank_augment_names_and_range():
    m = ScoreMatrix(("a",), ids(4), np.array([[3.0, 1.0, 2.0, 0.0]]))
    aug = rank_augment(m)
    assert aug.row_names == ("a", "a:rank")
    np.testing.assert_allclose(aug.values[1], [1, 1 / 3, 2 / 3, 0])


def test_strategy_examples():
    values, labels = planted()
    assert strategy_weights(values[:2], labels, "average").weights.tolist() == [0.5, 0.5]
    perfect = labels.astype(float)
    noise = np.random.default_rng(9).normal(size=labels.size)
    w = strategy_weights(np.vstack([perfect, noise]), labels, "single_ap").weights
    assert w[0] > w[1]
    dup_weights = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        lab = rng.random(400) < 0.1
        lab[:3] = True
        same_strength = rng.normal(size=(6, 400)) + lab * 1.0
        for which in (0, 5):
            dup_weights.append(strategy_weights(np.vstack([same_strength, same_strength[which]]), lab, "loo").weights[-1])
    # a duplicated row earns about nothing; uniform would be 1/7
    assert np.median(dup_weights) <= 0.01 and max(dup_weights) < 0.1
    for s in ("average", "single_ap", "loo", "sgd_ap"):
        wt = strategy_weights(values, labels, s).weights
        assert wt.sum() == pytest.approx(1.0) and np.all(wt >= 0)
    with pytest.raises(DataError):
        strategy_weights(values, np.zeros(labels.size, bool), "average")
    with pytest.raises(ConfigError):
        strategy_weights(values, labels, "median")


def test_zero_loo_weights_fall_back_to_uniform():
    labels = np.array([True, False, False])
    values = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    with pytest.warns(UserWarning):
        w = strategy_weights(values, labels, "loo").weights
    np.testing.assert_array_equal(w, [0.5, 0.5])


def test_sgd_ap_improves_smoothed_ap():
    values, labels = planted(1)
    w = strategy_weights(values, labels, "sgd_ap").weights
    uniform = np.full(len(w), 1 / len(w))
    assert smoothed_ap(w @ values, labels) > smoothed_ap(uniform @ values, labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_simplex_projection(v):
    p = project_to_simplex(np.array(v))
    assert p.sum() == pytest.approx(1.0) and np.all(p >= 0)
    # projecting a point already on the simplex is a no-op
    np.testing.assert_allclose(project_to_simplex(p), p, atol=1e-12)


def test_mhlf_weights_are_convex_combination():
    values, labels = planted(2)
    m = ScoreMatrix(tuple(f"r{i}" for i in range(6)), ids(400), values, labels)
    est = MultistageHybridFusion().fit(m)
    stacked = np.vstack(list(est.strategy_weights_.values()))
    np.testing.assert_allclose(est.weights_, stacked.mean(0))
    assert est.weights_.sum() == pytest.approx(1.0)
    report = est.report()
    assert report["stage_rows"][:6] == list(m.row_names)
    assert any(n.startswith("essential:") for n in report["stage_rows"])


def test_single_source_keeps_its_ranking():
    values, labels = planted(3, rows=1)
    m = ScoreMatrix(("only",), ids(400), values, labels)
    fused = mhlf_fuse(m, labels, m)
    ref = RankedList("e", tuple(np.array(m.video_ids)[np.lexsort((np.arange(400), -values[0]))]), values[0])
    assert fused.video_ids == ref.video_ids


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 5))
def test_fused_ranking_invariant_to_duplicated_row(seed, which):
    values, labels = planted(seed)
    names = tuple(f"r{i}" for i in range(6))
    m = ScoreMatrix(names, ids(400), values, labels)
    test = ScoreMatrix(names, ids(400), values + np.random.default_rng(seed + 1).normal(size=values.shape))
    base = mhlf_fuse(m, labels, test)
    dup_names = names + ("dup",)
    m2 = ScoreMatrix(dup_names, ids(400), np.vstack([values, values[which]]), labels)
    t2 = ScoreMatrix(dup_names, ids(400), np.vstack([test.values, test.values[which]]))
    assert mhlf_fuse(m2, labels, t2).video_ids == base.video_ids


def test_ablations_change_output_on_duplicated_construction():
    values, A, _ = duplicated_signals(noise=1.0)
    labels = A > np.quantile(A, 0.9)
    m = ScoreMatrix(tuple(f"r{i}" for i in range(10)), ids(300), values, labels)
    test = ScoreMatrix(m.row_names, ids(300), values[:, ::-1].copy())
    full = mhlf_fuse(m, labels, test, MhlfConfig(leaf_size=5))
    no_rank = mhlf_fuse(m, labels, test, MhlfConfig(leaf_size=5, rank_augment=False))
    no_cluster = mhlf_fuse(m, labels, test, MhlfConfig(leaf_size=5, cluster=False))
    assert not np.allclose(full.scores, no_rank.scores)
    assert not np.allclose(full.scores, no_cluster.scores)


def test_mhlf_rejects_mismatched_rows():
    values, labels = planted()
    m = ScoreMatrix(tuple(f"r{i}" for i in range(6)), ids(400), values, labels)
    with pytest.raises(DataError):
        mhlf_fuse(m, labels, m.select_rows(["r0", "r1"]))


def test_baselines():
    values, labels = planted(4, rows=2)
    perfect = np.where(labels, 1.0, 0.0) + 0.01 * np.arange(400) / 400
    noise = np.random.default_rng(5).normal(size=400)
    m = ScoreMatrix(("perfect", "noise"), ids(400), np.vstack([perfect, noise]), labels)
    lr = LinearRegressionFusion().fit(m)
    assert abs(lr.weights_[1]) < abs(lr.weights_[0])
    same = ScoreMatrix(("a", "b"), ids(400), np.vstack([values[0], values[0]]), labels)
    avg = baseline_fuse(same, labels, same, "average")
    assert avg.video_ids == mhlf_fuse(same.select_rows(["a"]), labels, same.select_rows(["a"])).video_ids
    flipped = same.select_rows(["b", "a"])
    np.testing.assert_array_equal(AverageFusion().fit(same).decision_function(same),
                                  AverageFusion().fit(flipped).decision_function(flipped))
    with pytest.raises(ConfigError):
        baseline_fuse(m, labels, m, "median")


def test_fuse_ranked_lists_weights():
    a = RankedList("e", ("x", "y", "z"), np.array([3.0, 2.0, 1.0]))
    b = RankedList("e", ("z", "y", "x"), np.array([3.0, 2.0, 1.0]))
    assert fuse_ranked_lists([a, b], [3, 1]).video_ids == ("x", "y", "z")
    assert fuse_ranked_lists([a, b], [1, 3]).video_ids == ("z", "y", "x")
    with pytest.raises(DataError):
        fuse_ranked_lists([a, b], [-1, 1])


def test_mhlf_beats_single_weak_rows_on_planted_data():
    values, labels = planted(6)
    m = ScoreMatrix(tuple(f"r{i}" for i in range(6)), ids(400), values, labels)
    fused = MultistageHybridFusion().fit(m).decision_function(m)
    assert ap_of_scores(fused, labels) >= ap_of_scores(values[0], labels)


def test_report_json(tmp_path):
    write_fusion_report(tmp_path / "r.json", {"E1": {"final_weights": [1.0]}}, {"E1": 0.5})
    assert json.loads((tmp_path / "r.json").read_text())["per_event_ap"] == {"E1": 0.5}

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.decomposition import PCA
from sklearn.pipeline import make_pipeline

from cbvr.encoders import (
    BowEncoder,
    DescriptorSet,
    FisherVectorEncoder,
    KMeansCodebook,
    MifsConfig,
    PCAProjector,
    VladEncoder,
    bow_encode,
    fisher_vector_blocks,
    gmm_fit,
    kmeans_fit,
    mifs_pool,
    nearest_centroid,
    read_descriptor_set,
    sted_augment,
    vlad_encode,
    write_descriptor_set,
)
from cbvr.exceptions import ConfigError, DataError, IndexFormatError


def make_set(rng, m=40, d=6, vid="v"):
    return DescriptorSet(rng.normal(size=(m, d)), rng.random((m, 3)), vid)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_kmeans_objective_non_increasing(seed, k):
    X = np.random.default_rng(seed).normal(size=(60, 3))
    km = kmeans_fit(X, k, seed=seed)
    h = np.array(km.objective_history_)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
    assert km.inertia_ == pytest.approx(h[-1])


def test_kmeans_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    X = np.vstack([c + 0.1 * rng.normal(size=(30, 2)) for c in centers])
    km = KMeansCodebook(3, random_state=1).fit(X)
    found = sorted(map(tuple, np.round(km.cluster_centers_)))
    assert found == sorted(map(tuple, centers))


def test_kmeans_needs_enough_rows():
    with pytest.raises(DataError):
        kmeans_fit(np.zeros((2, 2)), 3)


def test_nearest_centroid_ties_go_low():
    assert nearest_centroid(np.array([[0.5]]), np.array([[0.0], [1.0]]))[0] == 0


def test_gmm_likelihood_non_decreasing():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(-2, 0.5, size=(100, 2)), rng.normal(2, 1.0, size=(100, 2))])
    g = gmm_fit(X, 2, seed=0)
    h = np.array(g.log_likelihood_history_)
    assert np.all(np.diff(h) >= -1e-8 * abs(h[0]))
    assert g.weights_.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(g.predict_proba(X).sum(1), 1.0)


def test_fisher_blocks_match_per_descriptor_sum():
    rng = np.random.default_rng(4)
    train = rng.normal(size=(200, 3))
    g = gmm_fit(train, 3, seed=0)
    ds = make_set(rng, m=25, d=3)
    g_mu, g_var = fisher_vector_blocks(ds, g)
    resp = g.predict_proba(ds.descriptors)
    mu_ref = np.zeros_like(g_mu)
    var_ref = np.zeros_like(g_var)
    for n, x in enumerate(ds.descriptors):
        for k in range(3):
            sig = np.sqrt(g.variances_[k])
            mu_ref[k] += resp[n, k] * (x - g.means_[k]) / sig
            var_ref[k] += resp[n, k] * ((x - g.means_[k]) ** 2 / g.variances_[k] - 1)
    mu_ref /= ds.m * np.sqrt(g.weights_)[:, None]
    var_ref /= ds.m * np.sqrt(2 * g.weights_)[:, None]
    np.testing.assert_allclose(g_mu, mu_ref, atol=1e-10)
    np.testing.assert_allclose(g_var, var_ref, atol=1e-10)


def test_vlad_is_unit_norm_and_empty_is_zero():
    rng = np.random.default_rng(5)
    C = rng.normal(size=(4, 6))
    v = vlad_encode(make_set(rng), C)
    assert v.shape == (24,)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    empty = DescriptorSet(np.zeros((0, 6)), np.zeros((0, 3)))
    assert not vlad_encode(empty, C).any()


def test_bow_pyramid_layout():
    C = np.array([[0.0], [1.0]])
    # one descriptor near word 1 in the upper-right cell of the 2x2 grid
    ds = DescriptorSet(np.array([[0.9]]), np.array([[0.8, 0.1, 0.5]]))
    h = bow_encode(ds, C)
    assert h.shape == (2 * 5,)
    assert h[1] == 1.0
    # level 2: cell (ix=1, iy=0, it=0) -> slot 2, word 1
    assert h[2 + 2 * 2 + 1] == 1.0
    assert h.sum() == 2.0


def test_dimension_mismatch_raises():
    rng = np.random.default_rng(6)
    with pytest.raises(DataError):
        vlad_encode(make_set(rng, d=5), rng.normal(size=(3, 6)))


def test_pca_matches_sklearn_up_to_sign():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(80, 5)) @ rng.normal(size=(5, 5))
    ours = PCAProjector(3).fit(X)
    ref = PCA(3).fit(X)
    for a, b in zip(ours.components_, ref.components_):
        assert abs(abs(a @ b) - 1) < 1e-8
    with pytest.raises(ConfigError):
        PCAProjector(6).fit(X)


def test_sted_appends_coords():
    out = sted_augment(np.ones((2, 3)), np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]))
    np.testing.assert_array_equal(out[:, 3:], [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
    with pytest.raises(DataError):
        sted_augment(np.ones((1, 3)), np.array([[1.5, 0, 0]]))


def test_mifs_pool_checks_levels():
    rng = np.random.default_rng(8)
    sets = [make_set(rng, m=5) for _ in range(3)]
    assert mifs_pool(sets).m == 15
    with pytest.raises(DataError):
        mifs_pool(sets[:2])
    with pytest.raises(ConfigError):
        MifsConfig((2, 0))


def test_encoders_in_pipeline_shapes():
    rng = np.random.default_rng(9)
    sets = [make_set(rng, vid=f"v{i}") for i in range(6)]
    assert BowEncoder(4, pyramid=((1, 1, 1),)).fit(sets).transform(sets).shape == (6, 4)
    assert VladEncoder(4, pca_dim=3, sted=True).fit(sets).transform(sets).shape == (6, 4 * 6)
    fv = FisherVectorEncoder(2, pca_dim=4).fit(sets).transform(sets)
    assert fv.shape == (6, 2 * 2 * 4)
    np.testing.assert_allclose(np.linalg.norm(fv, axis=1), 1.0)
    pipe = make_pipeline(VladEncoder(3))
    assert pipe.fit_transform(sets).shape == (6, 18)


def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    ds = make_set(rng, m=7, d=4, vid="clip-é")
    write_descriptor_set(tmp_path / "d.bin", ds)
    back = read_descriptor_set(tmp_path / "d.bin")
    assert back.video_id == "clip-é"
    np.testing.assert_allclose(back.descriptors, ds.descriptors.astype(np.float32))
    data = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-3])
    with pytest.raises(IndexFormatError):
        read_descriptor_set(tmp_path / "t.bin")

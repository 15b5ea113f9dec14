import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenerouter.encoder import (
    ClusterModel,
    EncoderParams,
    PseudoLabel,
    assign_label,
    assign_labels,
    cluster_statistics,
    encode,
    fit_cluster_model,
    kmeans_fit,
    softmax,
    standardization,
)
from scenerouter.errors import TooFewSamples
from scenerouter.features import FEATURE_NAMES


def best_two_partition(X):
    """Exhaustive minimum within-cluster sum of squares over all 2-partitions."""
    n = len(X)
    best = np.inf
    for bits in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + bits)
        if lab.all() or not lab.any():
            continue
        cost = sum(((X[lab == c] - X[lab == c].mean(axis=0)) ** 2).sum() for c in (0, 1))
        best = min(best, cost)
    return best


def two_blobs(rng, n):
    a = rng.normal(0.0, 0.3, size=(n // 2, 2))
    b = rng.normal(0.0, 0.3, size=(n - n // 2, 2)) + [8.0, 0.0]
    return np.vstack([a, b])


def test_equal_logits_give_uniform_softmax():
    assert np.allclose(softmax(np.full(7, 3.3)), np.full(7, 1 / 7), atol=1e-15, rtol=0)


def test_identity_projection_hook_returns_softmax():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(10, 7))
    stats = standardization(z)
    params = EncoderParams(projected_dim=7, sparsity=1.0, temperature=1.0)
    out = encode(z, params, stats, projection=np.eye(7))
    assert np.allclose(out, softmax((z - stats[0]) / stats[1]), atol=1e-15, rtol=0)
    assert np.allclose(out.sum(axis=1), 1.0)


def test_sparsity_mask_is_fixed():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(100, 7)) * 5
    out = encode(z, EncoderParams(projected_dim=64, sparsity=0.5, seed=9), standardization(z))
    zero = out == 0.0
    assert (zero.sum(axis=1) == 32).all()
    assert (zero == zero[0]).all()


def test_encode_deterministic_and_single_row():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 7))
    p, stats = EncoderParams(seed=3), standardization(z)
    assert np.array_equal(encode(z, p, stats), encode(z, p, stats))
    assert np.array_equal(encode(z[1], p, stats), encode(z, p, stats)[1])


@pytest.mark.parametrize("kwargs", [{"projected_dim": 0}, {"sparsity": 0.0}, {"sparsity": 1.5},
                                    {"temperature": 0.0}])
def test_encoder_params_validation(kwargs):
    with pytest.raises(ValueError):
        EncoderParams(**kwargs)


def test_std_floor():
    means, stds = standardization(np.ones((4, 7)))
    assert (stds == 1e-12).all()


def test_k1_centroid_is_mean():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 3)) * [1, 5, 10]
    res = kmeans_fit(X, 1, seed=0)
    assert np.allclose(res.centroids[0], X.mean(axis=0), atol=1e-9, rtol=0)
    assert res.inertia == pytest.approx(X.var(axis=0).sum() * len(X), rel=1e-12)


def test_k_equals_n_zero_inertia():
    X = np.random.default_rng(5).normal(size=(6, 2))
    assert kmeans_fit(X, 6, seed=0).inertia == pytest.approx(0.0, abs=1e-24)


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        kmeans_fit(np.zeros((2, 2)), 3)


def test_inertia_history_non_increasing():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(int(rng.integers(10, 60)), 3))
        res = kmeans_fit(X, int(rng.integers(1, 6)), seed=seed, n_init=1)
        h = np.array(res.history)
        assert (np.diff(h) <= 1e-12 * np.maximum(1.0, h[:-1])).all()


def test_two_blob_recovery_matches_exhaustive():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = two_blobs(rng, int(rng.integers(6, 13)))
        res = kmeans_fit(X, 2, seed=seed)
        hits += abs(res.inertia - best_two_partition(X)) <= 1e-9 * max(1.0, res.inertia)
    assert hits >= 95


def test_blob_centroids_near_means():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 1.0, size=(200, 2))
    b = rng.normal(0.0, 1.0, size=(200, 2)) + [20.0, 0.0]
    res = kmeans_fit(np.vstack([a, b]), 2, seed=0)
    got = sorted(res.centroids.tolist())
    for c, blob in zip(got, (a, b)):
        assert np.linalg.norm(np.array(c) - blob.mean(axis=0)) < 3 * 1.0 / np.sqrt(200)


def test_deterministic_and_permutation_stable():
    rng = np.random.default_rng(8)
    X = np.vstack([rng.normal(size=(30, 2)) + c for c in ([0, 0], [10, 0], [0, 10])])
    r1, r2 = kmeans_fit(X, 3, seed=1), kmeans_fit(X, 3, seed=1)
    assert np.array_equal(r1.centroids, r2.centroids)
    r3 = kmeans_fit(X[rng.permutation(len(X))], 3, seed=1)
    # Optimal matching over the 3! index permutations.
    cost = min(np.abs(r1.centroids - r3.centroids[list(p)]).max() for p in itertools.permutations(range(3)))
    assert cost < 1e-6


def _model(k=3, seed=0):
    rng = np.random.default_rng(seed)
    feats = np.vstack([rng.normal(size=(40, 7)) + 4 * i for i in range(k)])
    return fit_cluster_model(feats, k, EncoderParams(seed=seed), seed=seed), feats


def test_assign_matches_linear_scan_and_fit_labels():
    model, feats = _model()
    assert np.array_equal(model.assign(feats), model.train_labels)
    emb = model.embed(feats)
    for row, lab in zip(emb, model.assign(feats)):
        d = [float(((row - c) ** 2).sum()) for c in model.centroids]
        assert lab == 1 + min(range(len(d)), key=lambda j: (d[j], j))


def test_assign_exact_centroid_and_tie():
    model, _ = _model()
    assert model.nearest(model.centroids[2])[0] == 3
    model.centroids[1] = model.centroids[0].copy()
    assert model.nearest(model.centroids[0])[0] == 1


def test_assign_label_and_labels():
    model, feats = _model()
    assert assign_label(feats[0], model) == model.train_labels[0]
    labs = assign_labels(model, feats[:3], [(0, 1), (0, 2), (1, 1)])
    assert labs[2] == PseudoLabel(1, 1, int(model.train_labels[2]))


def test_model_roundtrip(tmp_path):
    model, feats = _model()
    model.save(tmp_path / "m.txt")
    back = ClusterModel.load(tmp_path / "m.txt")
    assert np.array_equal(back.assign(feats), model.assign(feats))
    assert back.inertia == model.inertia and back.encoder == model.encoder
    back.save(tmp_path / "m2.txt")
    assert (tmp_path / "m.txt").read_bytes() == (tmp_path / "m2.txt").read_bytes()


def test_cluster_on_raw():
    model, feats = _model()
    raw = fit_cluster_model(feats, 3, cluster_on_raw=True)
    assert raw.centroids.shape == (3, 7)
    assert len(np.unique(raw.assign(feats))) == 3


def test_cluster_statistics_examples():
    v = np.arange(7.0)
    rows = cluster_statistics([1], [v])
    assert rows[0]["count"] == 1 and [rows[0][n] for n in FEATURE_NAMES] == list(v)
    rows = cluster_statistics([1, 1], [v, v])
    assert [rows[0][n] for n in FEATURE_NAMES] == list(v)
    rows = cluster_statistics([1, 1], [v, v], k=2)
    assert rows[1]["count"] == 0 and np.isnan(rows[1]["mean_speed"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cluster_statistics_group_by_oracle(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(50, 7))
    labels = rng.integers(1, 6, size=50)
    rows = cluster_statistics(labels, feats, k=5)
    for row in rows:
        members = [f for f, lab in zip(feats.tolist(), labels) if lab == row["cluster"]]
        assert row["count"] == len(members)
        for j, name in enumerate(FEATURE_NAMES):
            if members:
                assert row[name] == pytest.approx(sum(m[j] for m in members) / len(members), abs=1e-12)

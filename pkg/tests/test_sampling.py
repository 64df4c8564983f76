from __future__ import annotations

import itertools
import warnings

import numpy as np
import pytest
from scipy import stats

from alignet.errors import DegenerateClusters, DegenerateLabels, KTooLarge, TooFewCandidates, TooFewItems, ValidationError
from alignet.sampling import (
    KMeansResult,
    SamplerConfig,
    elbow_select,
    is_boundary_triple,
    kmeans,
    sample_class_boundary,
    sample_cluster_boundary,
    sample_random,
)
from alignet.store import HierarchyLabels
from alignet.synth import generate_blobs, generate_hierarchy, HierarchySpec


def best_match_rate(a, b):
    # k is small, so try every relabeling
    k = int(max(a.max(), b.max())) + 1
    return max(np.mean(np.asarray(perm)[a] == b) for perm in itertools.permutations(range(k)))


def test_kmeans_k_equals_m(rng):
    x = rng.normal(size=(12, 3))
    km = kmeans(x, 12)
    assert km.inertia == 0.0
    assert sorted(km.assignment.tolist()) == list(range(12))


def test_kmeans_k_one(rng):
    x = rng.normal(size=(50, 4))
    km = kmeans(x, 1)
    np.testing.assert_allclose(km.centroids[0], x.mean(0), atol=1e-12)
    assert km.inertia == pytest.approx(x.var(axis=0).sum() * 50, rel=1e-12)


def test_kmeans_recovers_blobs():
    x, labels = generate_blobs(3, 100, 5, separation=8.0, seed=4)
    km = kmeans(x, 3, seed=1, n_init=5)
    assert best_match_rate(km.assignment, labels) >= 0.99


def test_kmeans_invariants_and_determinism(rng):
    x = rng.normal(size=(200, 3))
    a = kmeans(x, 7, seed=5)
    b = kmeans(x, 7, seed=5)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    assert np.bincount(a.assignment, minlength=7).min() >= 1
    assert all(n <= o for o, n in zip(a.history, a.history[1:]))
    diff = x - a.centroids[a.assignment]
    assert a.inertia == pytest.approx(float((diff**2).sum()), rel=1e-12)


def test_kmeans_with_duplicate_points():
    x = np.zeros((6, 2))
    x[3:] = 1.0
    km = kmeans(x, 4)
    assert np.bincount(km.assignment, minlength=4).min() >= 1
    assert km.inertia == 0.0


def test_kmeans_errors(rng):
    with pytest.raises(KTooLarge):
        kmeans(rng.normal(size=(3, 2)), 4)
    with pytest.raises(KTooLarge):
        kmeans(rng.normal(size=(3, 2)), 0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_elbow_finds_true_cluster_count(seed):
    x, _ = generate_blobs(8, 40, 8, seed=seed)
    res = elbow_select(x, range(2, 17))
    assert abs(res.k - 8) <= 1
    assert not res.no_knee
    assert len(res.inertias) == 15


def test_elbow_without_knee(rng):
    with pytest.warns(RuntimeWarning):
        res = elbow_select(rng.normal(size=(300, 8)), range(2, 17))
    assert res.no_knee and res.k == 2


def test_elbow_needs_three_candidates(rng):
    with pytest.raises(TooFewCandidates):
        elbow_select(rng.normal(size=(20, 2)), [2, 2, 3, 3])


def test_random_only_triple():
    ds = sample_random(3, SamplerConfig("random", 1))
    assert ds.triplets.tolist() == [[0, 1, 2]]


def test_random_is_uniform():
    ds = sample_random(6, SamplerConfig("random", 100_000, seed=11))
    t = ds.triplets
    assert (t[:, 0] < t[:, 1]).all() and (t[:, 1] < t[:, 2]).all()
    code = t[:, 0] * 36 + t[:, 1] * 6 + t[:, 2]
    _, counts = np.unique(code, return_counts=True)
    assert len(counts) == 20
    chi2 = float(((counts - 5000.0) ** 2 / 5000.0).sum())
    assert chi2 <= stats.chi2.ppf(0.99, 19)


def test_random_errors_and_determinism():
    with pytest.raises(TooFewItems):
        sample_random(2, SamplerConfig("random", 5))
    a = sample_random(50, SamplerConfig("random", 1000, seed=2))
    b = sample_random(50, SamplerConfig("random", 1000, seed=2))
    np.testing.assert_array_equal(a.triplets, b.triplets)
    with pytest.raises(ValidationError):
        SamplerConfig("random", 0)
    with pytest.raises(ValidationError):
        SamplerConfig("nearest", 10)


def test_class_boundary_forced_case():
    ds = sample_class_boundary(np.array([0, 0, 1]), SamplerConfig("class_boundary", 50))
    assert {tuple(r) for r in ds.triplets.tolist()} == {(0, 1, 2)}


def test_class_boundary_predicate_holds():
    _, labels = generate_hierarchy(HierarchySpec(seed=3))
    ds = sample_class_boundary(labels, SamplerConfig("class_boundary", 10_000, seed=1), level="basic")
    assert all(is_boundary_triple(labels.basic, r) for r in ds.triplets)
    assert (np.diff(ds.triplets, axis=1) > 0).all()
    assert ds.triplets.max() < len(labels.basic)


def test_class_boundary_skips_unknown_labels():
    labels = np.array([0, 0, -1, 1, -1])
    ds = sample_class_boundary(labels, SamplerConfig("class_boundary", 200, seed=3))
    used = set(ds.triplets.ravel().tolist())
    assert used == {0, 1, 3}


def test_class_boundary_degenerate():
    with pytest.raises(DegenerateLabels):
        sample_class_boundary(np.zeros(5, dtype=int), SamplerConfig("class_boundary", 5))
    with pytest.raises(DegenerateLabels):
        sample_class_boundary(np.arange(5), SamplerConfig("class_boundary", 5))


def test_class_boundary_same_class_size_proportional():
    labels = np.array([0] * 30 + [1] * 10)
    ds = sample_class_boundary(labels, SamplerConfig("class_boundary", 40_000, seed=0))
    g = labels[ds.triplets]
    shared = np.where(g[:, 0] == g[:, 1], g[:, 0], g[:, 2])
    assert np.mean(shared == 0) == pytest.approx(0.75, abs=0.01)


def test_cluster_boundary_cases():
    km = KMeansResult(np.zeros((2, 1)), np.array([1, 0, 0]), 0.0, 1, seed=4)
    ds = sample_cluster_boundary(km, SamplerConfig("cluster_boundary", 20, seed=4))
    assert {tuple(r) for r in ds.triplets.tolist()} == {(0, 1, 2)}
    assert "k=2" in ds.source_tag and "seed=4" in ds.source_tag
    with pytest.raises(DegenerateClusters):
        sample_cluster_boundary(KMeansResult(np.zeros((1, 1)), np.zeros(4, dtype=int), 0.0, 1),
                                SamplerConfig("cluster_boundary", 5))


def test_cluster_boundary_matches_class_boundary_when_clusters_are_classes():
    _, labels = generate_hierarchy(HierarchySpec(seed=2))
    km = KMeansResult(np.zeros((16, 1)), labels.basic.copy(), 0.0, 1)
    cfg = SamplerConfig("cluster_boundary", 5000, seed=8)
    a = sample_cluster_boundary(km, cfg)
    b = sample_class_boundary(labels, SamplerConfig("class_boundary", 5000, seed=8), level="basic")
    np.testing.assert_array_equal(a.triplets, b.triplets)


def test_cluster_boundary_triples_mostly_share_superordinate():
    x, labels = generate_hierarchy(HierarchySpec(seed=1))
    km = kmeans(x, 16, seed=0, n_init=3)
    ds = sample_cluster_boundary(km, SamplerConfig("cluster_boundary", 5000, seed=1))
    sup = labels.superordinate[ds.triplets]
    two_same_one_diff = np.array([is_boundary_triple(s, (0, 1, 2)) for s in sup])
    assert two_same_one_diff.mean() > 0.5

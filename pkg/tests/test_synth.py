from __future__ import annotations

import numpy as np
import pytest

from alignet.errors import IndexOutOfRange, ValidationError
from alignet.evaluation import loo_noise_ceiling, ooo_accuracy, spearman, subject_matrix_rows
from alignet.store import TripletDataset
from alignet.synth import (
    HierarchySpec,
    all_triplets,
    corrupt_teacher,
    expected_loo_ceiling,
    generate_blobs,
    generate_hierarchy,
    nuisance_view,
    simulate_responses,
    simulate_rts,
)
from alignet.triplets import triplet_entropy

from conftest import random_triplets


def mean_dist(x, mask):
    i, j = np.nonzero(np.triu(mask, 1))
    return float(np.sqrt(((x[i] - x[j]) ** 2).sum(1)).mean())


def test_hierarchy_distance_ordering():
    x, lab = generate_hierarchy(HierarchySpec(3, 3, 2, 4, (10.0, 1.0, 0.1, 0.01), p=16, seed=0))
    d = x.data
    sub = lab.subordinate[:, None] == lab.subordinate[None, :]
    basic = lab.basic[:, None] == lab.basic[None, :]
    sup = lab.superordinate[:, None] == lab.superordinate[None, :]
    within_sub = mean_dist(d, sub)
    within_basic = mean_dist(d, basic & ~sub)
    within_sup = mean_dist(d, sup & ~basic)
    across = mean_dist(d, ~sup)
    assert within_sub < within_basic < within_sup < across


def test_hierarchy_shapes_and_determinism():
    x, lab = generate_hierarchy(HierarchySpec(1, 1, 1, 1, p=5))
    assert x.data.shape == (1, 5) and len(lab) == 1
    a, la = generate_hierarchy(HierarchySpec(seed=4))
    b, lb = generate_hierarchy(HierarchySpec(seed=4))
    assert a == b
    np.testing.assert_array_equal(la.basic, lb.basic)
    assert a.data.shape == (256, 32)
    # ids are unique per level and nested
    assert lab.superordinate.max() == 0
    assert len(np.unique(la.subordinate)) == 32 and len(np.unique(la.basic)) == 16
    with pytest.raises(ValidationError):
        HierarchySpec(0)
    with pytest.raises(ValidationError):
        HierarchySpec(dispersions=(1.0, 0.0, 1.0, 1.0))


def test_responses_noise_free_limit(rng):
    x, _ = generate_hierarchy(HierarchySpec(seed=1))
    t = random_triplets(rng, 256, 200)
    choices, p = simulate_responses(x, t, 1e-9, n_subjects=4, seed=0)
    truth = np.argmax(p, axis=1)
    assert (choices == truth[None, :]).all()


def test_response_frequencies_match_probabilities(rng):
    x, _ = generate_hierarchy(HierarchySpec(seed=2))
    t = random_triplets(rng, 256, 5)
    choices, p = simulate_responses(x, t, 0.5, n_subjects=100_000, seed=1)
    freq = np.stack([(choices == c).mean(axis=0) for c in range(3)], axis=1)
    se = np.sqrt(p * (1 - p) / 100_000)
    assert (np.abs(freq - p) <= 3 * se + 1e-12).all()


def test_responses_determinism_and_errors(rng):
    x, _ = generate_hierarchy(HierarchySpec(seed=2))
    t = random_triplets(rng, 256, 20)
    a, _ = simulate_responses(x, t, 0.5, 3, seed=1)
    b, _ = simulate_responses(x, t, 0.5, 3, seed=1)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(IndexOutOfRange):
        simulate_responses(x, [[0, 1, 999]], 0.5)
    with pytest.raises(ValidationError):
        simulate_responses(x, t, 0.5, 0)


def test_rts(rng):
    p = rng.dirichlet(np.ones(3), size=5000)
    h = triplet_entropy(p)
    exact = simulate_rts(p, noise_sd=0.0, seed=0).aggregate()
    assert spearman(h, [exact[s] for s in range(5000)]) == 1.0
    # several RTs per triplet: one draw cannot reach 0.9 at this noise level
    noisy = simulate_rts(p, noise_sd=0.1, seed=0, n_obs=10).aggregate()
    assert spearman(h, [noisy[s] for s in range(5000)]) >= 0.9
    flat = simulate_rts(np.tile([0.2, 0.3, 0.5], (10, 1)), noise_sd=0.0).rts
    assert len({v for vals in flat.values() for v in vals}) == 1
    with pytest.raises(ValidationError):
        simulate_rts(p, noise_sd=-1.0)


def test_expected_ceiling_matches_simulation(rng):
    x, _ = generate_hierarchy(HierarchySpec(seed=1))
    t = random_triplets(rng, 256, 4000)
    choices, p = simulate_responses(x, t, 0.5, n_subjects=5, seed=3)
    rows = subject_matrix_rows(choices)
    per = np.array([loo_noise_ceiling([r]) for r in rows])
    boot = [per[rng.integers(0, len(per), len(per))].mean() for _ in range(1000)]
    lo, hi = np.percentile(boot, [0.5, 99.5])
    assert lo <= expected_loo_ceiling(p, 5) <= hi


def test_expected_ceiling_closed_forms():
    # a unanimous generator always agrees with itself
    assert expected_loo_ceiling(np.array([[1.0, 0.0, 0.0]]), 4) == pytest.approx(1.0)
    # two subjects: held-out matches the other one with probability sum p^2
    p = np.array([[0.5, 0.3, 0.2]])
    assert expected_loo_ceiling(p, 2) == pytest.approx(0.25 + 0.09 + 0.04)
    with pytest.raises(ValidationError):
        expected_loo_ceiling(p, 1)


def test_corrupted_teacher_leaves_headroom(rng):
    x, _ = generate_hierarchy(HierarchySpec(seed=1))
    t = random_triplets(rng, 256, 3000)
    choices, p = simulate_responses(x, t, 0.5, 1, seed=3)
    ds = TripletDataset(t, choice=choices[0])
    generator = ooo_accuracy(x, ds)
    teacher = ooo_accuracy(corrupt_teacher(x, 0.8, 0.1, seed=2), ds)
    assert 0.15 <= generator - teacher <= 0.25
    assert corrupt_teacher(x, 0.0, 0.0, seed=2) == x


def test_blobs_and_views():
    x, labels = generate_blobs(4, 10, 3, separation=5.0, seed=0)
    assert x.data.shape == (40, 3) and np.bincount(labels).tolist() == [10] * 4
    truth, _ = generate_hierarchy(HierarchySpec(seed=0))
    v = nuisance_view(truth, dims=8, nuisance_sd=1.0, scale=2.0, seed=1)
    assert v.data.shape == (256, 40)
    np.testing.assert_allclose(v.data[:, :32], 2.0 * truth.data, atol=1e-6)
    assert len(all_triplets(6)) == 20

from __future__ import annotations

import numpy as np
import pytest

from alignet.errors import DimensionMismatch, EmptyDataset, IndexOutOfRange
from alignet.store import TripletDataset
from alignet.synth import simulate_responses
from alignet.triplets import triplet_probs, triplet_similarities
from alignet.vice import (
    GaussianEmbedding,
    McConfig,
    ViceConfig,
    fit_gaussian_embeddings,
    mc_triplet_probs,
    sample_embedding,
)

from conftest import random_triplets


def test_sample_embedding(rng):
    mu = rng.normal(size=(5, 3))
    ls = rng.normal(size=(5, 3))
    g = GaussianEmbedding(mu, ls)
    np.testing.assert_array_equal(sample_embedding(g, np.zeros((5, 3))).data, mu)
    tiny = GaussianEmbedding(mu, np.full((5, 3), -1e6))
    np.testing.assert_allclose(sample_embedding(tiny, rng.normal(size=(5, 3))).data, mu, atol=1e-15)
    eps = rng.normal(size=(5, 3))
    got = sample_embedding(g, eps).data
    for i in range(5):
        for d in range(3):
            assert abs(got[i, d] - (mu[i, d] + np.exp(ls[i, d]) * eps[i, d])) <= 1e-15
    with pytest.raises(DimensionMismatch):
        sample_embedding(g, np.zeros((5, 2)))
    with pytest.raises(DimensionMismatch):
        GaussianEmbedding(mu, ls[:, :2])


def test_mc_collapses_to_point_estimate(rng):
    mu = rng.normal(size=(8, 4))
    t = random_triplets(rng, 8, 30)
    g = GaussianEmbedding(mu, np.full(mu.shape, -40.0))
    np.testing.assert_allclose(mc_triplet_probs(g, t, McConfig(5)),
                               triplet_probs(triplet_similarities(mu, t)), atol=1e-10)


def test_mc_against_large_sample_reference(rng):
    mu = rng.normal(size=(6, 3))
    g = GaussianEmbedding(mu, np.zeros(mu.shape))
    t = np.array([[0, 1, 2], [3, 4, 5], [0, 3, 5]])
    ref = mc_triplet_probs(g, t, McConfig(100_000, seed=99))
    # per-draw spread estimated from a separate batch of samples
    draws = np.stack([mc_triplet_probs(g, t, McConfig(1, seed=1000 + r)) for r in range(2000)])
    se = draws.std(axis=0) / np.sqrt(50)
    est = mc_triplet_probs(g, t, McConfig(50, seed=5))
    assert (np.abs(est - ref) <= 3 * se + 1e-12).all()


def test_mc_properties(rng):
    g = GaussianEmbedding(rng.normal(size=(10, 3)), np.full((10, 3), 0.5))
    t = random_triplets(rng, 10, 40)
    a = mc_triplet_probs(g, t, McConfig(50, seed=3))
    np.testing.assert_array_equal(a, mc_triplet_probs(g, t, McConfig(50, seed=3)))
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-12)
    with pytest.raises(IndexOutOfRange):
        mc_triplet_probs(g, [[0, 1, 10]])


def test_more_samples_reduce_variance(rng):
    g = GaussianEmbedding(rng.normal(size=(6, 3)), np.zeros((6, 3)))
    t = [[0, 1, 2]]
    v5 = np.var([mc_triplet_probs(g, t, McConfig(5, seed=s))[0, 0] for s in range(100)])
    v50 = np.var([mc_triplet_probs(g, t, McConfig(50, seed=s))[0, 0] for s in range(100)])
    assert v50 < v5


def synth_choices(seed, m=30, d=4, n=6000):
    rng = np.random.default_rng(seed)
    mu_star = rng.normal(size=(m, d)) * 1.5
    t = random_triplets(rng, m, n)
    choices, p = simulate_responses(mu_star, t, 1.0, 1, seed=seed)
    return mu_star, TripletDataset(t, choice=choices[0]), p


def test_fit_recovers_generator_accuracy():
    mu_star, ds, p = synth_choices(0)
    n = len(ds)
    train = TripletDataset(ds.triplets[: n - 1000], choice=ds.choice[: n - 1000])
    held_t, held_c = ds.triplets[n - 1000 :], ds.choice[n - 1000 :]
    g, log = fit_gaussian_embeddings(train, 30, ViceConfig(dims=8, batch_size=256, epochs=60,
                                                           learning_rate=3e-2, val_fraction=0.0, seed=1))
    q = mc_triplet_probs(g, held_t, McConfig(50, seed=2))
    fitted = float(np.mean(np.argmax(q, axis=1) == held_c))
    generator = float(np.mean(np.argmax(p[n - 1000 :], axis=1) == held_c))
    assert fitted >= generator - 0.03
    loss = log.column("train_loss")
    assert loss[-1] < loss[0]


def test_fit_orders_items_by_frequency():
    # item 0 and 1 are paired more often than either is with item 2
    t = np.tile([[0, 1, 2]], (300, 1))
    choice = np.array([0] * 200 + [1] * 60 + [2] * 40)
    g, _ = fit_gaussian_embeddings(TripletDataset(t, choice=choice), 3,
                                   ViceConfig(dims=1, epochs=300, batch_size=300, val_fraction=0.0,
                                              l2_mu=0.0, seed=0))
    q = mc_triplet_probs(g, [[0, 1, 2]], McConfig(200, seed=1))[0]
    assert list(np.argsort(-q)) == list(np.argsort(-np.bincount(choice, minlength=3)))


def test_fit_errors():
    with pytest.raises(EmptyDataset):
        fit_gaussian_embeddings(TripletDataset(np.empty((0, 3)), choice=np.empty(0)), 3)

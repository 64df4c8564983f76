"""Synthetic ground truth: nested Gaussian hierarchies, simulated subjects and
response times, and a teacher-corruption operator.

All generators are deterministic functions of their ``seed``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, ValidationError
from .store import EmbeddingMatrix, HierarchyLabels, ResponseTimeTable, _as_array
from .triplets import triplet_entropy, triplet_probs, triplet_similarities


@dataclass(frozen=True)
class HierarchySpec:
    """Counts per level and the spread of each level around its parent.

    ``dispersions`` are (superordinate, basic, subordinate, item) offsets,
    given as the expected Euclidean norm of an offset vector.
    """

    superordinates: int = 4
    basics: int = 4
    subordinates: int = 2
    items: int = 8
    dispersions: tuple[float, float, float, float] = (2.0, 1.2, 0.7, 0.4)
    p: int = 32
    seed: int = 0

    def __post_init__(self):
        counts = (self.superordinates, self.basics, self.subordinates, self.items, self.p)
        if min(counts) < 1:
            raise ValidationError(f"hierarchy counts must be >= 1, got {counts}")
        if len(self.dispersions) != 4 or min(self.dispersions) <= 0:
            raise ValidationError("need four positive dispersions")

    @property
    def m(self) -> int:
        return self.superordinates * self.basics * self.subordinates * self.items


def generate_hierarchy(spec: HierarchySpec) -> tuple[EmbeddingMatrix, HierarchyLabels]:
    """Items ordered superordinate-major; ids are globally unique per level."""
    rng = np.random.default_rng(spec.seed)
    p = spec.p
    scale = [d / math.sqrt(p) for d in spec.dispersions]
    sup_mu = rng.normal(0.0, scale[0], size=(spec.superordinates, p))
    n_basic = spec.superordinates * spec.basics
    basic_mu = np.repeat(sup_mu, spec.basics, axis=0) + rng.normal(0.0, scale[1], size=(n_basic, p))
    n_sub = n_basic * spec.subordinates
    sub_mu = np.repeat(basic_mu, spec.subordinates, axis=0) + rng.normal(0.0, scale[2], size=(n_sub, p))
    x = np.repeat(sub_mu, spec.items, axis=0) + rng.normal(0.0, scale[3], size=(spec.m, p))
    sub = np.repeat(np.arange(n_sub), spec.items)
    basic = sub // spec.subordinates
    sup = basic // spec.basics
    ids = tuple(f"item{r}" for r in range(spec.m))
    return EmbeddingMatrix(x, ids), HierarchyLabels(sub, basic, sup, None, ids)


def random_orthogonal(p: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(p, p)))
    return q * np.sign(np.diag(r))


def corrupt_teacher(truth, severity: float = 0.8, noise_sd: float = 0.1, seed: int = 0) -> EmbeddingMatrix:
    """A misaligned view of ``truth``.

    A random subspace of ``round(severity * p)`` dimensions is rotated and its
    axes rescaled by log-normal factors of spread ``severity``; isotropic
    Gaussian noise of per-item norm ``noise_sd`` is then added.  The linear
    part is invertible, so an affine map can undo everything but the noise.
    """
    if not 0 <= severity <= 1:
        raise ValidationError("severity must lie in [0, 1]")
    if noise_sd < 0:
        raise ValidationError("noise_sd must be >= 0")
    x = _as_array(truth)
    m, p = x.shape
    rng = np.random.default_rng(seed)
    k = int(round(severity * p))
    q = random_orthogonal(p, rng)
    u = q[:, :k]
    mix = np.eye(p)
    if k:
        rot = random_orthogonal(k, rng)
        gains = np.exp(severity * 1.5 * rng.normal(size=k))
        mix = mix - u @ u.T + u @ (rot * gains) @ u.T
    out = x @ mix + rng.normal(0.0, noise_sd / math.sqrt(p), size=(m, p))
    ids = truth.item_ids if isinstance(truth, EmbeddingMatrix) else None
    return EmbeddingMatrix(out, ids)


def sample_choices(probs: np.ndarray, n_subjects: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_subjects`` pair indices per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((n_subjects, len(probs), 1))
    # guard the top edge against cdf[-1] rounding below u
    return np.minimum((u >= cdf[None, :, :]).sum(axis=2), 2)


def simulate_responses(truth, triplets, tau_h: float, n_subjects: int = 1,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sample subject choices from the softmax of ground-truth similarities.

    Returns ``(choices, p_star)``: ``choices[subject, s]`` is a pair index and
    ``p_star`` the exact probability triples the choices were drawn from.
    """
    if n_subjects < 1:
        raise ValidationError("n_subjects must be >= 1")
    x = _as_array(truth)
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if t.size and (t.min() < 0 or t.max() >= x.shape[0]):
        raise IndexOutOfRange("triplet index out of range for the ground-truth matrix")
    p_star = triplet_probs(triplet_similarities(x, t), tau_h)
    rng = np.random.default_rng(seed)
    return sample_choices(p_star, n_subjects, rng), p_star


def simulate_rts(p_star, noise_sd: float = 0.1, seed: int = 0, alpha: float = 0.7,
                 beta: float = 0.5, n_obs: int = 1) -> ResponseTimeTable:
    """log RT = alpha + beta * entropy(p*) + N(0, noise_sd^2), one or more draws per triplet."""
    if noise_sd < 0:
        raise ValidationError("noise_sd must be >= 0")
    h = np.atleast_1d(triplet_entropy(np.asarray(p_star, dtype=np.float64).reshape(-1, 3)))
    rng = np.random.default_rng(seed)
    log_rt = alpha + beta * h[:, None] + noise_sd * rng.normal(size=(len(h), n_obs))
    return ResponseTimeTable({s: tuple(float(v) for v in np.exp(log_rt[s])) for s in range(len(h))})


def expected_loo_ceiling(p_star, n_subjects: int) -> float:
    """Exact expectation of the leave-one-out ceiling when ``n_subjects``
    independent subjects answer each triplet from ``p_star``.

    Enumerates every count vector of the remaining ``n_subjects - 1`` answers.
    """
    if n_subjects < 2:
        raise ValidationError("the leave-one-out ceiling needs at least two subjects")
    p = np.asarray(p_star, dtype=np.float64).reshape(-1, 3)
    r = n_subjects - 1
    total = np.zeros(len(p))
    for c0 in range(r + 1):
        for c1 in range(r - c0 + 1):
            counts = (c0, c1, r - c0 - c1)
            coef = math.factorial(r) / (math.factorial(c0) * math.factorial(c1) * math.factorial(counts[2]))
            prob = coef * np.prod(p ** np.array(counts), axis=1)
            top = max(counts)
            tied = [c for c in range(3) if counts[c] == top]
            # held-out answer c scores 1/|tied| when c is among the tied majority
            hit = sum(p[:, c] for c in tied) / len(tied)
            total += prob * hit
    return float(total.mean())


def all_triplets(m: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(m), 3)), dtype=np.int64).reshape(-1, 3)


def generate_blobs(n_clusters: int, per_cluster: int, p: int, separation: float = 5.0,
                   seed: int = 0) -> tuple[EmbeddingMatrix, np.ndarray]:
    """Isotropic unit-variance Gaussian blobs whose centres are at least
    ``separation`` standard deviations apart (rejection sampled)."""
    if n_clusters < 1 or per_cluster < 1 or p < 1:
        raise ValidationError("blob counts must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(10_000):
        centres = rng.normal(size=(n_clusters, p)) * separation
        if n_clusters == 1:
            break
        diff = centres[:, None, :] - centres[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))[np.triu_indices(n_clusters, 1)]
        if dist.min() >= separation:
            break
    else:
        raise ValidationError("could not place blob centres; increase p or lower the separation")
    labels = np.repeat(np.arange(n_clusters), per_cluster)
    x = centres[labels] + rng.normal(size=(len(labels), p))
    return EmbeddingMatrix(x), labels


def nuisance_view(truth, dims: int = 32, nuisance_sd: float = 3.0, scale: float = 1.0,
                  seed: int = 0) -> EmbeddingMatrix:
    """Raw features of a model that sees the ground truth plus item-specific
    variation the simulated humans ignore.

    ``dims`` extra coordinates of isotropic noise (expected per-item norm
    ``nuisance_sd``) are appended and the whole matrix is multiplied by
    ``scale``, which sets the similarity range the features live in.
    """
    if dims < 0 or nuisance_sd < 0 or not scale > 0:
        raise ValidationError("need dims >= 0, nuisance_sd >= 0 and scale > 0")
    x = _as_array(truth)
    rng = np.random.default_rng(seed)
    extra = rng.normal(0.0, nuisance_sd / math.sqrt(max(dims, 1)), size=(len(x), dims))
    ids = truth.item_ids if isinstance(truth, EmbeddingMatrix) else None
    return EmbeddingMatrix(scale * np.hstack([x, extra]), ids)

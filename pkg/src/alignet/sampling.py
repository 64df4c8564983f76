"""k-means clustering, elbow selection of k, and triplet sampling strategies."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateClusters, DegenerateLabels, KTooLarge, TooFewCandidates, TooFewItems, ValidationError
from .store import HierarchyLabels, TripletDataset, _as_array

STRATEGIES = ("random", "class_boundary", "cluster_boundary")


@dataclass(eq=False)
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    iterations: int
    history: list[float] = field(default_factory=list)
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = len(x)
    chosen = [int(rng.integers(m))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(m, p=closest / total))
        else:
            # every point coincides with a centre already; pick an unused index
            rest = np.setdiff1d(np.arange(m), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def _inertia(x, centroids, assignment) -> float:
    diff = x - centroids[assignment]
    return float((diff * diff).sum())


def _update(x, assignment, k):
    """Cluster means; an empty cluster takes the point farthest from its centroid."""
    while True:
        counts = np.bincount(assignment, minlength=k)
        centroids = np.zeros((k, x.shape[1]))
        np.add.at(centroids, assignment, x)
        nonempty = counts > 0
        centroids[nonempty] /= counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size == 0:
            return centroids
        dist = ((x - centroids[assignment]) ** 2).sum(1)
        # a singleton donor would just move the hole elsewhere
        dist[counts[assignment] < 2] = -1.0
        far = int(np.argmax(dist))
        assignment[far] = empty[0]


def _lloyd(x, k, rng, max_iter, tol):
    centroids = _plusplus(x, k, rng)
    assignment = np.argmin(_sq_dists(x, centroids), axis=1)
    history = [_inertia(x, centroids, assignment)]
    it = 0
    for it in range(1, max_iter + 1):
        centroids = _update(x, assignment, k)
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        # keep the old label unless the move is a strict improvement
        old_d = ((x - centroids[assignment]) ** 2).sum(1)
        new_d = ((x - centroids[new]) ** 2).sum(1)
        new = np.where(new_d < old_d, new, assignment)
        changed = not np.array_equal(new, assignment)
        assignment = new
        inertia = _inertia(x, centroids, assignment)
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased at iteration {it}: {history[-1]} -> {inertia}")
        history.append(inertia)
        if not changed or history[-2] - inertia <= tol * history[-2]:
            break
    centroids = _update(x, assignment, k)
    inertia = _inertia(x, centroids, assignment)
    if inertia > history[-1] * (1 + 1e-12) + 1e-12:
        raise AssertionError("k-means inertia increased in the final update")
    history.append(inertia)
    return centroids, assignment, history, it


def kmeans(mat, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 1, tol: float = 0.0) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding; the best of ``n_init`` restarts.

    Squared Euclidean distances; every returned cluster is non-empty.
    """
    x = _as_array(mat)
    m = len(x)
    if not 1 <= k <= m:
        raise KTooLarge(f"k={k} must lie in [1, {m}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centroids, assignment, history, it = _lloyd(x, k, rng, max_iter, tol)
        if best is None or history[-1] < best.inertia:
            best = KMeansResult(centroids, assignment, history[-1], it, history, seed)
    return best


@dataclass
class ElbowResult:
    k: int
    candidates: list[int]
    inertias: list[float]
    no_knee: bool = False


def elbow_select(mat, k_candidates, seed: int = 0, n_init: int = 10, knee_ratio: float = 4.0) -> ElbowResult:
    """Pick k at the largest discrete second difference of log inertia.

    Working on the log scale makes the rule insensitive to how much variance
    each individual split removes.  When the mean log drop per candidate up to
    the chosen k is less than ``knee_ratio`` times the mean log drop after it,
    the curve has no clear knee: the smallest candidate is returned and
    ``no_knee`` is set.
    """
    cands = sorted(set(int(k) for k in k_candidates))
    if len(cands) < 3:
        raise TooFewCandidates(f"need at least 3 distinct k candidates, got {cands}")
    inertias = [kmeans(mat, k, seed=seed, n_init=n_init).inertia for k in cands]
    # inertia reaches exactly 0 at k = m
    floor = max(inertias[0], 1e-300) * 1e-12
    log_i = np.log(np.maximum(inertias, floor))
    second = log_i[:-2] - 2.0 * log_i[1:-1] + log_i[2:]
    i = int(np.argmax(second)) + 1
    drops = log_i[:-1] - log_i[1:]
    drop_in = drops[:i].mean()
    drop_out = max(drops[i:].mean(), 0.0)
    if drop_in <= 0 or drop_in < knee_ratio * drop_out:
        warnings.warn("inertia curve has no clear elbow; returning the smallest candidate", RuntimeWarning)
        return ElbowResult(cands[0], cands, inertias, no_knee=True)
    return ElbowResult(cands[i], cands, inertias)


@dataclass
class SamplerConfig:
    strategy: str = "cluster_boundary"
    count: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown sampling strategy {self.strategy!r}")
        if self.count < 1:
            raise ValidationError("count must be >= 1")


def sample_random(m: int, cfg: SamplerConfig) -> TripletDataset:
    """Uniform triples of distinct items, returned with ascending indices."""
    if m < 3:
        raise TooFewItems(f"need at least 3 items, got {m}")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.count
    a = rng.integers(0, m, size=n)
    b = rng.integers(0, m - 1, size=n)
    b = b + (b >= a)
    c = rng.integers(0, m - 2, size=n)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    t = np.sort(np.stack([a, b, c], axis=1), axis=1)
    return TripletDataset(t, source_tag=f"random m={m} seed={cfg.seed}")


def _boundary(groups: np.ndarray, cfg: SamplerConfig, err) -> np.ndarray:
    groups = np.asarray(groups, dtype=np.int64)
    known = np.flatnonzero(groups >= 0)
    if known.size == 0:
        raise err("no labeled items")
    order = known[np.argsort(groups[known], kind="stable")]
    labels, starts, sizes = np.unique(groups[order], return_index=True, return_counts=True)
    if len(labels) < 2:
        raise err("need at least two distinct groups")
    eligible = np.flatnonzero(sizes >= 2)
    if eligible.size == 0:
        raise err("no group has two or more members")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.count
    w = sizes[eligible].astype(np.float64)
    g = eligible[rng.choice(len(eligible), size=n, p=w / w.sum())]
    size, start = sizes[g], starts[g]
    u = (rng.random(n) * size).astype(np.int64)
    v = (rng.random(n) * (size - 1)).astype(np.int64)
    v = v + (v >= u)
    rest = len(order) - size
    r = (rng.random(n) * rest).astype(np.int64)
    r = np.where(r < start, r, r + size)
    t = np.stack([order[start + u], order[start + v], order[r]], axis=1)
    return np.sort(t, axis=1)


def _class_ids(labels, level: str) -> np.ndarray:
    if isinstance(labels, HierarchyLabels):
        if level not in ("subordinate", "basic", "superordinate", "cluster"):
            raise ValidationError(f"unknown label level {level!r}")
        return getattr(labels, level)
    return np.asarray(labels, dtype=np.int64)


def sample_class_boundary(labels, cfg: SamplerConfig, level: str = "basic") -> TripletDataset:
    """Two items from one class and one from another; items labeled -1 are skipped.

    The shared class is drawn with probability proportional to its size.
    """
    t = _boundary(_class_ids(labels, level), cfg, DegenerateLabels)
    return TripletDataset(t, source_tag=f"class_boundary level={level} seed={cfg.seed}")


def sample_cluster_boundary(km: KMeansResult, cfg: SamplerConfig) -> TripletDataset:
    t = _boundary(km.assignment, cfg, DegenerateClusters)
    return TripletDataset(t, source_tag=f"cluster_boundary k={km.k} seed={cfg.seed}")


def is_boundary_triple(groups: np.ndarray, triple) -> bool:
    a, b, c = (int(groups[i]) for i in triple)
    return (a == b != c) or (a != b == c) or (a == c != b)

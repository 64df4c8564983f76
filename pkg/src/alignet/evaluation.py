"""Alignment and representation metrics.

Odd-one-out evaluation uses raw dot-product similarities; RSA uses Pearson
correlation kernels.  Every function is pure apart from explicit seeds.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import (
    ComponentsTooMany,
    ConstantInput,
    DimensionMismatch,
    EmptyDataset,
    LengthMismatch,
    MissingRt,
    NoPairsInLevel,
    TooFewResponses,
    ValidationError,
    ZeroVarianceRow,
)
from .store import (
    ODD_POSITION,
    HierarchyLabels,
    ResponseTimeTable,
    TripletDataset,
    _as_array,
    atomic_write_text,
    validate_pairing,
)
from .triplets import odd_one_out, triplet_entropy, triplet_probs, triplet_similarities

LEVELS = ("same_subordinate", "same_basic", "same_superordinate", "different_superordinate")
EXACT_PAIR_LIMIT = 2000
MAX_SAMPLED_PAIRS = 200_000


def ooo_accuracy(model, ds: TripletDataset) -> float:
    """Share of triplets whose odd item under ``model`` matches the dataset's."""
    if len(ds) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    if ds.choice is None:
        raise ValidationError("odd-one-out accuracy needs hard choices")
    x = _as_array(model)
    validate_pairing(x, ds)
    pos = np.atleast_1d(odd_one_out(triplet_similarities(x, ds.triplets)))
    return float(np.mean(pos == ODD_POSITION[ds.choice]))


def rsm_pearson(mat) -> np.ndarray:
    x = _as_array(mat)
    if x.shape[1] < 2:
        raise ValidationError("Pearson RSMs need at least two dimensions")
    c = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(c, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ZeroVarianceRow(f"row {int(bad[0])} has zero variance")
    u = c / norms[:, None]
    r = np.clip(u @ u.T, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return r


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise LengthMismatch(f"length {len(a)} vs {len(b)}")
    if len(a) < 3:
        raise LengthMismatch("spearman needs at least 3 observations")
    ra = rankdata(a) - (len(a) + 1) / 2.0
    rb = rankdata(b) - (len(b) + 1) / 2.0
    na, nb = np.sqrt(ra @ ra), np.sqrt(rb @ rb)
    if na == 0 or nb == 0:
        raise ConstantInput("spearman is undefined for a constant input")
    return float(np.clip((ra @ rb) / (na * nb), -1.0, 1.0))


def upper_triangle(r: np.ndarray) -> np.ndarray:
    return r[np.triu_indices(len(r), 1)]


def rsa_score(model_rsm, human_rsm) -> float:
    a, b = np.asarray(model_rsm), np.asarray(human_rsm)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"RSM shapes {a.shape} and {b.shape} differ")
    return spearman(upper_triangle(a), upper_triangle(b))


def uncertainty_rt_correlation(model, ds: TripletDataset, rts: ResponseTimeTable, tau: float = 1.0,
                               cutoff: float = 10.0, how: str = "mean") -> float:
    """Spearman correlation of model triplet entropy with per-triplet log RT."""
    if len(ds) == 0:
        raise EmptyDataset("no triplets to correlate")
    x = _as_array(model)
    validate_pairing(x, ds)
    agg = rts.aggregate(cutoff=cutoff, how=how)
    missing = [s for s in range(len(ds)) if s not in agg]
    if missing:
        raise MissingRt(f"{len(missing)} triplets lack a usable RT, first is triplet {missing[0]}")
    h = np.atleast_1d(triplet_entropy(triplet_probs(triplet_similarities(x, ds.triplets), tau)))
    return spearman(h, [agg[s] for s in range(len(ds))])


def loo_noise_ceiling(responses) -> float:
    """Leave-one-out agreement with the majority of the remaining responses.

    A held-out response that belongs to a tied majority scores 1/|tied|.
    ``responses`` is one sequence of choices per triplet.
    """
    rows = list(responses)
    if not rows:
        raise EmptyDataset("no triplets")
    scores = np.empty(len(rows))
    for s, row in enumerate(rows):
        row = list(row.tolist() if isinstance(row, np.ndarray) else row)
        if len(row) < 2:
            raise TooFewResponses(f"triplet {s} has {len(row)} response(s); need at least 2")
        counts = Counter(row)
        total = 0.0
        for choice, n_c in counts.items():
            counts[choice] -= 1
            top = max(counts.values())
            tied = [c for c, v in counts.items() if v == top]
            if choice in tied:
                total += n_c / len(tied)
            counts[choice] += 1
        scores[s] = total / len(row)
    return float(scores.mean())


def subject_matrix_rows(choices: np.ndarray) -> list[np.ndarray]:
    """``choices[subject, triplet]`` as per-triplet response rows."""
    return list(np.asarray(choices).T)


@dataclass
class LevelShift:
    level: str
    mean: float
    ci_low: float
    ci_high: float
    count: int


@dataclass
class ShiftReport:
    levels: dict[str, LevelShift] = field(default_factory=dict)
    total_pairs: int = 0
    exact: bool = True
    seed: int = 0

    def __getitem__(self, level: str) -> LevelShift:
        if level not in self.levels:
            raise NoPairsInLevel(f"no pairs at level {level!r}")
        return self.levels[level]

    def rows(self) -> list[tuple]:
        return [(v.level, v.mean, v.ci_low, v.ci_high, v.count) for v in self.levels.values()]


def pair_levels(labels: HierarchyLabels, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Finest shared level per pair as an index into ``LEVELS``; -1 when unknown."""
    out = np.full(len(i), -1, dtype=np.int64)

    def same(col):
        return (col[i] >= 0) & (col[i] == col[j])

    known_sup = (labels.superordinate[i] >= 0) & (labels.superordinate[j] >= 0)
    out[known_sup & ~same(labels.superordinate)] = 3
    out[same(labels.superordinate)] = 2
    out[same(labels.basic)] = 1
    out[same(labels.subordinate)] = 0
    return out


def _within_group_pairs(groups, n, rng):
    known = np.flatnonzero(groups >= 0)
    order = known[np.argsort(groups[known], kind="stable")]
    _, starts, sizes = np.unique(groups[order], return_index=True, return_counts=True)
    w = sizes * (sizes - 1) / 2.0
    if w.sum() == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    g = rng.choice(len(sizes), size=n, p=w / w.sum())
    u = (rng.random(n) * sizes[g]).astype(np.int64)
    v = (rng.random(n) * (sizes[g] - 1)).astype(np.int64)
    v = v + (v >= u)
    return order[starts[g] + u], order[starts[g] + v]


def _sample_pairs(labels: HierarchyLabels, m: int, budget: int, rng):
    quota = budget // len(LEVELS)
    cols = (labels.subordinate, labels.basic, labels.superordinate)
    keep_i, keep_j = [], []
    for lvl in range(len(LEVELS)):
        got = 0
        for _ in range(20):
            if got >= quota:
                break
            if lvl < 3:
                i, j = _within_group_pairs(cols[lvl], 2 * quota, rng)
            else:
                i = rng.integers(0, m, size=2 * quota)
                j = rng.integers(0, m - 1, size=2 * quota)
                j = j + (j >= i)
            if not len(i):
                break
            ok = np.flatnonzero(pair_levels(labels, i, j) == lvl)[: quota - got]
            keep_i.append(i[ok])
            keep_j.append(j[ok])
            got += len(ok)
    return np.concatenate(keep_i), np.concatenate(keep_j)


def _bootstrap_ci(values: np.ndarray, n_boot: int, rng) -> tuple[float, float]:
    n = len(values)
    means = np.empty(n_boot)
    # chunk the resampling so memory stays bounded for large levels
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n_boot, chunk):
        stop = min(n_boot, start + chunk)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float(lo), float(hi)


def _same_pairs(cols, known=()) -> int:
    """Number of unordered pairs agreeing on every column in ``cols``, among
    items whose ``cols`` and ``known`` entries are all labeled."""
    ok = np.ones(len(known[0] if known else cols[0]), dtype=bool)
    for c in (*cols, *known):
        ok &= c >= 0
    if not cols:
        n = int(ok.sum())
        return n * (n - 1) // 2
    _, sizes = np.unique(np.stack([c[ok] for c in cols], axis=1), axis=0, return_counts=True)
    return int((sizes * (sizes - 1) // 2).sum())


def level_pair_counts(labels: HierarchyLabels) -> np.ndarray:
    """Exact population pair count of each level in ``LEVELS`` (inclusion-exclusion)."""
    a, b, c = labels.subordinate, labels.basic, labels.superordinate
    A, B, C = _same_pairs([a]), _same_pairs([b]), _same_pairs([c])
    AB, AC, BC, ABC = _same_pairs([a, b]), _same_pairs([a, c]), _same_pairs([b, c]), _same_pairs([a, b, c])
    l2 = C - BC - AC + ABC
    K = _same_pairs([], (c,))
    KA, KB, KAB = _same_pairs([a], (c,)), _same_pairs([b], (c,)), _same_pairs([a, b], (c,))
    l3 = (K - KA - KB + KAB) - l2
    return np.array([A, B - AB, l2, l3], dtype=np.int64)


def _zscore(d: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    w = np.ones_like(d) if w is None else w
    mu = np.average(d, weights=w)
    sd = np.sqrt(np.average((d - mu) ** 2, weights=w))
    if sd == 0:
        raise ConstantInput("all pair distances are equal")
    return (d - mu) / sd


def representation_shift(before, after, labels: HierarchyLabels, pair_sample: int = MAX_SAMPLED_PAIRS,
                         seed: int = 0, n_boot: int = 1000, require=()) -> ShiftReport:
    """Change in z-scored Euclidean pair distances, grouped by finest shared level.

    The z-scoring population is every pair with a known level.  Every pair is
    used when there are at most 2000 items; otherwise up to ``pair_sample``
    pairs are drawn, stratified by level, and each level is reweighted to its
    exact population share before z-scoring.  Levels without pairs are
    omitted unless listed in ``require``.
    """
    a, b = _as_array(before), _as_array(after)
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"before has {a.shape[0]} items, after has {b.shape[0]}")
    m = a.shape[0]
    if len(labels) != m:
        raise DimensionMismatch(f"labels cover {len(labels)} items, embeddings have {m}")
    rng = np.random.default_rng(seed)
    exact = m <= EXACT_PAIR_LIMIT
    if exact:
        i, j = np.triu_indices(m, 1)
    else:
        i, j = _sample_pairs(labels, m, pair_sample, rng)
    lv = pair_levels(labels, i, j)
    known = lv >= 0
    i, j, lv = i[known], j[known], lv[known]
    if len(i) < 2:
        raise NoPairsInLevel("fewer than two item pairs with a known level")
    w = None
    if not exact:
        drawn = np.bincount(lv, minlength=len(LEVELS))
        pop = level_pair_counts(labels)
        w = (pop / np.maximum(drawn, 1))[lv]
    da = np.sqrt(((a[i] - a[j]) ** 2).sum(axis=1))
    db = np.sqrt(((b[i] - b[j]) ** 2).sum(axis=1))
    dz = _zscore(db, w) - _zscore(da, w)
    report = ShiftReport(total_pairs=len(i), exact=exact, seed=seed)
    for k, name in enumerate(LEVELS):
        vals = dz[lv == k]
        if vals.size == 0:
            continue
        lo, hi = _bootstrap_ci(vals, n_boot, rng)
        report.levels[name] = LevelShift(name, float(vals.mean()), lo, hi, int(vals.size))
    for name in require:
        report[name]
    return report


def pca_explained_variance(mat, components: int | None = None) -> np.ndarray:
    x = _as_array(mat)
    m, p = x.shape
    limit = min(m, p)
    components = limit if components is None else int(components)
    if not 1 <= components <= limit:
        raise ComponentsTooMany(f"components={components} must lie in [1, {limit}]")
    c = x - x.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    var = sv * sv
    total = var.sum()
    if total == 0:
        raise ConstantInput("all rows are identical")
    return var[:components] / total


def format_table(columns, rows) -> str:
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def save_table(path, columns, rows) -> None:
    atomic_write_text(path, format_table(columns, rows))


def format_summary(values: dict) -> str:
    return "".join(f"{k} = {repr(v) if isinstance(v, float) else v}\n" for k, v in values.items())


def save_summary(path, values: dict) -> None:
    atomic_write_text(path, format_summary(values))


def load_summary(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValidationError(f"{path}: summary line without '=': {line!r}")
            out[key.strip()] = val.strip()
    return out

"""Triplet similarities, softmax choice probabilities and the alignment losses.

Everything here is vectorised over a leading batch axis: a batch of
similarity triples is an ``(n, 3)`` array ordered ``(s_ij, s_ik, s_jk)``.
Logarithms are natural.
"""

from __future__ import annotations

import numpy as np

from .errors import DuplicateIndex, EmptyBatch, EmptyDataset, IndexOutOfRange, LengthMismatch, ValidationError
from .store import ODD_POSITION, _as_array

LOG_FLOOR = 1e-300


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not (np.isfinite(tau) and tau > 0):
        raise ValidationError(f"temperature must be positive and finite, got {tau!r}")
    return tau


def pairwise_similarity(mat, i: int, j: int, k: int) -> np.ndarray:
    """Dot-product similarities ``(s_ij, s_ik, s_jk)`` of one triplet."""
    x = _as_array(mat)
    idx = (int(i), int(j), int(k))
    if len(set(idx)) < 3:
        raise DuplicateIndex(f"triplet {idx} repeats an index")
    if min(idx) < 0 or max(idx) >= x.shape[0]:
        raise IndexOutOfRange(f"triplet {idx} out of range for {x.shape[0]} rows")
    a, b, c = x[idx[0]], x[idx[1]], x[idx[2]]
    return np.array([a @ b, a @ c, b @ c])


def triplet_similarities(mat, triplets) -> np.ndarray:
    """Batch version of :func:`pairwise_similarity`, shape ``(n, 3)``."""
    x = _as_array(mat)
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if t.size and (t.min() < 0 or t.max() >= x.shape[0]):
        raise IndexOutOfRange(f"triplet index out of range for {x.shape[0]} rows")
    a, b, c = x[t[:, 0]], x[t[:, 1]], x[t[:, 2]]
    return np.stack([(a * b).sum(1), (a * c).sum(1), (b * c).sum(1)], axis=1)


def _shifted(s, tau: float) -> np.ndarray:
    # subtract the row max before dividing so large |s| / tau cannot overflow;
    # gaps too wide for float64 become -inf, i.e. probability 0
    tau = _check_tau(tau)
    s = np.asarray(s, dtype=np.float64)
    with np.errstate(over="ignore"):
        return (s - s.max(axis=-1, keepdims=True)) / tau


def triplet_probs(s, tau: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``s / tau`` with max subtraction."""
    e = np.exp(_shifted(s, tau))
    return e / e.sum(axis=-1, keepdims=True)


def log_triplet_probs(s, tau: float = 1.0) -> np.ndarray:
    """Log-softmax of ``s / tau``; exact for saturated inputs."""
    z = _shifted(s, tau)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def most_similar_pair(s) -> np.ndarray:
    """Index of the most similar pair; ties go to the earliest pair in (ij, ik, jk) order."""
    return np.argmax(np.asarray(s, dtype=np.float64), axis=-1)


def odd_one_out(s) -> np.ndarray | int:
    """Position (0 = i, 1 = j, 2 = k) of the item outside the most similar pair."""
    odd = ODD_POSITION[most_similar_pair(s)]
    return int(odd) if np.ndim(odd) == 0 else odd


def _paired(a, b, what: str, empty=EmptyDataset):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise empty(f"{what}: no triplets")
    if len(b) != len(a):
        raise LengthMismatch(f"{what}: {len(a)} vs {len(b)} entries")
    return a


def hard_align_loss(probs, choices) -> float:
    """Mean negative log probability of the chosen pairs."""
    q = _paired(probs, np.asarray(choices).reshape(-1), "hard_align_loss")
    c = np.asarray(choices, dtype=np.int64).reshape(-1)
    chosen = q[np.arange(len(q)), c]
    return float(-np.mean(np.log(np.maximum(chosen, LOG_FLOOR))))


def _xlogy(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # 0 * log(anything) := 0
    return np.where(p > 0, p * np.log(np.maximum(q, LOG_FLOOR)), 0.0)


def soft_align_loss(p_star, q) -> float:
    """Mean KL(p* || q) over triplets."""
    p = _paired(p_star, np.asarray(q).reshape(-1, 3), "soft_align_loss")
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    kl = (_xlogy(p, p) - _xlogy(p, q)).sum(axis=1)
    return float(np.mean(kl))


def soft_cross_entropy(p_star, q) -> float:
    """Mean cross entropy ``-sum p* log q``; differs from the KL by the mean entropy of p*."""
    p = _paired(p_star, np.asarray(q).reshape(-1, 3), "soft_cross_entropy")
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    return float(np.mean(-_xlogy(p, q).sum(axis=1)))


def kl_from_logits(p_target, s, tau: float) -> np.ndarray:
    """Per-row KL(p_target || softmax(s / tau)), using the log-softmax directly."""
    p = np.asarray(p_target, dtype=np.float64)
    logq = log_triplet_probs(s, tau)
    return (_xlogy(p, p) - np.where(p > 0, p * logq, 0.0)).sum(axis=-1)


def alignet_kl_loss(teacher_s, student_s, tau_t: float = 1.0, tau_s: float = 100.0) -> float:
    """Mean KL between teacher probabilities at ``tau_t`` and student probabilities at ``tau_s``."""
    ts = _paired(teacher_s, np.asarray(student_s).reshape(-1, 3), "alignet_kl_loss", EmptyBatch)
    ss = np.asarray(student_s, dtype=np.float64).reshape(-1, 3)
    return float(np.mean(kl_from_logits(triplet_probs(ts, tau_t), ss, tau_s)))


def triplet_entropy(q) -> np.ndarray | float:
    """Shannon entropy (nats) of each probability triple."""
    q = np.asarray(q, dtype=np.float64)
    h = -_xlogy(q, q).sum(axis=-1)
    h = np.clip(h, 0.0, np.log(3.0))
    return float(h) if h.ndim == 0 else h


def similarity_backward(mat, triplets, grad_s) -> np.ndarray:
    """Gradient w.r.t. the rows of ``mat`` given ``dL/ds`` for each triplet.

    Returns an array shaped like ``mat``; rows not used by any triplet are zero.
    """
    z = _as_array(mat)
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    g = np.asarray(grad_s, dtype=np.float64).reshape(-1, 3)
    zi, zj, zk = z[t[:, 0]], z[t[:, 1]], z[t[:, 2]]
    out = np.zeros_like(z)
    # s_ij = zi.zj, s_ik = zi.zk, s_jk = zj.zk
    np.add.at(out, t[:, 0], g[:, 0:1] * zj + g[:, 1:2] * zk)
    np.add.at(out, t[:, 1], g[:, 0:1] * zi + g[:, 2:3] * zk)
    np.add.at(out, t[:, 2], g[:, 1:2] * zi + g[:, 2:3] * zj)
    return out

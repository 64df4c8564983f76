"""Uncertainty-distillation transform: an affine map of a frozen embedding
space fitted to soft triplet probabilities.

The objective is the mean KL divergence between target probability triples and
the softmax of transformed dot-product similarities, plus ``lam`` times the
squared Frobenius distance of ``W`` from its own scaled identity
``(tr W / p) I``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, NonFiniteLoss, ValidationError
from .optim import make_optimizer
from .store import (
    EmbeddingMatrix,
    TripletDataset,
    _as_array,
    atomic_write_bytes,
    atomic_write_text,
    check_magic,
    read_bytes,
    read_f32,
    read_u32,
    to_f32_bytes,
    validate_pairing,
)
from .triplets import kl_from_logits, similarity_backward, triplet_probs, triplet_similarities


@dataclass(frozen=True, eq=False)
class AffineTransform:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"need a square W and matching b, got {W.shape} and {b.shape}")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise ValidationError("transform has non-finite entries")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def p(self) -> int:
        return self.W.shape[0]

    @classmethod
    def identity(cls, p: int) -> "AffineTransform":
        return cls(np.eye(p), np.zeros(p))

    def to_bytes(self) -> bytes:
        return b"AFF1" + struct.pack("<I", self.p) + to_f32_bytes(self.W, "W entry") + to_f32_bytes(self.b, "b entry")

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_transform(t: AffineTransform, path) -> None:
    atomic_write_bytes(path, t.to_bytes())


def load_transform(path) -> AffineTransform:
    buf = read_bytes(path)
    check_magic(buf, b"AFF1")
    p = read_u32(buf, 4, "transform width")
    W = read_f32(buf, 8, p * p, "W").reshape(p, p)
    b = read_f32(buf, 8 + 4 * p * p, p, "b")
    if len(buf) != 8 + 4 * p * (p + 1):
        raise ValidationError(f"unexpected trailing bytes at offset {8 + 4 * p * (p + 1)}")
    return AffineTransform(W, b)


@dataclass
class UdConfig:
    lam: float = 0.1
    learning_rate: float = 3e-4
    steps: int = 5000
    batch_size: int = 1024
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    tau: float = 1.0
    val_fraction: float = 0.1
    patience: int = 5
    normalize: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch_size must be >= 1")
        if not self.tau > 0:
            raise ValidationError("tau must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


def apply_affine(t: AffineTransform, mat) -> EmbeddingMatrix:
    x = _as_array(mat)
    if x.shape[1] != t.p:
        raise DimensionMismatch(f"transform width {t.p} does not match embedding width {x.shape[1]}")
    ids = mat.item_ids if isinstance(mat, EmbeddingMatrix) else None
    return EmbeddingMatrix(x @ t.W.T + t.b, ids)


def ud_regularizer(t: AffineTransform) -> float:
    W = t.W
    dev = W - (np.trace(W) / W.shape[0]) * np.eye(W.shape[0])
    return float(np.sum(dev * dev))


def _prepare(mat, ds: TripletDataset, cfg: UdConfig) -> np.ndarray:
    if len(ds) == 0:
        raise EmptyDataset("UD needs at least one soft-labeled triplet")
    if ds.soft is None:
        raise ValidationError("UD needs soft labels")
    x = _as_array(mat)
    validate_pairing(x, ds)
    if cfg.normalize:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    return x


def _terms(W, b, x, triplets, p_star, tau):
    z = x @ W.T + b
    s = triplet_similarities(z, triplets)
    soft = float(np.mean(kl_from_logits(p_star, s, tau)))
    return z, s, soft


def ud_objective(t: AffineTransform, mat, ds: TripletDataset, cfg: UdConfig) -> float:
    x = _prepare(mat, ds, cfg)
    if x.shape[1] != t.p:
        raise DimensionMismatch(f"transform width {t.p} does not match embedding width {x.shape[1]}")
    _, _, soft = _terms(t.W, t.b, x, ds.triplets, ds.soft, cfg.tau)
    return soft + cfg.lam * ud_regularizer(t)


def _grads(W, b, x, triplets, p_star, tau, lam):
    z, s, soft = _terms(W, b, x, triplets, p_star, tau)
    n = len(triplets)
    g_s = (triplet_probs(s, tau) - p_star) / (tau * n)
    g_z = similarity_backward(z, triplets, g_s)
    dev = W - (np.trace(W) / W.shape[0]) * np.eye(W.shape[0])
    # d/dW ||W - (tr W/p) I||^2 = 2 dev, since tr(dev) = 0
    dW = g_z.T @ x + 2.0 * lam * dev
    db = g_z.sum(axis=0)
    reg = float(np.sum(dev * dev))
    return dW, db, soft, reg


def ud_gradients(t: AffineTransform, mat, ds: TripletDataset, cfg: UdConfig) -> tuple[np.ndarray, np.ndarray]:
    x = _prepare(mat, ds, cfg)
    if x.shape[1] != t.p:
        raise DimensionMismatch(f"transform width {t.p} does not match embedding width {x.shape[1]}")
    dW, db, _, _ = _grads(t.W, t.b, x, ds.triplets, ds.soft, cfg.tau, cfg.lam)
    return dW, db


@dataclass
class TrainingLog:
    seed: int
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, **values):
        self.rows.append(tuple(values[c] for c in self.columns))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_tsv(self) -> str:
        lines = [f"# seed={self.seed}"] + [f"# {n}" for n in self.notes]
        lines.append("\t".join(self.columns))
        for r in self.rows:
            lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in r))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_tsv())


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_ud(mat, ds: TripletDataset, cfg: UdConfig | None = None,
           init: AffineTransform | None = None) -> tuple[AffineTransform, TrainingLog]:
    """Fit ``(W, b)`` with minibatch Adam/SGD from ``W = I, b = 0``.

    Early stopping keeps the iterate with the best validation objective. The
    returned transform never has a higher full-data objective than the start.
    """
    cfg = cfg or UdConfig()
    x = _prepare(mat, ds, cfg)
    p = x.shape[1]
    rng = np.random.default_rng(cfg.seed)
    train, val = split_indices(len(ds), cfg.val_fraction, rng)
    init = init or AffineTransform.identity(p)
    if init.p != p:
        raise DimensionMismatch("initial transform width does not match embeddings")
    W, b = np.array(init.W), np.array(init.b)
    opt = make_optimizer(cfg.optimizer, [W, b], cfg.learning_rate, cfg.beta1, cfg.beta2)

    t_all, p_all = ds.triplets, ds.soft
    sel = val if len(val) else train
    t_val, p_val = t_all[sel], p_all[sel]

    def full(Wc, bc):
        _, _, soft = _terms(Wc, bc, x, t_all, p_all, cfg.tau)
        reg = ud_regularizer(AffineTransform(Wc, bc)) if np.isfinite(Wc).all() else np.inf
        return soft, reg

    def val_objective(Wc, bc):
        _, _, soft = _terms(Wc, bc, x, t_val, p_val, cfg.tau)
        dev = Wc - (np.trace(Wc) / p) * np.eye(p)
        return soft + cfg.lam * float(np.sum(dev * dev)), soft

    log = TrainingLog(cfg.seed, ("epoch", "step", "objective", "soft", "reg", "val_soft", "grad_norm"))
    soft0, reg0 = full(W, b)
    initial = soft0 + cfg.lam * reg0
    best_val, v_soft = val_objective(W, b)
    log.add(epoch=0, step=0, objective=initial, soft=soft0, reg=reg0, val_soft=v_soft, grad_norm=float("nan"))
    best = (W.copy(), b.copy())
    stale = 0
    step = 0
    epoch = 0
    while step < cfg.steps:
        epoch += 1
        order = train[rng.permutation(len(train))]
        sq = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            dW, db, soft, reg = _grads(W, b, x, t_all[idx], p_all[idx], cfg.tau, cfg.lam)
            loss = soft + cfg.lam * reg
            if not np.isfinite(loss) or not (np.isfinite(dW).all() and np.isfinite(db).all()):
                raise NonFiniteLoss(f"non-finite UD loss at step {step}", step=step)
            sq = float(np.sum(dW * dW) + np.sum(db * db))
            opt.step([dW, db])
            step += 1
            if step >= cfg.steps:
                break
        soft_e, reg_e = full(W, b)
        obj = soft_e + cfg.lam * reg_e
        if not np.isfinite(obj):
            raise NonFiniteLoss(f"non-finite UD objective after step {step}", step=step)
        v_obj, v_soft = val_objective(W, b)
        log.add(epoch=epoch, step=step, objective=obj, soft=soft_e, reg=reg_e, val_soft=v_soft, grad_norm=np.sqrt(sq))
        if v_obj < best_val:
            best_val, best, stale = v_obj, (W.copy(), b.copy()), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.notes.append(f"early stop after epoch {epoch}")
                break

    out = AffineTransform(*best)
    soft_f, reg_f = full(out.W, out.b)
    if soft_f + cfg.lam * reg_f > initial:
        log.notes.append("fit did not improve the full-data objective; returning the initial transform")
        out = init
    return out, log


"""Student embedding heads distilled from teacher triplet probabilities.

A student maps fixed input features to embeddings, either with one affine
layer or with a small perceptron whose hidden layers use the exact GELU
``0.5 a (1 + erf(a / sqrt 2))``.  Its training objective is the mean
KL(teacher || student) over triplets, the student softmax taken at a high
temperature, plus ``lam * ||theta - theta_init||^2``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import DimensionMismatch, EmptyBatch, NonFiniteLoss, ValidationError
from .optim import cosine_lr, make_optimizer
from .store import (
    EmbeddingMatrix,
    TripletDataset,
    _as_array,
    atomic_write_bytes,
    check_magic,
    read_bytes,
    read_u32,
    validate_pairing,
)
from .triplets import kl_from_logits, most_similar_pair, similarity_backward, triplet_probs, triplet_similarities
from .ud import TrainingLog, split_indices

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: np.ndarray) -> np.ndarray:
    return 0.5 * a * (1.0 + erf(a / _SQRT2))


def gelu_grad(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(a / _SQRT2)) + a * _INV_SQRT_2PI * np.exp(-0.5 * a * a)


@dataclass(frozen=True)
class Architecture:
    kind: str
    widths: tuple[int, ...]
    nonlinearity: str = "gelu"

    def __post_init__(self):
        if self.kind not in ("affine", "mlp"):
            raise ValidationError(f"unknown student kind {self.kind!r}")
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValidationError(f"bad widths {self.widths}")
        if self.kind == "affine" and len(self.widths) != 2:
            raise ValidationError("an affine student has exactly two widths")
        if self.nonlinearity != "gelu":
            raise ValidationError(f"unsupported nonlinearity {self.nonlinearity!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.widths[:-1], self.widths[1:])]

    @property
    def size(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def describe(self) -> str:
        return " ".join([self.kind, self.nonlinearity, *map(str, self.widths)])

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        toks = text.split()
        try:
            return cls(toks[0], tuple(int(t) for t in toks[2:]), toks[1])
        except (IndexError, ValueError):
            raise ValidationError(f"bad architecture descriptor {text!r}") from None


@dataclass(eq=False)
class StudentParams:
    arch: Architecture
    theta: np.ndarray
    theta_init: np.ndarray

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        self.theta_init = np.array(self.theta_init, dtype=np.float64).reshape(-1)
        self.theta_init.setflags(write=False)
        if len(self.theta) != self.arch.size or len(self.theta_init) != self.arch.size:
            raise ValidationError(f"{self.arch.describe()} needs {self.arch.size} parameters")
        if not (np.isfinite(self.theta).all() and np.isfinite(self.theta_init).all()):
            raise ValidationError("student parameters must be finite")

    def layers(self, theta: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for o, i in self.arch.shapes:
            W = theta[pos : pos + o * i].reshape(o, i)
            pos += o * i
            b = theta[pos : pos + o]
            pos += o
            out.append((W, b))
        return out

    def with_theta(self, theta) -> "StudentParams":
        return StudentParams(self.arch, theta, self.theta_init)

    @classmethod
    def from_theta(cls, arch: Architecture, theta) -> "StudentParams":
        return cls(arch, theta, np.array(theta, dtype=np.float64))

    @classmethod
    def affine_identity(cls, p: int) -> "StudentParams":
        arch = Architecture("affine", (p, p))
        return cls.from_theta(arch, np.concatenate([np.eye(p).ravel(), np.zeros(p)]))

    @classmethod
    def random_mlp(cls, widths, seed: int = 0) -> "StudentParams":
        arch = Architecture("mlp", tuple(widths))
        rng = np.random.default_rng(seed)
        parts = []
        for o, i in arch.shapes:
            parts.append(rng.normal(0.0, 1.0 / np.sqrt(i), size=o * i))
            parts.append(np.zeros(o))
        return cls.from_theta(arch, np.concatenate(parts))


def save_student(sp: StudentParams, path) -> None:
    desc = sp.arch.describe().encode("utf-8")
    payload = b"".join([
        b"STU1",
        struct.pack("<I", len(desc)),
        desc,
        struct.pack("<I", len(sp.theta)),
        sp.theta.astype("<f8").tobytes(),
        sp.theta_init.astype("<f8").tobytes(),
    ])
    atomic_write_bytes(path, payload)


def load_student(path) -> StudentParams:
    buf = read_bytes(path)
    check_magic(buf, b"STU1")
    n_desc = read_u32(buf, 4, "descriptor length")
    if len(buf) < 8 + n_desc:
        raise ValidationError(f"{path}: descriptor runs past the end of the file")
    arch = Architecture.parse(buf[8 : 8 + n_desc].decode("utf-8"))
    off = 8 + n_desc
    n = read_u32(buf, off, "parameter count")
    off += 4
    if len(buf) != off + 16 * n:
        raise ValidationError(f"{path}: expected {off + 16 * n} bytes, found {len(buf)}")
    theta = np.frombuffer(buf, "<f8", n, off).astype(np.float64)
    theta_init = np.frombuffer(buf, "<f8", n, off + 8 * n).astype(np.float64)
    return StudentParams(arch, theta, theta_init)


@dataclass
class DistillConfig:
    tau_teacher: float = 1.0
    tau_student: float = 100.0
    lam: float = 0.1
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    optimizer: str = "adam"
    batch_size: int = 1024
    steps: int = 2000
    cosine: bool = False
    warmup: int = 0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (self.tau_teacher > 0 and self.tau_student > 0):
            raise ValidationError("temperatures must be positive")
        if not self.lam >= 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.steps < 1:
            raise ValidationError("batch_size and steps must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in [0, 1)")


def _forward(sp: StudentParams, theta: np.ndarray, x: np.ndarray):
    layers = sp.layers(theta)
    if x.shape[1] != sp.arch.widths[0]:
        raise DimensionMismatch(f"student expects width {sp.arch.widths[0]}, got {x.shape[1]}")
    acts = [x]
    pre = []
    h = x
    for li, (W, b) in enumerate(layers):
        a = h @ W.T + b
        if li < len(layers) - 1:
            pre.append(a)
            h = gelu(a)
        else:
            h = a
        acts.append(h)
    return h, acts, pre


def student_forward(sp: StudentParams, inputs) -> EmbeddingMatrix:
    x = _as_array(inputs)
    z, _, _ = _forward(sp, sp.theta, x)
    ids = inputs.item_ids if isinstance(inputs, EmbeddingMatrix) else None
    return EmbeddingMatrix(z, ids)


def _backward(sp: StudentParams, theta, acts, pre, g_z) -> np.ndarray:
    layers = sp.layers(theta)
    grads = []
    g = g_z
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        h_in = acts[li]
        grads.append((g.T @ h_in, g.sum(axis=0)))
        if li:
            g = (g @ W) * gelu_grad(pre[li - 1])
    grads.reverse()
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def _targets(ds: TripletDataset, cfg: DistillConfig) -> np.ndarray:
    if len(ds) == 0:
        raise EmptyBatch("distillation needs at least one triplet")
    if ds.soft is None:
        raise ValidationError("distillation needs the teacher's soft triples")
    tau = ds.meta.get("tau")
    if tau is not None and not np.isclose(float(tau), cfg.tau_teacher, rtol=1e-12, atol=0):
        raise ValidationError(f"dataset was labeled at tau={tau}, config expects tau_teacher={cfg.tau_teacher}")
    return ds.soft


def _batch_terms(sp, theta, x, triplets, p_t, cfg, want_grad):
    # forward only the rows this batch touches
    items, inv = np.unique(triplets, return_inverse=True)
    local = inv.reshape(-1, 3)
    z, acts, pre = _forward(sp, theta, x[items])
    s = triplet_similarities(z, local)
    kl = float(np.mean(kl_from_logits(p_t, s, cfg.tau_student)))
    delta = theta - sp.theta_init
    reg = float(delta @ delta)
    if not want_grad:
        return kl, reg, None
    g_s = (triplet_probs(s, cfg.tau_student) - p_t) / (cfg.tau_student * len(local))
    g_z = similarity_backward(z, local, g_s)
    grad = _backward(sp, theta, acts, pre, g_z) + 2.0 * cfg.lam * delta
    return kl, reg, grad


def distill_objective(sp: StudentParams, teacher_labels: TripletDataset, inputs, cfg: DistillConfig) -> float:
    p_t = _targets(teacher_labels, cfg)
    x = _as_array(inputs)
    validate_pairing(x, teacher_labels)
    kl, reg, _ = _batch_terms(sp, sp.theta, x, teacher_labels.triplets, p_t, cfg, False)
    return kl + cfg.lam * reg


def distill_terms(sp: StudentParams, teacher_labels: TripletDataset, inputs, cfg: DistillConfig) -> tuple[float, float]:
    """``(kl, ||theta - theta_init||^2)`` separately."""
    p_t = _targets(teacher_labels, cfg)
    x = _as_array(inputs)
    validate_pairing(x, teacher_labels)
    kl, reg, _ = _batch_terms(sp, sp.theta, x, teacher_labels.triplets, p_t, cfg, False)
    return kl, reg


def distill_gradients(sp: StudentParams, teacher_labels: TripletDataset, inputs, cfg: DistillConfig) -> np.ndarray:
    p_t = _targets(teacher_labels, cfg)
    x = _as_array(inputs)
    validate_pairing(x, teacher_labels)
    _, _, grad = _batch_terms(sp, sp.theta, x, teacher_labels.triplets, p_t, cfg, True)
    return grad


def teacher_agreement(sp: StudentParams, ds: TripletDataset, inputs, theta=None) -> float:
    """Share of triplets where the student picks the teacher's hard choice."""
    if ds.choice is None:
        raise ValidationError("agreement needs hard teacher choices")
    if len(ds) == 0:
        return float("nan")
    x = _as_array(inputs)
    items, inv = np.unique(ds.triplets, return_inverse=True)
    z, _, _ = _forward(sp, sp.theta if theta is None else theta, x[items])
    picks = most_similar_pair(triplet_similarities(z, inv.reshape(-1, 3)))
    return float(np.mean(picks == ds.choice))


def train_student(sp: StudentParams, dataset: TripletDataset, inputs,
                  cfg: DistillConfig | None = None) -> tuple[StudentParams, TrainingLog]:
    """Minibatch training from ``sp.theta``; the full-data objective never ends above its start."""
    cfg = cfg or DistillConfig()
    p_all = _targets(dataset, cfg)
    x = _as_array(inputs)
    validate_pairing(x, dataset)
    rng = np.random.default_rng(cfg.seed)
    train, val = split_indices(len(dataset), cfg.val_fraction, rng)
    t_all = dataset.triplets
    theta = np.array(sp.theta)
    opt = make_optimizer(cfg.optimizer, [theta], cfg.learning_rate, cfg.beta1, cfg.beta2)
    has_hard = dataset.choice is not None
    train_ds, val_ds = dataset.subset(train), dataset.subset(val)

    def full(th):
        kl, reg, _ = _batch_terms(sp, th, x, t_all, p_all, cfg, False)
        return kl, reg

    log = TrainingLog(cfg.seed, ("epoch", "step", "objective", "kl", "reg", "train_agree", "val_agree"))

    def record(epoch, step, th):
        kl, reg = full(th)
        obj = kl + cfg.lam * reg
        if not np.isfinite(obj):
            raise NonFiniteLoss(f"non-finite distillation objective after step {step}", step=step)
        tr = teacher_agreement(sp, train_ds, x, th) if has_hard else float("nan")
        va = teacher_agreement(sp, val_ds, x, th) if has_hard and len(val) else float("nan")
        log.add(epoch=epoch, step=step, objective=obj, kl=kl, reg=reg, train_agree=tr, val_agree=va)
        return obj

    initial = record(0, 0, theta)
    step = 0
    epoch = 0
    while step < cfg.steps:
        epoch += 1
        order = train[rng.permutation(len(train))]
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            kl, reg, grad = _batch_terms(sp, theta, x, t_all[idx], p_all[idx], cfg, True)
            if not (np.isfinite(kl) and np.isfinite(grad).all()):
                raise NonFiniteLoss(f"non-finite distillation loss at step {step}", step=step)
            lr = cosine_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup) if cfg.cosine else None
            opt.step([grad], lr)
            step += 1
            if step >= cfg.steps:
                break
        final = record(epoch, step, theta)

    out = sp.with_theta(theta)
    if final > initial:
        log.notes.append("training raised the full-data objective; returning the initial parameters")
        out = sp.with_theta(sp.theta)
    return out, log

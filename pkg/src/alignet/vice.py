"""Gaussian object embeddings fitted to discrete odd-one-out choices.

Each item has a diagonal Gaussian ``N(mu, sigma^2)``.  Triplet probabilities
are Monte Carlo averages of the softmax over similarities of sampled
embeddings ``Y = mu + sigma * eps``.  The sparsity prior and dimension pruning
of the full method are replaced by L2 penalties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, IndexOutOfRange, NonFiniteLoss, ValidationError
from .optim import make_optimizer
from .store import EmbeddingMatrix, TripletDataset
from .triplets import log_triplet_probs, similarity_backward, triplet_probs, triplet_similarities
from .ud import TrainingLog, split_indices

LOG_SIGMA_MIN = -50.0
LOG_SIGMA_MAX = 10.0


@dataclass(frozen=True, eq=False)
class GaussianEmbedding:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        ls = np.array(self.log_sigma, dtype=np.float64)
        if mu.ndim != 2 or mu.shape != ls.shape:
            raise DimensionMismatch(f"mu {mu.shape} and log_sigma {ls.shape} must be equal 2-d shapes")
        if not np.isfinite(mu).all() or np.isnan(ls).any():
            raise ValidationError("Gaussian embedding parameters must be finite")
        mu.setflags(write=False)
        ls.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(np.clip(self.log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu.shape


@dataclass(frozen=True)
class McConfig:
    samples: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValidationError("need at least one Monte Carlo sample")


def sample_embedding(g: GaussianEmbedding, eps) -> EmbeddingMatrix:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g.shape:
        raise DimensionMismatch(f"eps shape {eps.shape} does not match {g.shape}")
    return EmbeddingMatrix(g.mu + g.sigma * eps)


def _draw(seed: int, r: int, shape) -> np.ndarray:
    # one stream per (seed, r) so the estimate does not depend on evaluation order
    return np.random.default_rng([seed, r]).standard_normal(shape)


def mc_triplet_probs(g: GaussianEmbedding, triplets, cfg: McConfig | None = None) -> np.ndarray:
    cfg = cfg or McConfig()
    t = np.asarray(triplets.triplets if isinstance(triplets, TripletDataset) else triplets, dtype=np.int64)
    t = t.reshape(-1, 3)
    m = g.shape[0]
    if t.size and (t.min() < 0 or t.max() >= m):
        raise IndexOutOfRange(f"triplet index out of range for {m} items")
    sigma = g.sigma
    acc = np.zeros((len(t), 3))
    for r in range(cfg.samples):
        y = g.mu + sigma * _draw(cfg.seed, r, g.shape)
        acc += triplet_probs(triplet_similarities(y, t), 1.0)
    acc /= cfg.samples
    return acc / acc.sum(axis=1, keepdims=True)


@dataclass
class ViceConfig:
    dims: int = 64
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1024
    epochs: int = 100
    l2_mu: float = 1e-3
    l2_log_sigma: float = 1e-3
    init_sigma: float = 0.1
    init_scale: float = 0.1
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dims < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("dims, batch_size and epochs must be >= 1")
        if self.l2_mu < 0 or self.l2_log_sigma < 0:
            raise ValidationError("L2 weights must be >= 0")
        if not self.init_sigma > 0:
            raise ValidationError("init_sigma must be positive")


def _nll_terms(mu, ls, t, choice, eps, cfg, ls0, want_grad):
    sig = np.exp(np.clip(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    y = mu + sig * eps
    s = triplet_similarities(y, t)
    n = len(t)
    nll = -float(np.mean(log_triplet_probs(s, 1.0)[np.arange(n), choice]))
    dev = ls - ls0
    reg = cfg.l2_mu * float(np.mean(mu * mu)) + cfg.l2_log_sigma * float(np.mean(dev * dev))
    if not want_grad:
        return nll, reg, None, None
    g_s = triplet_probs(s, 1.0)
    g_s[np.arange(n), choice] -= 1.0
    g_y = similarity_backward(y, t, g_s / n)
    size = mu.size
    d_mu = g_y + 2.0 * cfg.l2_mu * mu / size
    d_ls = g_y * eps * sig + 2.0 * cfg.l2_log_sigma * dev / size
    return nll, reg, d_mu, d_ls


def fit_gaussian_embeddings(ds: TripletDataset, m: int, cfg: ViceConfig | None = None
                            ) -> tuple[GaussianEmbedding, TrainingLog]:
    """Single-sample reparameterised maximum likelihood with L2 penalties.

    The log records, per epoch, the training-split loss evaluated with a fixed
    noise draw so successive epochs are comparable.
    """
    cfg = cfg or ViceConfig()
    if len(ds) == 0:
        raise EmptyDataset("VICE needs at least one triplet")
    if ds.choice is None:
        raise ValidationError("VICE needs hard choices")
    if ds.max_index() >= m:
        raise IndexOutOfRange(f"triplet index {ds.max_index()} out of range for {m} items")
    rng = np.random.default_rng(cfg.seed)
    train, val = split_indices(len(ds), cfg.val_fraction, rng)
    mu = rng.normal(0.0, cfg.init_scale, size=(m, cfg.dims))
    ls0 = np.log(cfg.init_sigma)
    ls = np.full((m, cfg.dims), ls0)
    opt = make_optimizer("adam", [mu, ls], cfg.learning_rate, cfg.beta1, cfg.beta2)
    t_all, c_all = ds.triplets, ds.choice
    eval_eps = _draw(cfg.seed, 1 << 31, (m, cfg.dims))

    def evaluate(idx):
        if len(idx) == 0:
            return float("nan")
        nll, reg, _, _ = _nll_terms(mu, ls, t_all[idx], c_all[idx], eval_eps, cfg, ls0, False)
        return nll + reg

    log = TrainingLog(cfg.seed, ("epoch", "train_loss", "val_loss"))
    log.add(epoch=0, train_loss=evaluate(train), val_loss=evaluate(val))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = train[rng.permutation(len(train))]
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            eps = rng.standard_normal((m, cfg.dims))
            nll, reg, d_mu, d_ls = _nll_terms(mu, ls, t_all[idx], c_all[idx], eps, cfg, ls0, True)
            if not (np.isfinite(nll) and np.isfinite(d_mu).all() and np.isfinite(d_ls).all()):
                raise NonFiniteLoss(f"non-finite VICE loss at step {step}", step=step)
            opt.step([d_mu, d_ls])
            np.clip(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX, out=ls)
            step += 1
        tr = evaluate(train)
        if not np.isfinite(tr):
            raise NonFiniteLoss(f"non-finite VICE objective after epoch {epoch}", step=step)
        log.add(epoch=epoch, train_loss=tr, val_loss=evaluate(val))
    return GaussianEmbedding(mu, ls), log

"""Human-aligned representation transforms, triplet distillation and alignment metrics."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import AlignetError, NumericError, ValidationError
from .store import (
    EmbeddingMatrix,
    HierarchyLabels,
    ResponseTimeTable,
    TripletDataset,
    load_embeddings,
    load_labels,
    load_rts,
    load_triplets,
    save_embeddings,
    save_labels,
    save_rts,
    save_triplets,
)
from .triplets import (
    alignet_kl_loss,
    hard_align_loss,
    odd_one_out,
    soft_align_loss,
    triplet_entropy,
    triplet_probs,
    triplet_similarities,
)
from .ud import AffineTransform, UdConfig, apply_affine, fit_ud, ud_objective
from .vice import GaussianEmbedding, McConfig, fit_gaussian_embeddings, mc_triplet_probs
from .sampling import SamplerConfig, elbow_select, kmeans, sample_class_boundary, sample_cluster_boundary, sample_random
from .labeler import label_triplets
from .student import DistillConfig, StudentParams, distill_objective, student_forward, train_student
from .evaluation import (
    loo_noise_ceiling,
    ooo_accuracy,
    pca_explained_variance,
    representation_shift,
    rsa_score,
    rsm_pearson,
    spearman,
    uncertainty_rt_correlation,
)
from .synth import HierarchySpec, corrupt_teacher, generate_hierarchy, simulate_responses, simulate_rts

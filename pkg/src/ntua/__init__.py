"""Noise-tolerant weighted key-value cache adapter over precomputed embeddings."""

__version__ = "0.1.0"

from .cache import WeightedCache, adapter_logits, build_cache, cache_logits, phi, refine_cache
from .data_store import ClassifierWeights, EmbeddingSet, FormatError, GroundTruthLabels, NormError
from .evaluation import EvalReport, PipelineConfig, evaluate, run_ablation, run_pipeline
from .prototypes import affinity_weights, cache_omega, compute_prototypes
from .pseudo_labeling import (
    PseudoLabelSet,
    ShotSelection,
    fallback_rows,
    make_pseudo_labels,
    select_top_k,
    softmax_probs,
    zero_shot_logits,
)
from .synthetic import Bundle, SynthSpec, generate
from .trainer import TrainConfig, TrainReport, adamw_step, cosine_lr, train_keys, weighted_ce_loss

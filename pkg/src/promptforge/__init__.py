"""Semantic-guided diversity prompt tuning over a frozen dual encoder for
source-free few-shot classification, with an episodic evaluation harness."""

from .encoders import EncoderConfig, EncoderWeights, encode_text, encode_visual, init_frozen_weights, load_weights, save_weights
from .episodes import EpisodeConfig, EvalReport, SyntheticDomainSpec, evaluate, generate_synthetic_domain, sample_episode
from .losses import ArcFaceConfig, arcface_loss, diversity_loss, semantic_contrastive_loss, tsc_loss
from .pipeline import VARIANTS, PipelineConfig, generate_features, infer, run_variant, step1_train, step2_train_classifier
from .semantic import SelectionConfig, select_semantic_targets

__version__ = "0.1.0"

__all__ = [
    "ArcFaceConfig",
    "EncoderConfig",
    "EncoderWeights",
    "EpisodeConfig",
    "EvalReport",
    "PipelineConfig",
    "SelectionConfig",
    "SyntheticDomainSpec",
    "VARIANTS",
    "arcface_loss",
    "diversity_loss",
    "encode_text",
    "encode_visual",
    "evaluate",
    "generate_features",
    "generate_synthetic_domain",
    "infer",
    "init_frozen_weights",
    "load_weights",
    "run_variant",
    "sample_episode",
    "save_weights",
    "select_semantic_targets",
    "semantic_contrastive_loss",
    "step1_train",
    "step2_train_classifier",
    "tsc_loss",
]

"""Reciprocal recommendation as two-sided behavior-sequence matching."""

from .config import TrainingConfig, load_config
from .data import (
    BehaviorSequence,
    DatasetSplit,
    InteractionRecord,
    SequenceStore,
    build_truncated_sequence,
    five_core_filter,
    generate_synthetic,
    parse_interactions,
    sample_negative_user,
    temporal_split,
)
from .estimator import ReciprocalSequenceRecommender
from .evaluation import EvalReport, evaluate_model, evaluate_split, metrics_at_k, rank_position
from .training import Checkpoint, load_checkpoint, save_checkpoint, train

__all__ = [
    "BehaviorSequence",
    "Checkpoint",
    "DatasetSplit",
    "EvalReport",
    "InteractionRecord",
    "ReciprocalSequenceRecommender",
    "SequenceStore",
    "TrainingConfig",
    "build_truncated_sequence",
    "evaluate_model",
    "evaluate_split",
    "five_core_filter",
    "generate_synthetic",
    "load_checkpoint",
    "load_config",
    "metrics_at_k",
    "parse_interactions",
    "rank_position",
    "sample_negative_user",
    "save_checkpoint",
    "temporal_split",
    "train",
]

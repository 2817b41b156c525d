"""Token expansion (initialization, expansion, merging) for faster ViT training."""

from .pipeline import (
    MergeAssignment,
    PipelineConfig,
    expand_parallel,
    expand_sequential,
    initialize,
    merge,
    restore_indices,
    run_pipeline,
)
from .schedule import GrowthSchedule, StageState, current_stage, stage_rates, stage_targets
from .tokens import DistanceMatrix, IndexSet, Metric, SelectionState, TokenSet, min_distance_to_selected, pairwise_distance

__version__ = "0.1.0"

__all__ = [
    "DistanceMatrix",
    "GrowthSchedule",
    "IndexSet",
    "MergeAssignment",
    "Metric",
    "PipelineConfig",
    "SelectionState",
    "StageState",
    "TokenSet",
    "current_stage",
    "expand_parallel",
    "expand_sequential",
    "initialize",
    "merge",
    "min_distance_to_selected",
    "pairwise_distance",
    "restore_indices",
    "run_pipeline",
    "stage_rates",
    "stage_targets",
]

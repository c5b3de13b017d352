"""Shuffled autoregression for motion interpolation."""
from .depgraph import (
    DependencyGraph,
    FDAM,
    Schedule,
    build_binary_search,
    build_original_ar,
    build_three_stage,
    derive_fdam,
    export_dot,
    topological_schedule,
    validate_dag,
)
from .model import ModelConfig, SARModel
from .motion import Motion, Skeleton

__version__ = "0.1.0"

"""Book-keeping per-sample gradient clipping with instrumented cost accounting."""

from .analyzer import ArchSpec, ComplexityReport, impl_cost, layerwise_decision_table, parse_arch
from .autograd import GradBook, Graph, backward, forward
from .catalog import build_graph, resolve_arch, synthetic_batch
from .clipping import ClipFn, ClipPlan, decide_mode, ghost_norm_sq
from .engine import (
    ImplKind, OptimizerState, PrivacyEngine, PrivacyParams, StepReport, accumulate, clipped_sum,
    naive_oracle_grad, private_step,
)
from .tensor import OpCounters, SeededRng

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ClipFn", "ClipPlan", "ComplexityReport", "GradBook", "Graph", "ImplKind", "OpCounters",
    "OptimizerState", "PrivacyEngine", "PrivacyParams", "SeededRng", "StepReport", "accumulate", "backward",
    "build_graph", "clipped_sum", "decide_mode", "forward", "ghost_norm_sq", "impl_cost",
    "layerwise_decision_table", "naive_oracle_grad", "parse_arch", "private_step", "resolve_arch",
    "synthetic_batch",
]

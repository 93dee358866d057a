from .accounting import CostReport, LayerCost, cost_report, flop_count, param_count
from .architectures import (
    ARCHITECTURES,
    build_architecture,
    build_desknet,
    build_reference_graph,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "ARCHITECTURES",
    "CheckpointError",
    "CostReport",
    "LayerCost",
    "build_architecture",
    "build_desknet",
    "build_reference_graph",
    "cost_report",
    "flop_count",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
]

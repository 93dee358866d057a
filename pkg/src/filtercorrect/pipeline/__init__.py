from .config import DESK_SEVERITIES, RUN_ALL, STAGES, ExperimentConfig, derive_seed
from .data import (
    DatasetBundle,
    DatasetError,
    channel_stats,
    ingest,
    make_synthetic_bundle,
    read_idx,
    write_bundle,
    write_idx,
)
from .report import build_report, render_text
from .stages import MODELS, PipelineError, Run, run_stage
from .synthetic import CLASS_NAMES, make_synthetic

__all__ = [
    "CLASS_NAMES",
    "DESK_SEVERITIES",
    "MODELS",
    "RUN_ALL",
    "STAGES",
    "DatasetBundle",
    "DatasetError",
    "ExperimentConfig",
    "PipelineError",
    "Run",
    "build_report",
    "channel_stats",
    "derive_seed",
    "ingest",
    "make_synthetic",
    "make_synthetic_bundle",
    "read_idx",
    "render_text",
    "run_stage",
    "write_bundle",
    "write_idx",
]

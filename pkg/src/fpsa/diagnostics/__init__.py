"""Convergence traces, CSV exports, contraction probe and checkpoints."""

from .checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    load_checkpoint,
    read_manifest,
    restore_model,
    save_checkpoint,
)
from .export import (
    TRACE_COLUMNS,
    attention_csv_paths,
    export_attention_csv,
    export_trace_csv,
    read_attention_csv,
    read_trace_csv,
)
from .probe import ProbeStats, contraction_probe, layer_step
from .trace import HeadSummary, IterationTrace, lower_median, summarize, summarize_counts

__all__ = [
    "FORMAT_VERSION",
    "TRACE_COLUMNS",
    "Checkpoint",
    "HeadSummary",
    "IterationTrace",
    "ProbeStats",
    "attention_csv_paths",
    "contraction_probe",
    "export_attention_csv",
    "export_trace_csv",
    "layer_step",
    "load_checkpoint",
    "lower_median",
    "read_attention_csv",
    "read_manifest",
    "read_trace_csv",
    "restore_model",
    "save_checkpoint",
    "summarize",
    "summarize_counts",
]

"""Toy tasks: datasets, models and the training loop."""

from .data import (
    Dataset,
    InductionTaskSpec,
    PatchTaskSpec,
    gen_induction_dataset,
    load_mnist,
    patchify,
    patchify_batch,
    read_idx_images,
    read_idx_labels,
    split_dataset,
)
from .models import InductionModel, ModelSpec, PatchModel, build_model, default_spec
from .train import EpochRecord, EvalResult, TrainConfig, TrainReport, evaluate, train, train_epoch

__all__ = [
    "Dataset",
    "EpochRecord",
    "EvalResult",
    "InductionModel",
    "InductionTaskSpec",
    "ModelSpec",
    "PatchModel",
    "PatchTaskSpec",
    "TrainConfig",
    "TrainReport",
    "build_model",
    "default_spec",
    "evaluate",
    "gen_induction_dataset",
    "load_mnist",
    "patchify",
    "patchify_batch",
    "read_idx_images",
    "read_idx_labels",
    "split_dataset",
    "train",
    "train_epoch",
]

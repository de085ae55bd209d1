"""Training and evaluation loops shared by both tasks."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..attention import MODES
from ..autodiff import AdamWState, adamw_step, backward, clip_grad_norm, cross_entropy_logits, no_grad
from ..diagnostics.trace import IterationTrace, summarize
from ..errors import ConfigError, NumericalError
from ..solver import FpiConfig
from .data import PatchTaskSpec, patchify_batch


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip: float = 1.0
    seed: int = 0
    fpi: FpiConfig = field(default_factory=FpiConfig)
    backward: str = "implicit"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if self.backward not in MODES:
            raise ConfigError(f"backward must be one of {MODES}, got {self.backward!r}")

    def optimizer(self):
        return AdamWState(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay
        )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float = float("nan")
    # per-head HeadSummary of the solver traces seen during the epoch
    iterations: dict = field(default_factory=dict)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    aborted: bool = False
    error: str = ""

    @property
    def losses(self):
        return [e.loss for e in self.epochs]

    @property
    def final_accuracy(self):
        return self.epochs[-1].test_accuracy if self.epochs else float("nan")


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    predictions: np.ndarray
    trace: IterationTrace = None


def model_inputs(model, inputs):
    """Turn stored samples into what the model consumes (patches for images)."""
    if model.spec.task == "mnist_patch" and inputs.ndim == 3 and inputs.shape[1] == PatchTaskSpec().image_size:
        return patchify_batch(inputs)
    return inputs


def batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _summaries(traces):
    traces = [t for t in traces if t is not None]
    if not traces:
        return {}
    return summarize(IterationTrace.concat(traces))


def train_epoch(model, dataset, config, state, epoch, report=None):
    """One pass over ``dataset`` in the seeded order; returns ``(loss, accuracy, traces)``."""
    params = model.parameters()
    total_loss = 0.0
    correct = 0
    traces = []
    for idx in batches(len(dataset), config.batch_size, epoch_order(config.seed, epoch, len(dataset))):
        model.update_spectral()
        logits, trace = model(model_inputs(model, dataset.inputs[idx]), config.fpi, config.backward)
        labels = dataset.labels[idx]
        loss = cross_entropy_logits(logits, labels)
        grads = backward(loss, list(params.values()))
        named = {name: grads[p] for name, p in params.items()}
        adamw_step(params, clip_grad_norm(named, config.clip), state)
        value = float(loss.item())
        if report is not None:
            report.step_losses.append(value)
        total_loss += value * len(idx)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        traces.append(trace)
    n = max(len(dataset), 1)
    return total_loss / n, correct / n, traces


def train(model, dataset, config, test_set=None, state=None, start_epoch=0, on_epoch=None):
    """Train in place and return a :class:`TrainReport`.

    ``state`` resumes an optimiser (with ``start_epoch`` selecting the next
    shuffle).  A non-finite loss or activation stops training, restores the
    parameters of the last completed epoch and marks the report aborted.
    ``on_epoch(record, state)`` runs after each epoch, e.g. to checkpoint.
    """
    state = state or config.optimizer()
    report = TrainReport()
    for epoch in range(start_epoch, start_epoch + config.epochs):
        good = copy.deepcopy(model.state_arrays())
        good_state = copy.deepcopy(state)
        try:
            loss, acc, traces = train_epoch(model, dataset, config, state, epoch, report)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss in epoch {epoch}")
        except NumericalError as exc:
            model.load_state_arrays(good)
            state.__dict__.update(good_state.__dict__)
            report.aborted = True
            report.error = str(exc)
            break
        record = EpochRecord(epoch, loss, acc, iterations=_summaries(traces))
        if test_set is not None and len(test_set):
            record.test_accuracy = evaluate(model, test_set, config.fpi, config.batch_size).accuracy
        report.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record, state)
    return report


def evaluate(model, dataset, fpi=None, batch_size=256):
    """Accuracy and per-class accuracy; parameters and buffers are left untouched."""
    fpi = fpi or FpiConfig()
    preds = np.empty(len(dataset), dtype=np.int64)
    traces = []
    with no_grad():
        for idx in batches(len(dataset), batch_size):
            logits, trace = model(model_inputs(model, dataset.inputs[idx]), fpi, "implicit")
            preds[idx] = logits.data.argmax(axis=1)
            traces.append(trace)
    labels = dataset.labels
    per_class = {
        int(c): float((preds[labels == c] == c).mean()) for c in np.unique(labels)
    }
    accuracy = float((preds == labels).mean()) if len(dataset) else float("nan")
    traces = [t for t in traces if t is not None]
    return EvalResult(accuracy, per_class, preds, IterationTrace.concat(traces) if traces else None)

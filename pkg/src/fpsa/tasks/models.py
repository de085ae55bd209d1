"""Small classifiers wrapping one attention block, in fixed-point and vanilla variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..attention import FpsaLayer, forward, vanilla_attention
from ..autodiff import Tensor, default_dtype
from ..errors import ConfigError, ShapeError
from ..nn import Linear, Module
from ..solver import FpiConfig
from .data import InductionTaskSpec, PatchTaskSpec

TASKS = ("induction", "mnist_patch")
ATTENTION = ("self", "vanilla")


@dataclass(frozen=True)
class ModelSpec:
    task: str = "induction"
    attention: str = "self"
    dim: int = 32
    heads: int = 2
    vocab_size: int = 20

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.attention not in ATTENTION:
            raise ConfigError(f"attention must be one of {ATTENTION}, got {self.attention!r}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} is not divisible by {self.heads} heads")


def default_spec(task, attention="self"):
    if task == "mnist_patch":
        return ModelSpec("mnist_patch", attention, dim=32, heads=4)
    return ModelSpec(task, attention, dim=32, heads=2)


def _embedding(rng, rows, dim):
    return Tensor((rng.standard_normal((rows, dim)) * 0.02).astype(default_dtype()), requires_grad=True)


class _Classifier(Module):
    def __init__(self, spec, rng, spectral_rng):
        self.spec = spec
        self.layer = FpsaLayer(
            spec.dim,
            spec.heads,
            rng,
            use_tanh_step_norm=spec.attention == "self",
            spectral=spec.attention == "self",
            spectral_rng=spectral_rng,
        )

    @property
    def fixed_point(self):
        return self.spec.attention == "self"

    def update_spectral(self):
        self.layer.update_spectral()

    def encode(self, h, fpi=None, mode="implicit"):
        """Run the attention block; the trace is ``None`` for the vanilla variant."""
        if self.fixed_point:
            return forward(h, self.layer, fpi or FpiConfig(), mode)
        return vanilla_attention(h, self.layer), None


class InductionModel(_Classifier):
    """Token + position embeddings, one attention block, logits read at the MASK slot."""

    def __init__(self, spec, rng, spectral_rng=None):
        self.task = InductionTaskSpec(spec.vocab_size)
        n_tokens = self.task.num_tokens
        self.token_embedding = _embedding(rng, n_tokens, spec.dim)
        self.position_embedding = _embedding(rng, self.task.seq_len, spec.dim)
        super().__init__(spec, rng, spectral_rng)
        self.head = Linear(spec.dim, n_tokens, rng)

    def __call__(self, tokens, fpi=None, mode="implicit"):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.task.seq_len:
            raise ShapeError(f"expected (B, {self.task.seq_len}) token ids, got {tokens.shape}")
        h = self.token_embedding[tokens] + self.position_embedding
        y, trace = self.encode(h, fpi, mode)
        return self.head(y[:, self.task.mask_position, :]), trace


class PatchModel(_Classifier):
    """Linear patch embedding + positions, one attention block, mean-pool, linear head."""

    def __init__(self, spec, rng, spectral_rng=None):
        self.task = PatchTaskSpec()
        self.patch_embedding = Linear(self.task.patch_dim, spec.dim, rng)
        self.position_embedding = _embedding(rng, self.task.num_patches, spec.dim)
        super().__init__(spec, rng, spectral_rng)
        self.head = Linear(spec.dim, self.task.num_classes, rng)

    def __call__(self, patches, fpi=None, mode="implicit"):
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        expected = (self.task.num_patches, self.task.patch_dim)
        if patches.ndim != 3 or patches.shape[1:] != expected:
            raise ShapeError(f"expected (B, {expected[0]}, {expected[1]}) patches, got {patches.shape}")
        h = self.patch_embedding(patches) + self.position_embedding
        y, trace = self.encode(h, fpi, mode)
        return self.head(y.mean(axis=1)), trace


def build_model(spec, seed):
    """Deterministic construction; self and vanilla variants share every weight draw."""
    rng = np.random.default_rng(seed)
    spectral_rng = np.random.default_rng([seed, 1])
    cls = PatchModel if spec.task == "mnist_patch" else InductionModel
    return cls(spec, rng, spectral_rng)

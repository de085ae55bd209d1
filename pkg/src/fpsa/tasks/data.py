"""Datasets for the two toy tasks: induction-head sequences and MNIST patches."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    kind: str

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        return Dataset(self.inputs[index], self.labels[index], self.kind)

    def limit(self, n):
        return self if n is None or n >= len(self) else self.subset(slice(0, n))


# ----------------------------------------------------------------------
# induction heads


@dataclass(frozen=True)
class InductionTaskSpec:
    """Sequences ``[BOS, t1, t2, SEP, t1, MASK, EOS]`` labelled with ``t2``.

    Ordinary tokens are ``0 .. vocab_size - 1``; the four specials follow.
    """

    vocab_size: int = 20
    seq_len: int = 7
    mask_position: int = 5

    @property
    def bos(self):
        return self.vocab_size

    @property
    def sep(self):
        return self.vocab_size + 1

    @property
    def mask(self):
        return self.vocab_size + 2

    @property
    def eos(self):
        return self.vocab_size + 3

    @property
    def num_tokens(self):
        return self.vocab_size + 4

    @property
    def pair_capacity(self):
        return self.vocab_size * (self.vocab_size - 1)


def induction_sequences(spec, t1, t2):
    t1 = np.asarray(t1, dtype=np.int64)
    t2 = np.asarray(t2, dtype=np.int64)
    n = t1.shape[0]
    seq = np.empty((n, spec.seq_len), dtype=np.int64)
    seq[:, 0] = spec.bos
    seq[:, 1] = t1
    seq[:, 2] = t2
    seq[:, 3] = spec.sep
    seq[:, 4] = t1
    seq[:, 5] = spec.mask
    seq[:, 6] = spec.eos
    return seq


def gen_induction_dataset(spec, n_samples, seed):
    """``n_samples`` sequences built from distinct ``(t1, t2)`` pairs, ``t1 != t2``.

    Pairs are drawn without replacement, so any split of the result is
    disjoint in pairs.
    """
    if spec.vocab_size < 2:
        raise DataError(f"vocab_size must be at least 2, got {spec.vocab_size}")
    if not 0 < n_samples <= spec.pair_capacity:
        raise DataError(
            f"n_samples={n_samples} exceeds the {spec.pair_capacity} distinct pairs "
            f"of a {spec.vocab_size}-token vocabulary"
        )
    rng = np.random.default_rng(seed)
    v = spec.vocab_size
    codes = rng.choice(spec.pair_capacity, size=n_samples, replace=False)
    t1 = codes // (v - 1)
    offset = codes % (v - 1)
    t2 = offset + (offset >= t1)
    return Dataset(induction_sequences(spec, t1, t2), t2.astype(np.int64), "induction")


def split_dataset(dataset, test_fraction):
    """Deterministic train/test split: the last ``test_fraction`` of samples is test."""
    if not 0 <= test_fraction < 1:
        raise DataError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n_test = int(round(len(dataset) * test_fraction))
    cut = len(dataset) - n_test
    return dataset.subset(slice(0, cut)), dataset.subset(slice(cut, len(dataset)))


# ----------------------------------------------------------------------
# MNIST


@dataclass(frozen=True)
class PatchTaskSpec:
    image_size: int = 28
    patch_size: int = 12
    padded_size: int = 36
    num_classes: int = 10

    @property
    def grid(self):
        return self.padded_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size


def _open(path):
    path = Path(path)
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise DataError(f"missing MNIST file: {path}")


def read_idx_images(path):
    raw = _open(path)
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DataError(f"{path}: bad magic {magic}, expected {IMAGE_MAGIC}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise DataError(f"{path}: truncated, expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(
        count, rows, cols
    )


def read_idx_labels(path):
    raw = _open(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != LABEL_MAGIC:
        raise DataError(f"{path}: bad magic {magic}, expected {LABEL_MAGIC}")
    if len(raw) < 8 + count:
        raise DataError(f"{path}: truncated, expected {8 + count} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"{path}: label out of range 0-9")
    return labels


def load_mnist(path):
    """Read the four IDX files under ``path``; returns ``(train, test)`` Datasets.

    Images stay uint8 (scaled to [0, 1] when patchified) to keep memory low.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"MNIST directory not found: {root}")
    out = []
    for split in ("train", "test"):
        img_name, lbl_name = MNIST_FILES[split]
        images = read_idx_images(root / img_name)
        labels = read_idx_labels(root / lbl_name)
        if len(images) != len(labels):
            raise DataError(
                f"{split}: {len(images)} images but {len(labels)} labels in {root}"
            )
        out.append(Dataset(images, labels, "patch"))
    return tuple(out)


def patchify(image, spec=PatchTaskSpec()):
    """Zero-pad a 28x28 image to 36x36 (centred) and cut nine flattened 12x12 patches."""
    return patchify_batch(np.asarray(image)[None], spec)[0]


def patchify_batch(images, spec=PatchTaskSpec(), dtype=np.float32):
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (spec.image_size, spec.image_size):
        raise DataError(f"expected (n, {spec.image_size}, {spec.image_size}) images, got {images.shape}")
    if images.dtype == np.uint8:
        images = images.astype(dtype) / 255.0
    else:
        images = images.astype(dtype)
    if not np.isfinite(images).all():
        raise DataError("images contain non-finite values")
    n = images.shape[0]
    pad = (spec.padded_size - spec.image_size) // 2
    padded = np.zeros((n, spec.padded_size, spec.padded_size), dtype=dtype)
    padded[:, pad : pad + spec.image_size, pad : pad + spec.image_size] = images
    g, p = spec.grid, spec.patch_size
    return padded.reshape(n, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(n, g * g, p * p)

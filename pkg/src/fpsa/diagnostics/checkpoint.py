"""Checkpoint format: a JSON manifest plus one little-endian binary blob.

A checkpoint is a directory holding ``manifest.json`` and ``tensors.bin``.
The manifest lists every tensor (name, shape, dtype, byte offset, byte
length), echoes the run configuration, and carries SHA-256 digests of the
blob and of itself.  Model tensors are stored under ``model/<name>`` and
AdamW moments under ``optim/m/<name>`` and ``optim/v/<name>``, so a resumed
run continues bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import AdamWState
from ..errors import CheckpointError

FORMAT_VERSION = "fpsa-ckpt-1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_OPTIM_FIELDS = ("lr", "beta1", "beta2", "eps", "weight_decay", "t")


@dataclass
class Checkpoint:
    arrays: dict
    config: dict = field(default_factory=dict)
    epoch: int = 0
    optimizer: dict = None

    def model_arrays(self):
        return {k[len("model/") :]: v for k, v in self.arrays.items() if k.startswith("model/")}

    def optimizer_state(self):
        """Rebuild the AdamW state, or ``None`` if none was saved."""
        if self.optimizer is None:
            return None
        state = AdamWState(**{k: self.optimizer[k] for k in _OPTIM_FIELDS})
        for key, arr in self.arrays.items():
            for slot in ("m", "v"):
                prefix = f"optim/{slot}/"
                if key.startswith(prefix):
                    getattr(state, slot)[key[len(prefix) :]] = arr
        return state


def _digest(data):
    return hashlib.sha256(data).hexdigest()


def _manifest_digest(manifest):
    body = {k: v for k, v in manifest.items() if k != "manifest_sha256"}
    return _digest(json.dumps(body, sort_keys=True).encode("utf-8"))


def _little_endian(arr):
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, model, config=None, state=None, epoch=0):
    """Write ``model`` (and optionally the optimiser ``state``) under directory ``path``."""
    path = Path(path)
    arrays = {f"model/{k}": v for k, v in model.state_arrays().items()}
    if state is not None:
        for slot in ("m", "v"):
            arrays.update({f"optim/{slot}/{k}": v for k, v in getattr(state, slot).items()})

    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = _little_endian(arr).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": _little_endian(arr).dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    manifest = {
        "format": FORMAT_VERSION,
        "epoch": int(epoch),
        "config": config or {},
        "optimizer": None if state is None else {k: getattr(state, k) for k in _OPTIM_FIELDS},
        "tensors": entries,
        "blob_bytes": len(blob),
        "blob_sha256": _digest(blob),
    }
    manifest["manifest_sha256"] = _manifest_digest(manifest)

    path.mkdir(parents=True, exist_ok=True)
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path / MANIFEST}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest {path / MANIFEST}: {exc}") from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f"corrupt checkpoint manifest {path / MANIFEST}")
    version = manifest.get("format")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version!r} is not supported (expected {FORMAT_VERSION!r})")
    if manifest.get("manifest_sha256") != _manifest_digest(manifest):
        raise CheckpointError(f"checkpoint manifest {path / MANIFEST} fails its integrity check")
    return manifest


def load_checkpoint(path):
    """Read and verify a checkpoint directory; returns a :class:`Checkpoint`."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint blob missing: {path / BLOB}") from None

    arrays = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(
                f"checkpoint blob truncated: tensor {entry['name']!r} needs bytes "
                f"{entry['offset']}..{end} but the blob has {len(blob)}"
            )
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(blob, dtype=dtype, count=entry["nbytes"] // dtype.itemsize, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    if len(blob) != manifest["blob_bytes"] or _digest(blob) != manifest["blob_sha256"]:
        raise CheckpointError(f"checkpoint blob {path / BLOB} fails its integrity check")
    return Checkpoint(arrays, manifest.get("config", {}), manifest.get("epoch", 0), manifest.get("optimizer"))


def restore_model(model, checkpoint):
    """Copy checkpoint tensors into ``model`` after checking names and shapes."""
    stored = checkpoint.model_arrays()
    current = model.state_arrays()
    missing = sorted(set(current) - set(stored))
    extra = sorted(set(stored) - set(current))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not fit the model: missing {missing}, unexpected {extra}")
    for name, arr in current.items():
        if stored[name].shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {stored[name].shape}, model {arr.shape}"
            )
        if stored[name].dtype != arr.dtype:
            raise CheckpointError(f"dtype mismatch for {name}: checkpoint {stored[name].dtype}, model {arr.dtype}")
    model.load_state_arrays(stored)
    return model

"""Checkpoint archive: a zip holding meta.json plus raw little-endian tensors.

Layout (format version 1):

    meta.json             model config, vocab hashes, tensor directory
    tensors/<name>.bin    raw little-endian values, row-major, no header
    optim/<name>.bin      Adam moments (optional), same encoding

meta.json's "tensors" list gives name, shape and dtype ("<f4" or "<f8") for
every entry, in a fixed order, so the archive can be read back without this
package. Learnable parameters and BN running statistics are both included.
"""
from __future__ import annotations

import json
import zipfile

import numpy as np

from .model import DeepEModel, ModelConfig

FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(Exception):
    """Unreadable, truncated, or internally inconsistent checkpoint archive."""


def _wire_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path: str, model: DeepEModel, entity_vocab_hash: str,
                    relation_vocab_hash: str, optimizer=None):
    tensors = {name: p for name, p, _ in model.named_parameters()}
    tensors.update(dict(model.named_state()))
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "n_entities": model.n_entities,
        "n_relations": model.n_relations,
        "entity_vocab_sha256": entity_vocab_hash,
        "relation_vocab_sha256": relation_vocab_hash,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": _wire_dtype(arr)}
            for name, arr in tensors.items()
        ],
        "optimizer": None,
    }
    optim_tensors = {}
    if optimizer is not None:
        optim_tensors = optimizer.state_arrays()
        meta["optimizer"] = {
            "step_count": optimizer.step_count,
            "tensors": [
                {"name": name, "shape": list(arr.shape), "dtype": _wire_dtype(arr)}
                for name, arr in optim_tensors.items()
            ],
        }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        archive.writestr("meta.json", json.dumps(meta, indent=1))
        for name, arr in tensors.items():
            archive.writestr(f"tensors/{name}.bin", np.ascontiguousarray(arr).astype(
                _DTYPES[_wire_dtype(arr)], copy=False).tobytes())
        for name, arr in optim_tensors.items():
            archive.writestr(f"optim/{name}.bin", np.ascontiguousarray(arr).astype(
                _DTYPES[_wire_dtype(arr)], copy=False).tobytes())


def _read_tensor(archive, member: str, entry: dict) -> np.ndarray:
    dtype = _DTYPES.get(entry["dtype"])
    if dtype is None:
        raise CheckpointError(f"unknown tensor dtype {entry['dtype']!r} for {entry['name']}")
    try:
        raw = archive.read(member)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {entry['name']}") from exc
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
    if len(raw) != expected:
        raise CheckpointError(
            f"tensor {entry['name']} has {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


class Checkpoint:
    def __init__(self, meta: dict, tensors: dict, optim_tensors: dict):
        self.meta = meta
        self.tensors = tensors
        self.optim_tensors = optim_tensors

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["model_config"])

    def build_model(self) -> DeepEModel:
        model = DeepEModel(self.model_config, self.meta["n_entities"], self.meta["n_relations"])
        model.load_state_dict(self.tensors)
        return model


def load_checkpoint(path: str) -> Checkpoint:
    try:
        archive = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with archive:
        try:
            meta = json.loads(archive.read("meta.json"))
        except (KeyError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"checkpoint {path} has no readable meta.json: {exc}") from exc
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version!r}")
        for key in ("model_config", "n_entities", "n_relations",
                    "entity_vocab_sha256", "relation_vocab_sha256", "tensors"):
            if key not in meta:
                raise CheckpointError(f"checkpoint meta.json is missing {key!r}")
        tensors = {
            entry["name"]: _read_tensor(archive, f"tensors/{entry['name']}.bin", entry)
            for entry in meta["tensors"]
        }
        optim_tensors = {}
        if meta.get("optimizer"):
            optim_tensors = {
                entry["name"]: _read_tensor(archive, f"optim/{entry['name']}.bin", entry)
                for entry in meta["optimizer"]["tensors"]
            }
    try:
        ckpt = Checkpoint(meta, tensors, optim_tensors)
        ckpt.model_config  # validates eagerly
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} carries an invalid model config: {exc}") from exc
    return ckpt

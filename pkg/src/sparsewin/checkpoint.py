"""SPWV binary container for tensors plus embedded JSON metadata.

Layout (all integers little-endian u32):

    "SPWV" | version | meta_len | meta JSON (UTF-8) | tensor_count |
    per tensor: name_len | name UTF-8 | rank | dims... | raw f32 payload (LE)

Round trips are bit-exact; tensors are written in sorted name order so
identical contents produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .data import Dataset, Splits
from .model import Model, ModelConfig, ModelParams, param_shapes
from .tensor import Tensor

MAGIC = b"SPWV"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class BadVersion(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedPayload(f"needed {n} bytes at offset {self.off}, "
                                   f"file has {len(self.blob)}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise BadVersion(f"unsupported container version {version} (expected {VERSION})")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = 1
        for d in dims:
            n *= d
        payload = r.take(4 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return tensors, meta


def save_checkpoint(path, model: Model, extra_meta: Optional[dict] = None) -> None:
    meta = {"kind": "model", "model": model.config.to_json_dict()}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, {n: t.data for n, t in model.params.tensors.items()}, meta)


def load_checkpoint(path) -> Model:
    """Load a model; every tensor shape is validated against the config."""
    tensors, meta = load_tensors(path)
    if "model" not in meta:
        raise CheckpointError(f"{path} has no embedded model config")
    config = ModelConfig.from_json_dict(meta["model"])
    expected = param_shapes(config)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ShapeMismatch(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    params = {}
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeMismatch(f"{name}: checkpoint has {tensors[name].shape}, "
                                f"config requires {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return Model(config, ModelParams(params))


def save_splits(path, splits: Splits) -> None:
    tensors: dict[str, np.ndarray] = {}
    for split_name in ("train", "val", "test"):
        ds: Dataset = getattr(splits, split_name)
        tensors[f"{split_name}.images"] = ds.images
        tensors[f"{split_name}.labels"] = ds.labels.astype(np.float32)
        if ds.boxes is not None:
            tensors[f"{split_name}.boxes"] = ds.boxes.astype(np.float32)
    save_tensors(path, tensors, {"kind": "dataset"})


def load_splits(path) -> Splits:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "dataset":
        raise CheckpointError(f"{path} is not a dataset container")
    parts = {}
    for split_name in ("train", "val", "test"):
        boxes = tensors.get(f"{split_name}.boxes")
        parts[split_name] = Dataset(
            images=tensors[f"{split_name}.images"],
            labels=tensors[f"{split_name}.labels"].astype(np.int64),
            boxes=None if boxes is None else boxes.astype(np.int64))
    return Splits(**parts)

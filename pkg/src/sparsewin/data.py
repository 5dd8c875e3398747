"""Synthetic saliency dataset and IDX ingestion.

Each synthetic image is low-amplitude uniform noise with one bright
square placed uniformly at random inside a uniformly chosen quadrant;
the label is the quadrant. Ground-truth boxes ride along for heatmap
validation only and are never shown to the model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 32
    num_train: int = 4096
    num_val: int = 512
    num_test: int = 512
    noise_amplitude: float = 0.1
    object_intensity: float = 1.0
    object_min: int = 6
    object_max: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 2 != 0:
            raise ValueError("image size must be even (quadrant task)")
        half = self.image_size // 2
        if not 1 <= self.object_min <= self.object_max <= half:
            raise ValueError(f"object sizes {self.object_min}..{self.object_max} must fit a "
                             f"{half}x{half} quadrant")


@dataclass
class Dataset:
    """Images [N, H, W, 1] float32, integer labels, optional GT boxes [N, 4]."""

    images: np.ndarray
    labels: np.ndarray
    boxes: Optional[np.ndarray] = None   # (y0, x0, y1, x1), exclusive ends

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(images=self.images[idx], labels=self.labels[idx],
                       boxes=None if self.boxes is None else self.boxes[idx])


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


# quadrant origins, row-major: 0 TL, 1 TR, 2 BL, 3 BR
def _quadrant_origin(label: int, half: int) -> tuple[int, int]:
    return (0 if label < 2 else half), (0 if label % 2 == 0 else half)


def _make_sample(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, int, tuple]:
    s = spec.image_size
    half = s // 2
    img = (rng.random((s, s, 1)) * spec.noise_amplitude).astype(np.float32)
    label = int(rng.integers(4))
    side = int(rng.integers(spec.object_min, spec.object_max + 1))
    oy, ox = _quadrant_origin(label, half)
    y0 = oy + int(rng.integers(half - side + 1))
    x0 = ox + int(rng.integers(half - side + 1))
    img[y0:y0 + side, x0:x0 + side, 0] = spec.object_intensity
    return img, label, (y0, x0, y0 + side, x0 + side)


def _generate_split(spec: DatasetSpec, count: int, ss: np.random.SeedSequence) -> Dataset:
    images = np.empty((count, spec.image_size, spec.image_size, 1), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    boxes = np.empty((count, 4), dtype=np.int64)
    for i, child in enumerate(ss.spawn(count)):
        img, label, box = _make_sample(spec, np.random.Generator(np.random.PCG64(child)))
        images[i] = img
        labels[i] = label
        boxes[i] = box
    return Dataset(images=images, labels=labels, boxes=boxes)


def generate_dataset(spec: DatasetSpec) -> Splits:
    """Seed-deterministic train/val/test splits (per-sample derived seeds)."""
    root = np.random.SeedSequence(spec.seed)
    ss_train, ss_val, ss_test = root.spawn(3)
    return Splits(train=_generate_split(spec, spec.num_train, ss_train),
                  val=_generate_split(spec, spec.num_val, ss_val),
                  test=_generate_split(spec, spec.num_test, ss_test))


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse big-endian IDX image/label files; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise IdxFormatError(f"truncated IDX image header in {images_path}")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"bad IDX image magic 0x{magic:08x} in {images_path}")
        payload = f.read()
    expected = count * rows * cols
    if len(payload) < expected:
        raise IdxFormatError(f"truncated IDX image payload: {len(payload)} bytes for {expected}")
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8)
    images = (pixels.reshape(count, rows, cols, 1).astype(np.float32) / 255.0)

    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"truncated IDX label header in {labels_path}")
        magic, lcount = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"bad IDX label magic 0x{magic:08x} in {labels_path}")
        lpayload = f.read()
    if len(lpayload) < lcount:
        raise IdxFormatError(f"truncated IDX label payload: {len(lpayload)} bytes for {lcount}")
    if lcount != count:
        raise IdxFormatError(f"image/label count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(lpayload[:lcount], dtype=np.uint8).astype(np.int64)
    return Dataset(images=images, labels=labels, boxes=None)


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Seeded shuffle then partition; parts are disjoint and exhaustive."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {list(fractions)}")
    n = len(dataset)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(int(round(acc * n)))
    bounds[-1] = n
    return [dataset.subset(order[a:b]) for a, b in zip(bounds, bounds[1:])]

"""Window importance scoring, selection, and gather/scatter execution.

Windows are scored by the L2 magnitude of their activations, ranked
descending (ties broken by ascending window index), and each block keeps
the top prefix of the stage ordering. Unkept windows pass their input
features through unchanged, at zero compute cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .windows import WindowBatch


@dataclass
class WindowScores:
    """Per-window nonnegative scores for one partition of one image."""

    scores: np.ndarray        # [windows_per_image], float
    stage: int
    shifted: bool


def score_windows(wb: WindowBatch) -> list[WindowScores]:
    """L2 norm of each window's activations, per image.

    Computed on raw values (no tape participation); selection is discrete
    and never differentiated through.
    """
    data = wb.tensor.data
    flat = data.reshape(wb.num_images, wb.windows_per_image, -1).astype(np.float64)
    norms = np.sqrt((flat * flat).sum(axis=2))
    return [WindowScores(scores=norms[i], stage=-1, shifted=wb.shifted)
            for i in range(wb.num_images)]


def rank_windows(scores: WindowScores) -> np.ndarray:
    """Permutation of window indices: descending score, ascending-index ties."""
    return np.argsort(-scores.scores, kind="stable").astype(np.int64)


def kept_count(num_windows: int, ratio: float) -> int:
    """Windows kept at sparsity `ratio`: max(1, ceil((1 - ratio) * W)), exact."""
    tenths = ratio_to_tenths(ratio)
    return kept_count_tenths(num_windows, tenths)


def kept_count_tenths(num_windows: int, tenths: int) -> int:
    if num_windows < 1:
        raise ValueError(f"window count must be >= 1, got {num_windows}")
    if not 0 <= tenths <= 8:
        raise ValueError(f"sparsity must lie on the grid 0.0..0.8, got {tenths / 10}")
    keep = (10 - tenths) * num_windows
    return max(1, -(-keep // 10))


def ratio_to_tenths(ratio: float) -> int:
    """Exact grid check: ratio must be one of {0.0, 0.1, ..., 0.8}."""
    tenths = int(round(ratio * 10))
    if abs(ratio * 10 - tenths) > 1e-9 or not 0 <= tenths <= 8:
        raise ValueError(f"sparsity ratio {ratio} is not on the grid 0.0..0.8")
    return tenths


def gather(wb: WindowBatch, keep: np.ndarray) -> Tensor:
    """Sub-batch of the kept windows, in keep-set (ordering) order."""
    return T.index_select(wb.tensor, np.asarray(keep, dtype=np.int64), axis=0)


def scatter_with_duplicate(wb: WindowBatch, processed: Tensor, keep: np.ndarray) -> WindowBatch:
    """Kept windows replaced by processed outputs; the rest keep their inputs."""
    keep = np.asarray(keep, dtype=np.int64)
    if processed.shape[0] != keep.size:
        raise ValueError(f"processed batch has {processed.shape[0]} windows, keep set has {keep.size}")
    merged = T.index_copy(wb.tensor, keep, processed, axis=0)
    return WindowBatch(tensor=merged, windows_per_row=wb.windows_per_row,
                       windows_per_col=wb.windows_per_col, window_size=wb.window_size,
                       num_images=wb.num_images, shifted=wb.shifted)


def stage_keep_sets(ordering: np.ndarray, ratios: list[float]) -> list[np.ndarray]:
    """Per-block keep sets as prefixes of one shared stage ordering.

    Ratios must be non-descending, so later blocks' keep sets nest inside
    earlier ones by construction.
    """
    tenths = [ratio_to_tenths(r) for r in ratios]
    if any(b < a for a, b in zip(tenths, tenths[1:])):
        raise ValueError(f"stage ratios must be non-descending, got {ratios}")
    w = len(ordering)
    return [ordering[:kept_count_tenths(w, t)].copy() for t in tenths]

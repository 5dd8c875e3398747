"""Per-block sparsity configurations on the discrete grid {0.0, 0.1, ..., 0.8}.

Ratios are stored as integer tenths so grid membership and comparisons
are exact. Block order is global, stage-major; within each stage the
ratios must be non-descending (a pruned window never re-enters the
computation), enforced by `repair` via a per-stage running maximum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

GRID_TENTHS: tuple[int, ...] = tuple(range(9))   # 0.0 .. 0.8


@dataclass(frozen=True)
class SparsityConfig:
    """Per-block window sparsity ratios, stage-major, as integer tenths."""

    tenths: tuple[int, ...]
    stage_depths: tuple[int, ...]

    def __post_init__(self):
        if sum(self.stage_depths) != len(self.tenths):
            raise ValueError(
                f"{len(self.tenths)} ratios for stage depths {self.stage_depths} "
                f"(need {sum(self.stage_depths)})")
        for t in self.tenths:
            if t not in GRID_TENTHS:
                raise ValueError(f"ratio {t / 10} is off the grid 0.0..0.8")
        for stage in self.per_stage():
            if any(b < a for a, b in zip(stage, stage[1:])):
                raise ValueError(f"ratios must be non-descending within a stage, got {self.ratios()}")

    def per_stage(self) -> list[tuple[int, ...]]:
        out, i = [], 0
        for d in self.stage_depths:
            out.append(self.tenths[i:i + d])
            i += d
        return out

    def ratios(self) -> list[float]:
        return [t / 10 for t in self.tenths]

    def average(self) -> float:
        return sum(self.tenths) / (10 * len(self.tenths))

    @staticmethod
    def uniform(tenths: int, stage_depths: Sequence[int]) -> "SparsityConfig":
        depths = tuple(stage_depths)
        return SparsityConfig(tenths=(tenths,) * sum(depths), stage_depths=depths)

    @staticmethod
    def zero(stage_depths: Sequence[int]) -> "SparsityConfig":
        return SparsityConfig.uniform(0, stage_depths)

    def to_json_dict(self) -> dict:
        return {"version": 1, "stage_depths": list(self.stage_depths), "tenths": list(self.tenths)}

    @staticmethod
    def from_json_dict(d: dict) -> "SparsityConfig":
        return SparsityConfig(tenths=tuple(int(t) for t in d["tenths"]),
                              stage_depths=tuple(int(x) for x in d["stage_depths"]))


def repair(raw_tenths: Sequence[int], stage_depths: Sequence[int]) -> SparsityConfig:
    """Make raw per-block draws valid: per-stage running maximum. Idempotent."""
    raw = list(raw_tenths)
    depths = tuple(stage_depths)
    if sum(depths) != len(raw):
        raise ValueError(f"{len(raw)} ratios for stage depths {depths}")
    for t in raw:
        if t not in GRID_TENTHS:
            raise ValueError(f"ratio {t / 10} is off the grid 0.0..0.8")
    out: list[int] = []
    i = 0
    for d in depths:
        running = 0
        for t in raw[i:i + d]:
            running = max(running, t)
            out.append(running)
        i += d
    return SparsityConfig(tenths=tuple(out), stage_depths=depths)


def sample_config(stage_depths: Sequence[int], rng: np.random.Generator,
                  grid: Sequence[int] = GRID_TENTHS) -> SparsityConfig:
    """Uniform per-block draw from `grid`, repaired to per-stage monotone."""
    grid = tuple(grid)
    n = sum(stage_depths)
    raw = [grid[int(rng.integers(len(grid)))] for _ in range(n)]
    return repair(raw, stage_depths)

"""Exact MACs accounting and a wall-clock latency profiler.

MAC counts cover matrix products only: LN, softmax, residual adds, and
pooling count as zero, so totals compare the dominant terms. The latency
protocol runs a warm-up, then measures a fixed number of iterations and
reports the mean of the temporally middle half of the measurements.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .model import ModelConfig
from .pruning import kept_count_tenths
from .sparsity import SparsityConfig


@dataclass
class CostReport:
    """Per-layer MAC counts for one forward pass of a single image."""

    stem: int
    blocks: list[dict]              # {stage, block, sublayer, kept_windows, attention, ffn}
    merges: list[int]
    head: int
    stage_totals: list[int]
    total: int

    def to_json_dict(self) -> dict:
        return {
            "stem": self.stem,
            "blocks": self.blocks,
            "merges": self.merges,
            "head": self.head,
            "stage_totals": self.stage_totals,
            "total": self.total,
        }


@dataclass
class LatencyReport:
    warmup: int
    measured: int
    timings_ms: list[float]         # raw per-iteration times, arrival order
    mean_middle_ms: float           # mean of the temporally middle half
    timer_warning: Optional[str] = None

    def to_json_dict(self) -> dict:
        return {
            "warmup": self.warmup,
            "measured": self.measured,
            "timings_ms": self.timings_ms,
            "mean_middle_ms": self.mean_middle_ms,
            "timer_warning": self.timer_warning,
        }


@dataclass(frozen=True)
class ResourceConstraint:
    kind: str                       # "macs" or "latency"
    budget: float                   # MACs count, or milliseconds
    warmup: int = 50
    iters: int = 100

    def __post_init__(self):
        if self.kind not in ("macs", "latency"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.budget <= 0:
            raise ValueError("constraint budget must be positive")


def macs_attention(n: int, c: int, kept_windows: int) -> int:
    """QKV (3NC^2) + output proj (NC^2) + logits (N^2 C) + aggregation (N^2 C)."""
    if n < 1 or c < 1 or kept_windows < 1:
        raise ValueError("n, c, kept_windows must all be >= 1")
    return kept_windows * (4 * n * c * c + 2 * n * n * c)


def macs_ffn(n: int, c: int, ratio: int, kept_windows: int) -> int:
    """Two linear maps through the rC-wide hidden layer."""
    if n < 1 or c < 1 or ratio < 1 or kept_windows < 1:
        raise ValueError("n, c, ratio, kept_windows must all be >= 1")
    return kept_windows * 2 * n * c * (ratio * c)


def macs_model(config: ModelConfig, sparsity: SparsityConfig,
               resolution: Optional[tuple[int, int]] = None) -> CostReport:
    """Exact MACs for one image under `sparsity`."""
    if sparsity.stage_depths != config.stage_depths:
        raise ValueError(f"sparsity stage depths {sparsity.stage_depths} do not match "
                         f"model {config.stage_depths}")
    h, w = resolution if resolution is not None else config.input_size
    config.validate_resolution(h, w)

    p = config.patch_size
    hs, ws = h // p, w // p
    c0 = config.stages[0].dim
    stem = hs * ws * (p * p * config.in_channels) * c0

    blocks: list[dict] = []
    merges: list[int] = []
    stage_totals: list[int] = []
    per_stage = sparsity.per_stage()
    for si, st in enumerate(config.stages):
        m, c = st.window_size, st.dim
        n = m * m
        nw = (hs // m) * (ws // m)
        stage_total = 0
        for bi, tenths in enumerate(per_stage[si]):
            k = kept_count_tenths(nw, tenths)
            for sub in range(2):
                a = macs_attention(n, c, k)
                f = macs_ffn(n, c, config.ffn_ratio, k)
                blocks.append({"stage": si, "block": bi, "sublayer": sub,
                               "kept_windows": k, "attention": a, "ffn": f})
                stage_total += a + f
        stage_totals.append(stage_total)
        if si + 1 < len(config.stages):
            merges.append((hs // 2) * (ws // 2) * (4 * c) * (2 * c))
            hs, ws = hs // 2, ws // 2
    head = config.stages[-1].dim * config.num_classes
    total = stem + sum(stage_totals) + sum(merges) + head
    return CostReport(stem=stem, blocks=blocks, merges=merges, head=head,
                      stage_totals=stage_totals, total=total)


def summarize_timings(timings_ms: list[float]) -> float:
    """Mean of the temporally middle half of the raw timing vector."""
    n = len(timings_ms)
    start = n // 4
    middle = timings_ms[start:start + n // 2]
    return sum(middle) / len(middle)


def resolution_warning(stat_ms: float, resolution_ms: float) -> Optional[str]:
    """Warn when per-iteration time is within 100x of the clock resolution."""
    if stat_ms < 100.0 * resolution_ms:
        return (f"timer resolution {resolution_ms:.6f} ms is coarse relative to "
                f"per-iteration time {stat_ms:.6f} ms")
    return None


def profile_latency(runner: Callable[[], None], warmup: int = 50,
                    iters: int = 100) -> LatencyReport:
    """Warm up unrecorded, then time `iters` calls on the same fixed input."""
    if iters < 4 or iters % 2 != 0:
        raise ValueError(f"iters must be even and >= 4, got {iters}")
    for _ in range(warmup):
        runner()
    timings = []
    for _ in range(iters):
        t0 = time.perf_counter()
        runner()
        timings.append((time.perf_counter() - t0) * 1e3)
    stat = summarize_timings(timings)
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    return LatencyReport(warmup=warmup, measured=iters, timings_ms=timings,
                         mean_middle_ms=stat,
                         timer_warning=resolution_warning(stat, resolution_ms))


class ConstraintChecker:
    """Evaluates a ResourceConstraint for sparsity configs, with caching.

    Latency measurements are cached by config: the search revisits
    configs and re-measuring would only add noise.
    """

    def __init__(self, constraint: ResourceConstraint, config: ModelConfig,
                 resolution: Optional[tuple[int, int]] = None,
                 latency_runner_factory: Optional[Callable[[SparsityConfig], Callable[[], None]]] = None):
        self.constraint = constraint
        self.config = config
        self.resolution = resolution if resolution is not None else config.input_size
        self.latency_runner_factory = latency_runner_factory
        self._cache: dict[tuple[int, ...], float] = {}

    def measure(self, sparsity: SparsityConfig) -> float:
        key = sparsity.tenths
        if key in self._cache:
            return self._cache[key]
        if self.constraint.kind == "macs":
            value = float(macs_model(self.config, sparsity, self.resolution).total)
        else:
            if self.latency_runner_factory is None:
                raise ValueError("latency constraint needs a runner factory")
            runner = self.latency_runner_factory(sparsity)
            value = profile_latency(runner, self.constraint.warmup, self.constraint.iters).mean_middle_ms
        self._cache[key] = value
        return value

    def check(self, sparsity: SparsityConfig) -> tuple[bool, float]:
        value = self.measure(sparsity)
        return value <= self.constraint.budget, value


def check_constraint(sparsity: SparsityConfig, constraint: ResourceConstraint,
                     config: ModelConfig, resolution: Optional[tuple[int, int]] = None,
                     latency_runner_factory=None) -> tuple[bool, float]:
    """One-shot pass/fail plus the measured value (boundary inclusive)."""
    checker = ConstraintChecker(constraint, config, resolution, latency_runner_factory)
    return checker.check(sparsity)

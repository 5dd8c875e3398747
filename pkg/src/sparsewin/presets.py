"""Canonical desk-scale configurations used by the docs, CLI examples, and tests."""

from __future__ import annotations

from .data import DatasetSpec
from .model import ModelConfig, StageConfig


def toy_config() -> ModelConfig:
    """Small model for the 32x32 quadrant task; trains to ~100% in minutes."""
    return ModelConfig(
        patch_size=4, in_channels=1, num_classes=4, input_size=(32, 32),
        stages=(StageConfig(depth=1, dim=24, heads=2, window_size=2),
                StageConfig(depth=2, dim=48, heads=2, window_size=2)),
        ffn_ratio=2)


def search_toy_config() -> ModelConfig:
    """Two blocks in two stages: an exhaustively enumerable 81-config space."""
    return ModelConfig(
        patch_size=4, in_channels=1, num_classes=4, input_size=(32, 32),
        stages=(StageConfig(depth=1, dim=16, heads=2, window_size=2),
                StageConfig(depth=1, dim=32, heads=2, window_size=2)),
        ffn_ratio=2)


REFERENCE_RESOLUTIONS = ((64, 64), (96, 96), (128, 128))


def reference_config(input_size: tuple[int, int] = (128, 128)) -> ModelConfig:
    """Larger profile for latency measurement; 128x128 is the largest desk size."""
    return ModelConfig(
        patch_size=4, in_channels=1, num_classes=4, input_size=input_size,
        stages=(StageConfig(depth=2, dim=48, heads=4, window_size=4),
                StageConfig(depth=2, dim=96, heads=4, window_size=4)),
        ffn_ratio=4)


def toy_dataset_spec(seed: int = 0, num_train: int = 1024, num_val: int = 256,
                     num_test: int = 256) -> DatasetSpec:
    return DatasetSpec(image_size=32, num_train=num_train, num_val=num_val,
                       num_test=num_test, seed=seed)


def toy_run_config(seed: int = 0) -> dict:
    """A complete run-config dict for the CLI, matching the README walkthrough."""
    return {
        "seed": seed,
        "model": toy_config().to_json_dict(),
        "data": {"kind": "synthetic", "image_size": 32, "train": 1024, "val": 256,
                 "test": 256, "seed": seed},
        "train": {"steps": 300, "lr": 3e-3, "batch_size": 32},
        "adapt": {"steps": 300, "lr": 1e-3, "batch_size": 32},
        "finetune": {"steps": 120, "lr": 1e-3, "batch_size": 32},
        "search": {"population": 16, "elites": 4, "generations": 6,
                   "mutation_prob": 0.2, "rejection_limit": 100},
        # toy_config dense total is 1_917_120 MACs
        "constraint": {"kind": "macs", "budget": 1_150_272},
        "profile": {"warmup": 10, "iters": 20},
    }

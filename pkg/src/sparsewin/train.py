"""Training loops: dense pretraining, sparsity-aware adaptation, finetuning.

All three share one seeded step loop; they differ only in which sparsity
config each step uses (all-zero, freshly sampled, or fixed). Data order
and sparsity sampling come from independent streams spawned from the
settings seed, so dense training and adaptation with a degenerate {0}
grid are step-for-step identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .model import Model
from .sparsity import GRID_TENTHS, SparsityConfig, sample_config
from .tensor import Tape, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    steps: int
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    grid: tuple[int, ...] = GRID_TENTHS    # sparsity grid used by adapt

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


class Adam:
    """Adam with bias correction; state kept in the parameter dtype."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (p.data.dtype.type(self.lr) * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _rng_pair(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss_data, ss_sparsity = np.random.SeedSequence(seed).spawn(2)
    return (np.random.Generator(np.random.PCG64(ss_data)),
            np.random.Generator(np.random.PCG64(ss_sparsity)))


def _train_loop(model: Model, dataset: Dataset, settings: TrainSettings,
                config_for_step: Callable[[int, np.random.Generator], SparsityConfig]) -> list[float]:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng_data, rng_sparsity = _rng_pair(settings.seed)
    opt = Adam(model.params.trainable(), lr=settings.lr)
    n = len(dataset)
    batch = min(settings.batch_size, n)
    curve: list[float] = []
    for step in range(settings.steps):
        idx = rng_data.choice(n, size=batch, replace=False)
        cfg = config_for_step(step, rng_sparsity)
        images = Tensor(dataset.images[idx])
        with Tape() as tape:
            logits = model.forward_batch(images, cfg)
            loss = T.cross_entropy(logits, dataset.labels[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss {value} at step {step}")
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
        curve.append(value)
    return curve


def train_dense(model: Model, dataset: Dataset, settings: TrainSettings) -> list[float]:
    """Train with dense activations only (sparsity fixed to zero)."""
    zero = SparsityConfig.zero(model.config.stage_depths)
    return _train_loop(model, dataset, settings, lambda step, rng: zero)


def adapt(model: Model, dataset: Dataset, settings: TrainSettings) -> list[float]:
    """Sparsity-aware adaptation: a fresh random config on every step.

    Parameter count and shapes never change; pass-through windows carry
    identity gradients, so only the kept-window path updates each step.
    """
    depths = model.config.stage_depths
    return _train_loop(model, dataset, settings,
                       lambda step, rng: sample_config(depths, rng, settings.grid))


def finetune(model: Model, fixed: SparsityConfig, dataset: Dataset,
             settings: TrainSettings) -> list[float]:
    """Train under one fixed sparsity config (the one evaluation will use)."""
    if fixed.stage_depths != model.config.stage_depths:
        raise ValueError("fixed sparsity config does not match the model's stage depths")
    return _train_loop(model, dataset, settings, lambda step, rng: fixed)


def evaluate(model: Model, dataset: Dataset, sparsity: SparsityConfig,
             batch_size: int = 64) -> float:
    """Deterministic top-1 accuracy under the given sparsity config."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        logits = model.forward_batch(Tensor(dataset.images[start:stop]), sparsity)
        pred = np.argmax(logits.data, axis=1)
        correct += int((pred == dataset.labels[start:stop]).sum())
    return correct / n

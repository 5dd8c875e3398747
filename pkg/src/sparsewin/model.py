"""Windowed transformer backbone with window-wise execution of every layer.

Stage/block layout follows the hierarchical shifted-window design: each
block applies [LN -> MHSA -> residual -> LN -> FFN -> residual] twice,
first on the unshifted window partition, then on the partition shifted
by half a window (implemented as a toroidal roll, so windows stay
uniform and no attention mask is needed). Both sub-layers of a block
share one sparsity ratio; window orderings are computed once per
(stage, partition) from the stage input and reused by every block in
the stage.

A learned positional table is added after the patch stem; without it
the backbone is equivariant to window-aligned translations and the
mean-pool classifier could not separate position-defined classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import pruning, tensor as T
from .sparsity import SparsityConfig
from .tensor import Tensor
from .windows import WindowBatch, cyclic_shift, window_partition, window_reverse

INIT_STD = 0.02
POS_INIT_STD = 0.3   # position signal must survive attention + mean pooling


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int
    window_size: int


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int
    in_channels: int
    num_classes: int
    input_size: tuple[int, int]
    stages: tuple[StageConfig, ...]
    ffn_ratio: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("model needs at least one stage")
        for i, st in enumerate(self.stages):
            if st.depth < 1:
                raise ValueError(f"stage {i} depth must be >= 1")
            if st.dim % st.heads != 0:
                raise ValueError(f"stage {i} dim {st.dim} not divisible by {st.heads} heads")
            if st.window_size < 2 or st.window_size % 2 != 0:
                raise ValueError(f"stage {i} window size {st.window_size} must be even and >= 2")
            if i > 0 and st.dim != 2 * self.stages[i - 1].dim:
                raise ValueError(
                    f"stage {i} dim {st.dim} must be twice stage {i - 1} dim "
                    f"{self.stages[i - 1].dim} (patch merging doubles the width)")
        if self.ffn_ratio < 1:
            raise ValueError("ffn_ratio must be >= 1")
        self.validate_resolution(*self.input_size)

    def validate_resolution(self, h: int, w: int) -> None:
        """Resolution must give exact window tilings at every stage (no padding)."""
        for i, st in enumerate(self.stages):
            unit = self.patch_size * st.window_size * (2 ** i)
            if h % unit != 0 or w % unit != 0:
                raise ValueError(
                    f"resolution {h}x{w} not divisible by patch_size * window_size * 2^stage "
                    f"= {unit} at stage {i}")

    @property
    def stage_depths(self) -> tuple[int, ...]:
        return tuple(st.depth for st in self.stages)

    @property
    def total_blocks(self) -> int:
        return sum(self.stage_depths)

    def grid_size(self, stage: int = 0) -> tuple[int, int]:
        h, w = self.input_size
        f = self.patch_size * (2 ** stage)
        return h // f, w // f

    def to_json_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "input_size": list(self.input_size),
            "ffn_ratio": self.ffn_ratio,
            "eps": self.eps,
            "stages": [{"depth": s.depth, "dim": s.dim, "heads": s.heads,
                        "window_size": s.window_size} for s in self.stages],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            patch_size=int(d["patch_size"]),
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            input_size=tuple(int(x) for x in d["input_size"]),
            stages=tuple(StageConfig(depth=int(s["depth"]), dim=int(s["dim"]),
                                     heads=int(s["heads"]), window_size=int(s["window_size"]))
                         for s in d["stages"]),
            ffn_ratio=int(d.get("ffn_ratio", 4)),
            eps=float(d.get("eps", 1e-5)),
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learned tensor's shape, keyed by its checkpoint name."""
    p = config.patch_size
    h0, w0 = config.grid_size(0)
    c0 = config.stages[0].dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (p * p * config.in_channels, c0),
        "patch_embed.bias": (c0,),
        "pos_embed": (h0, w0, c0),
    }
    for si, st in enumerate(config.stages):
        c = st.dim
        hid = config.ffn_ratio * c
        for bi in range(st.depth):
            for sub in range(2):
                pre = f"stages.{si}.blocks.{bi}.sub{sub}."
                shapes[pre + "ln1.gamma"] = (c,)
                shapes[pre + "ln1.beta"] = (c,)
                shapes[pre + "qkv.weight"] = (c, 3 * c)
                shapes[pre + "qkv.bias"] = (3 * c,)
                shapes[pre + "proj.weight"] = (c, c)
                shapes[pre + "proj.bias"] = (c,)
                shapes[pre + "ln2.gamma"] = (c,)
                shapes[pre + "ln2.beta"] = (c,)
                shapes[pre + "ffn.w1"] = (c, hid)
                shapes[pre + "ffn.b1"] = (hid,)
                shapes[pre + "ffn.w2"] = (hid, c)
                shapes[pre + "ffn.b2"] = (c,)
        if si + 1 < len(config.stages):
            shapes[f"merges.{si}.weight"] = (4 * c, 2 * c)
            shapes[f"merges.{si}.bias"] = (2 * c,)
    c_last = config.stages[-1].dim
    shapes["head.weight"] = (c_last, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


class ModelParams:
    """Named learned tensors; checkpoint round-trips are bit-exact."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [self.tensors[n] for n in self.names()]

    def copy(self) -> "ModelParams":
        out = {}
        for name, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out[name] = c
        return ModelParams(out)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                            for n, t in self.tensors.items()})


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Seed-deterministic initialization: N(0, 0.02) weights, zero biases, unit LN."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma",):
            data = np.ones(shape, dtype=dtype)
        elif leaf in ("beta", "bias", "b1", "b2"):
            data = np.zeros(shape, dtype=dtype)
        elif name == "pos_embed":
            data = (rng.standard_normal(shape) * POS_INIT_STD).astype(dtype)
        else:
            data = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


@dataclass
class KeepSetRecord:
    """Which windows one attention sub-layer executed, per image."""

    stage: int
    block: int                 # block index within the stage
    global_block: int
    shifted: bool
    kept: list[np.ndarray]     # per image, window slot indices in ordering order
    grid: tuple[int, int]      # (windows_per_col, windows_per_row)
    window_size: int
    stage_scale: int           # stage tokens -> first-stage tokens


@dataclass
class ForwardTrace:
    """Execution counts on the first-stage token grid, plus the keep-set log."""

    counts: np.ndarray         # [B, h0, w0] int64
    keep_sets: list[KeepSetRecord] = field(default_factory=list)
    total_sublayers: int = 0


def patch_embed(images: Tensor, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """Project non-overlapping patch pixels to tokens: [B,H,W,Cin] -> [B,h,w,C]."""
    b, h, w, cin = images.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    hh, ww = h // patch, w // patch
    x = T.reshape(images, (b, hh, patch, ww, patch, cin))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b * hh * ww, patch * patch * cin))
    x = T.add(T.matmul(x, weight), bias)
    return T.reshape(x, (b, hh, ww, weight.shape[1]))


def patch_merge(fmap: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2x2 neighborhood concat (4C) then linear projection to 2C."""
    b, h, w, c = fmap.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ValueError(f"patch merge needs even dims, got {h}x{w}")
    x = T.reshape(fmap, (b, h // 2, 2, w // 2, 2, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b * (h // 2) * (w // 2), 4 * c))
    x = T.add(T.matmul(x, weight), bias)
    return T.reshape(x, (b, h // 2, w // 2, 2 * c))


def window_attention(x: Tensor, qkv_w: Tensor, qkv_b: Tensor, proj_w: Tensor,
                     proj_b: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention within each window of a batch [W, N, C]."""
    nw, n, c = x.shape
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by {heads} heads")
    d = c // heads
    qkv = T.linear(x, qkv_w, qkv_b)
    qkv = T.reshape(qkv, (nw, n, 3, heads, d))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))           # [3, W, heads, N, d]
    q = T.reshape(T.index_select(qkv, [0], axis=0), (nw, heads, n, d))
    k = T.reshape(T.index_select(qkv, [1], axis=0), (nw, heads, n, d))
    v = T.reshape(T.index_select(qkv, [2], axis=0), (nw, heads, n, d))
    q = T.scale(q, 1.0 / math.sqrt(d))
    attn = T.softmax_lastdim(T.matmul(q, T.transpose(k, (0, 1, 3, 2))))
    ctx = T.matmul(attn, v)                           # [W, heads, N, d]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (nw, n, c))
    return T.linear(ctx, proj_w, proj_b)


class Model:
    """Config plus parameters, with sparse and dense-equivalent forward passes."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @staticmethod
    def init(config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return Model(config, init_params(config, seed, dtype))

    def _sub_params(self, stage: int, block: int, sub: int) -> dict[str, Tensor]:
        pre = f"stages.{stage}.blocks.{block}.sub{sub}."
        t = self.params.tensors
        return {k: t[pre + k] for k in ("ln1.gamma", "ln1.beta", "qkv.weight", "qkv.bias",
                                        "proj.weight", "proj.bias", "ln2.gamma", "ln2.beta",
                                        "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")}

    def _sublayer(self, wb: WindowBatch, sp: dict[str, Tensor], stage_cfg: StageConfig,
                  keep_flat: np.ndarray) -> WindowBatch:
        """One [LN -> MHSA -> res -> LN -> FFN -> res] pass over kept windows."""
        eps = self.config.eps
        sub = pruning.gather(wb, keep_flat)
        y = T.add(sub, window_attention(
            T.layer_norm(sub, sp["ln1.gamma"], sp["ln1.beta"], eps),
            sp["qkv.weight"], sp["qkv.bias"], sp["proj.weight"], sp["proj.bias"],
            stage_cfg.heads))
        h = T.gelu(T.linear(T.layer_norm(y, sp["ln2.gamma"], sp["ln2.beta"], eps),
                            sp["ffn.w1"], sp["ffn.b1"]))
        y = T.add(y, T.linear(h, sp["ffn.w2"], sp["ffn.b2"]))
        return pruning.scatter_with_duplicate(wb, y, keep_flat)

    def block_forward(self, fmap: Tensor, stage: int, block: int,
                      keep_flat: dict[bool, np.ndarray]) -> Tensor:
        """Run one block: the unshifted sub-layer, then the shifted one.

        `keep_flat` holds one flat kept-window index array per partition
        (both derived from the block's single sparsity ratio). Windows
        outside a sub-layer's keep set pass through it bit-identically.
        """
        st = self.config.stages[stage]
        m = st.window_size
        shift = m // 2
        hs, ws = fmap.shape[1], fmap.shape[2]
        x = fmap
        for sub, shifted in ((0, False), (1, True)):
            sp = self._sub_params(stage, block, sub)
            xm = cyclic_shift(x, -shift, -shift) if shifted else x
            wb = self._sublayer(window_partition(xm, m, shifted), sp, st,
                                keep_flat[shifted])
            xm = window_reverse(wb, hs, ws)
            x = cyclic_shift(xm, shift, shift) if shifted else xm
        return x

    def forward_batch(self, images, sparsity: SparsityConfig,
                      record_counts: bool = False):
        """Forward a batch [B, H, W, Cin]; returns logits [B, K] (and a trace)."""
        cfg = self.config
        if sparsity.stage_depths != cfg.stage_depths:
            raise ValueError(
                f"sparsity config covers stage depths {sparsity.stage_depths}, "
                f"model has {cfg.stage_depths}")
        if not isinstance(images, Tensor):
            images = Tensor(images)
        b, h, w, cin = images.shape
        if (h, w) != cfg.input_size or cin != cfg.in_channels:
            raise ValueError(f"input {h}x{w}x{cin} does not match configured "
                             f"{cfg.input_size} x {cfg.in_channels}")

        pt = self.params.tensors
        x = patch_embed(images, pt["patch_embed.weight"], pt["patch_embed.bias"], cfg.patch_size)
        h0, w0 = cfg.grid_size(0)
        c0 = cfg.stages[0].dim
        pos = pt["pos_embed"]
        x = T.reshape(T.add(T.reshape(x, (b, h0 * w0 * c0)),
                            T.reshape(pos, (h0 * w0 * c0,))), (b, h0, w0, c0))

        trace = ForwardTrace(counts=np.zeros((b, h0, w0), dtype=np.int64),
                             total_sublayers=2 * cfg.total_blocks) if record_counts else None
        ratios_per_stage = sparsity.per_stage()
        gblock = 0
        for si, st in enumerate(cfg.stages):
            m = st.window_size
            hs, ws = x.shape[1], x.shape[2]
            shift = m // 2
            nw = (hs // m) * (ws // m)

            # shared scoring: one ordering per (stage, partition) from the stage input
            orderings: dict[bool, list[np.ndarray]] = {}
            for shifted in (False, True):
                xm = cyclic_shift(x, -shift, -shift) if shifted else x
                wb = window_partition(xm, m, shifted)
                orderings[shifted] = [pruning.rank_windows(s) for s in pruning.score_windows(wb)]

            for bi, tenths in enumerate(ratios_per_stage[si]):
                k = pruning.kept_count_tenths(nw, tenths)
                keep_flat = {}
                for shifted in (False, True):
                    keep_per_img = [orderings[shifted][i][:k] for i in range(b)]
                    keep_flat[shifted] = np.concatenate(
                        [keep_per_img[i] + i * nw for i in range(b)])
                    if trace is not None:
                        rec = KeepSetRecord(stage=si, block=bi, global_block=gblock,
                                            shifted=shifted, kept=keep_per_img,
                                            grid=(hs // m, ws // m), window_size=m,
                                            stage_scale=2 ** si)
                        trace.keep_sets.append(rec)
                        _accumulate_counts(trace.counts, rec)
                x = self.block_forward(x, si, bi, keep_flat)
                gblock += 1
            if si + 1 < len(cfg.stages):
                x = patch_merge(x, pt[f"merges.{si}.weight"], pt[f"merges.{si}.bias"])

        pooled = T.mean(x, (1, 2))
        logits = T.add(T.matmul(pooled, pt["head.weight"]), pt["head.bias"])
        if record_counts:
            return logits, trace
        return logits

    def forward(self, image, sparsity: SparsityConfig, record_counts: bool = False):
        """Forward a single [H, W, Cin] image; returns logits [K] (and a trace)."""
        if not isinstance(image, Tensor):
            image = Tensor(image)
        batch = T.reshape(image, (1,) + image.shape)
        if record_counts:
            logits, trace = self.forward_batch(batch, sparsity, record_counts=True)
            return T.reshape(logits, (logits.shape[1],)), trace
        logits = self.forward_batch(batch, sparsity)
        return T.reshape(logits, (logits.shape[1],))


def _accumulate_counts(counts: np.ndarray, rec: KeepSetRecord) -> None:
    """Broadcast one sub-layer's kept window slots onto the first-stage grid."""
    f = rec.window_size * rec.stage_scale
    wpr = rec.grid[1]
    for img, kept in enumerate(rec.kept):
        for slot in kept:
            r, c = int(slot) // wpr, int(slot) % wpr
            counts[img, r * f:(r + 1) * f, c * f:(c + 1) * f] += 1


def recompute_counts(trace: ForwardTrace, grid_hw: tuple[int, int]) -> np.ndarray:
    """Rebuild execution counts from the keep-set log alone."""
    b = len(trace.keep_sets[0].kept) if trace.keep_sets else 0
    counts = np.zeros((b,) + tuple(grid_hw), dtype=np.int64)
    for rec in trace.keep_sets:
        _accumulate_counts(counts, rec)
    return counts

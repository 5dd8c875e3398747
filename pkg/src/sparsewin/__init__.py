"""Windowed transformer with window activation pruning.

The pipeline: score windows by L2 activation magnitude, keep the
top-ranked prefix per block (shared ordering per stage), execute
attention/FFN/LN only on kept windows with gather/duplicate-scatter,
account exact MACs or measured latency, adapt the model to random
sparsity, and search the per-block sparsity space under a resource
constraint.
"""

from .cost import (ConstraintChecker, CostReport, LatencyReport, ResourceConstraint,
                   check_constraint, macs_attention, macs_ffn, macs_model,
                   profile_latency, summarize_timings)
from .data import Dataset, DatasetSpec, Splits, generate_dataset, load_idx, split
from .model import (ForwardTrace, Model, ModelConfig, ModelParams, StageConfig,
                    init_params, param_shapes, patch_embed, patch_merge,
                    recompute_counts, window_attention)
from .pruning import (gather, kept_count, rank_windows, scatter_with_duplicate,
                      score_windows, stage_keep_sets)
from .search import (Candidate, SearchSettings, crossover, evolve, init_population,
                     mutate, random_search)
from .sparsity import GRID_TENTHS, SparsityConfig, repair, sample_config
from .tensor import (Tape, Tensor, backward, cross_entropy, gelu, layer_norm, matmul,
                     softmax_lastdim)
from .train import Adam, TrainSettings, TrainingDiverged, adapt, evaluate, finetune, train_dense
from .windows import WindowBatch, cyclic_shift, window_partition, window_reverse

__version__ = "0.1.0"

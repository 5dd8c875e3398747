"""Command-line entry points tying the pipeline together.

Subcommands: generate-data, train, adapt, search, finetune, eval,
heatmap, profile. Every command is driven by one JSON run config
(--config), writes its artifacts under --out, and is reproducible
end-to-end from (config, seed). Validation problems exit nonzero with a
single machine-readable error line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import search as search_mod
from .cost import (ConstraintChecker, LatencyReport, ResourceConstraint, macs_model,
                   profile_latency)
from .data import Dataset, DatasetSpec, Splits, generate_dataset, load_idx, split
from .model import Model, ModelConfig, recompute_counts
from .sparsity import GRID_TENTHS, SparsityConfig, repair
from .train import TrainSettings, adapt, evaluate, finetune, train_dense


class ConfigError(ValueError):
    pass


def _load_run_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"run config not found: {path}")
    with open(p) as f:
        return json.load(f)


def _model_config(run: dict) -> ModelConfig:
    if "model" not in run:
        raise ConfigError("run config is missing the 'model' section")
    return ModelConfig.from_json_dict(run["model"])


def _seed(run: dict, args) -> int:
    return args.seed if args.seed is not None else int(run.get("seed", 0))


def _load_splits(run: dict, seed: int) -> Splits:
    d = run.get("data")
    if not d:
        raise ConfigError("run config is missing the 'data' section")
    kind = d.get("kind", "synthetic")
    if kind == "synthetic":
        spec = DatasetSpec(
            image_size=int(d.get("image_size", 32)),
            num_train=int(d.get("train", 4096)),
            num_val=int(d.get("val", 512)),
            num_test=int(d.get("test", 512)),
            noise_amplitude=float(d.get("noise_amplitude", 0.1)),
            object_intensity=float(d.get("object_intensity", 1.0)),
            object_min=int(d.get("object_min", 6)),
            object_max=int(d.get("object_max", 10)),
            seed=int(d.get("seed", seed)))
        return generate_dataset(spec)
    if kind == "idx":
        for key in ("images", "labels"):
            if key not in d:
                raise ConfigError(f"idx data needs an '{key}' path")
            if not Path(d[key]).exists():
                raise ConfigError(f"idx {key} file not found: {d[key]}")
        ds = load_idx(d["images"], d["labels"])
        fractions = d.get("fractions", [0.8, 0.1, 0.1])
        train_ds, val_ds, test_ds = split(ds, fractions, int(d.get("seed", seed)))
        return Splits(train=train_ds, val=val_ds, test=test_ds)
    if kind == "container":
        path = d.get("path")
        if not path or not Path(path).exists():
            raise ConfigError(f"dataset container not found: {path}")
        return ckpt.load_splits(path)
    raise ConfigError(f"unknown data kind {kind!r}")


def _train_settings(run: dict, section: str, seed: int) -> TrainSettings:
    base = dict(run.get("train", {}))
    base.update(run.get(section, {}) if section != "train" else {})
    return TrainSettings(steps=int(base.get("steps", 500)),
                         lr=float(base.get("lr", 1e-3)),
                         batch_size=int(base.get("batch_size", 32)),
                         seed=int(base.get("seed", seed)))


def _sparsity_from_file(path: str, config: ModelConfig) -> SparsityConfig:
    if not Path(path).exists():
        raise ConfigError(f"sparsity config not found: {path}")
    with open(path) as f:
        sc = SparsityConfig.from_json_dict(json.load(f))
    if sc.stage_depths != config.stage_depths:
        raise ConfigError(f"sparsity config stage depths {sc.stage_depths} do not match "
                          f"model {config.stage_depths}")
    return sc


def _load_model(path: str) -> Model:
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return ckpt.load_checkpoint(path)


def _write_curve_csv(path, curve, val_accuracy=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "val_accuracy"])
        for i, loss in enumerate(curve):
            final = val_accuracy if i == len(curve) - 1 else ""
            w.writerow([i, f"{loss:.6f}", final])


def write_pgm(path, counts: np.ndarray, max_count: int) -> None:
    """Grayscale P5 image: counts mapped linearly onto [0, 255]."""
    h, w = counts.shape
    scaled = np.clip(np.rint(counts * (255.0 / max(max_count, 1))), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.tobytes())


def _constraint(run: dict) -> ResourceConstraint:
    c = run.get("constraint")
    if not c:
        raise ConfigError("run config is missing the 'constraint' section")
    kind = c.get("kind", "macs")
    budget = c.get("budget", c.get("budget_ms"))
    if budget is None:
        raise ConfigError("constraint needs a 'budget'")
    return ResourceConstraint(kind=kind, budget=float(budget),
                              warmup=int(c.get("warmup", 50)), iters=int(c.get("iters", 100)))


def _fixed_input(config: ModelConfig, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = config.input_size
    return rng.random((h, w, config.in_channels)).astype(np.float32)


# ---------------------------------------------------------------------------
# commands

def cmd_generate_data(args) -> int:
    run = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(run, _seed(run, args))
    path = out / "dataset.spwv"
    ckpt.save_splits(path, splits)
    print(json.dumps({"dataset": str(path), "train": len(splits.train),
                      "val": len(splits.val), "test": len(splits.test)}))
    return 0


def _run_training(args, mode: str) -> int:
    run = _load_run_config(args.config)
    seed = _seed(run, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _model_config(run)
    splits = _load_splits(run, seed)
    settings = _train_settings(run, mode, seed)

    if mode == "train":
        model = Model.init(config, seed=seed)
        curve = train_dense(model, splits.train, settings)
        sparsity = SparsityConfig.zero(config.stage_depths)
    elif mode == "adapt":
        model = _load_model(args.init)
        curve = adapt(model, splits.train, settings)
        sparsity = SparsityConfig.zero(config.stage_depths)
    else:
        model = _load_model(args.init)
        sparsity = _sparsity_from_file(args.sparsity, model.config)
        curve = finetune(model, sparsity, splits.train, settings)

    val_acc = evaluate(model, splits.val, sparsity)
    ckpt_path = out / "checkpoint.spwv"
    ckpt.save_checkpoint(ckpt_path, model, {"stage": mode, "seed": seed})
    _write_curve_csv(out / "curve.csv", curve, val_acc)
    print(json.dumps({"checkpoint": str(ckpt_path), "steps": len(curve),
                      "final_loss": curve[-1] if curve else None, "val_accuracy": val_acc}))
    return 0


def cmd_train(args) -> int:
    return _run_training(args, "train")


def cmd_adapt(args) -> int:
    return _run_training(args, "adapt")


def cmd_finetune(args) -> int:
    return _run_training(args, "finetune")


def _enumerate_space(stage_depths) -> list[SparsityConfig]:
    import itertools
    total = len(GRID_TENTHS) ** sum(stage_depths)
    if total > 100_000:
        raise ConfigError(f"space of {total} raw configs is too large to enumerate")
    seen = {}
    for raw in itertools.product(GRID_TENTHS, repeat=sum(stage_depths)):
        cfg = repair(list(raw), stage_depths)
        seen[cfg.tenths] = cfg
    return list(seen.values())


def cmd_search(args) -> int:
    run = _load_run_config(args.config)
    seed = _seed(run, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.init)
    config = model.config
    splits = _load_splits(run, seed)
    constraint = _constraint(run)

    def latency_runner_factory(sparsity):
        image = _fixed_input(config, seed)
        return lambda: model.forward(image, sparsity)

    checker = ConstraintChecker(constraint, config,
                                latency_runner_factory=latency_runner_factory)

    def evaluator(sparsity: SparsityConfig) -> float:
        return evaluate(model, splits.val, sparsity)

    s = run.get("search", {})
    settings = search_mod.SearchSettings(
        population=int(s.get("population", 32)),
        elites=int(s.get("elites", 8)),
        generations=int(s.get("generations", 12)),
        mutation_prob=float(s.get("mutation_prob", 0.2)),
        rejection_limit=int(s.get("rejection_limit", 100)),
        seed=seed)

    if args.exhaustive:
        space = _enumerate_space(config.stage_depths)
        feasible = [c for c in space if checker.check(c)[0]]
        if not feasible:
            raise search_mod.InfeasibleConstraint("no feasible config in the search space")
        scored = [(evaluator(c), c) for c in feasible]
        fitness, best_cfg = max(scored, key=lambda fc: (fc[0], [-t for t in fc[1].tenths]))
        best = search_mod.Candidate(config=best_cfg, resource=checker.measure(best_cfg),
                                    fitness=fitness)
        log, stats = [], search_mod.SearchStats(evaluations=len(feasible))
    elif args.baseline == "random":
        budget = settings.population * (settings.generations + 1)
        best, draw_log, stats = search_mod.random_search(
            config.stage_depths, budget, checker, evaluator, seed,
            rejection_limit=settings.rejection_limit)
        log = [{"generation": i, "best_fitness": row["fitness"], "mean_fitness": "",
                "best_ever_fitness": "", "best_ever_tenths": row["tenths"],
                "evaluations": ""} for i, row in enumerate(draw_log)]
    else:
        best, log, stats = search_mod.evolve(config.stage_depths, settings, checker, evaluator)

    best_path = out / "best_config.json"
    with open(best_path, "w") as f:
        json.dump(best.config.to_json_dict(), f, indent=2)
    log_path = out / "search_log.csv"
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["generation", "best_fitness", "mean_fitness",
                    "best_ever_fitness", "best_ever_tenths", "evaluations"])
        for row in log:
            w.writerow([row["generation"], row["best_fitness"], row["mean_fitness"],
                        row["best_ever_fitness"],
                        "-".join(str(t) for t in row["best_ever_tenths"]),
                        row["evaluations"]])
    print(json.dumps({"best_config": str(best_path), "log": str(log_path),
                      "fitness": best.fitness, "resource": best.resource,
                      "tenths": list(best.config.tenths),
                      "evaluations": stats.evaluations}))
    return 0


def cmd_eval(args) -> int:
    run = _load_run_config(args.config)
    seed = _seed(run, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.ckpt)
    sparsity = _sparsity_from_file(args.sparsity, model.config)
    splits = _load_splits(run, seed)
    ds: Dataset = getattr(splits, args.split)

    accuracy = evaluate(model, ds, sparsity)
    cost = macs_model(model.config, sparsity)
    prof = run.get("profile", {})
    image = ds.images[0] if len(ds) else _fixed_input(model.config, seed)
    latency = profile_latency(lambda: model.forward(image, sparsity),
                              warmup=int(prof.get("warmup", 50)),
                              iters=int(prof.get("iters", 100)))
    report = {"accuracy": accuracy, "macs": cost.to_json_dict(),
              "latency": latency.to_json_dict()}
    report_path = out / "report.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2)
    print(json.dumps({"report": str(report_path), "accuracy": accuracy,
                      "total_macs": cost.total, "latency_ms": latency.mean_middle_ms}))
    return 0


def cmd_heatmap(args) -> int:
    run = _load_run_config(args.config)
    seed = _seed(run, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.ckpt)
    sparsity = _sparsity_from_file(args.sparsity, model.config)
    splits = _load_splits(run, seed)
    ds: Dataset = getattr(splits, args.split)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"image index {args.index} out of range for split of {len(ds)}")

    _, trace = model.forward(ds.images[args.index], sparsity, record_counts=True)
    counts = trace.counts[0]
    # cross-check against the keep sets logged during the same pass
    recomputed = recompute_counts(trace, counts.shape)[0]
    if not np.array_equal(counts, recomputed):
        raise AssertionError("execution counts disagree with the logged keep sets")

    pgm_path = out / "heatmap.pgm"
    write_pgm(pgm_path, counts, trace.total_sublayers)
    csv_path = out / "heatmap_counts.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        for row in counts:
            w.writerow([int(v) for v in row])
    print(json.dumps({"heatmap": str(pgm_path), "counts": str(csv_path),
                      "max_count": int(counts.max()),
                      "total_sublayers": trace.total_sublayers}))
    return 0


def cmd_profile(args) -> int:
    run = _load_run_config(args.config)
    seed = _seed(run, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.ckpt)
    sparsity = _sparsity_from_file(args.sparsity, model.config)
    prof = run.get("profile", {})
    image = _fixed_input(model.config, seed)
    report = profile_latency(lambda: model.forward(image, sparsity),
                             warmup=int(prof.get("warmup", 50)),
                             iters=int(prof.get("iters", 100)))
    path = out / "latency.json"
    with open(path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2)
    print(json.dumps({"latency": str(path), "mean_middle_ms": report.mean_middle_ms,
                      "timer_warning": report.timer_warning}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsewin")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config JSON path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate-data", help="write the dataset container")
    common(p)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="dense pretraining")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("adapt", help="sparsity-aware adaptation")
    common(p)
    p.add_argument("--init", required=True, help="dense checkpoint to adapt")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("finetune", help="finetune at a fixed sparsity config")
    common(p)
    p.add_argument("--init", required=True, help="checkpoint to finetune")
    p.add_argument("--sparsity", required=True, help="sparsity config JSON path")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("search", help="resource-constrained sparsity search")
    common(p)
    p.add_argument("--init", required=True, help="adapted checkpoint")
    p.add_argument("--baseline", choices=["random"], default=None,
                   help="random search with the equivalent evaluation budget")
    p.add_argument("--exhaustive", action="store_true",
                   help="brute-force every config (small spaces only)")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("eval", help="accuracy + MACs + latency report")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sparsity", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="execution-count heatmap for one image")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sparsity", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("profile", help="latency profile of one config")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sparsity", required=True)
    p.set_defaults(fn=cmd_profile)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError, ckpt.CheckpointError,
            search_mod.InfeasibleConstraint, search_mod.RejectionExhausted) as e:
        print(json.dumps({"error": str(e), "type": type(e).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Resource-constrained evolutionary search over sparsity configs.

Every candidate ever admitted to a population satisfies the resource
constraint, enforced by rejection sampling (repeated resampling until
satisfaction) at initialization, mutation, and crossover. Each
generation keeps the top-k candidates by fitness and breeds the next
population from n/2 mutations and n/2 crossovers of those elites. The
best-ever evaluated candidate is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cost import ConstraintChecker
from .sparsity import GRID_TENTHS, SparsityConfig, repair, sample_config


class InfeasibleConstraint(RuntimeError):
    pass


class RejectionExhausted(RuntimeError):
    pass


@dataclass
class Candidate:
    config: SparsityConfig
    resource: float
    fitness: Optional[float] = None


@dataclass(frozen=True)
class SearchSettings:
    population: int = 32
    elites: int = 8
    generations: int = 12
    mutation_prob: float = 0.2
    rejection_limit: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.population % 2 != 0 or self.population < 2:
            raise ValueError("population size must be even and >= 2")
        if not 1 <= self.elites <= self.population:
            raise ValueError("elite count must be in [1, population]")
        if self.rejection_limit < 1:
            raise ValueError("rejection limit must be >= 1")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation probability must be in [0, 1]")


@dataclass
class SearchStats:
    evaluations: int = 0
    mutation_fallbacks: int = 0
    crossover_fallbacks: int = 0


class _CachedEvaluator:
    def __init__(self, evaluator: Callable[[SparsityConfig], float], stats: SearchStats):
        self.evaluator = evaluator
        self.stats = stats
        self.cache: dict[tuple[int, ...], float] = {}

    def __call__(self, config: SparsityConfig) -> float:
        key = config.tenths
        if key not in self.cache:
            self.cache[key] = float(self.evaluator(config))
            self.stats.evaluations += 1
        return self.cache[key]


def _check_feasible(stage_depths: Sequence[int], checker: ConstraintChecker) -> None:
    sparsest = SparsityConfig.uniform(max(GRID_TENTHS), stage_depths)
    ok, value = checker.check(sparsest)
    if not ok:
        raise InfeasibleConstraint(
            f"even the sparsest config measures {value}, over budget {checker.constraint.budget}")


def init_population(stage_depths: Sequence[int], settings: SearchSettings,
                    checker: ConstraintChecker, rng: np.random.Generator,
                    grid: Sequence[int] = GRID_TENTHS) -> list[Candidate]:
    """n independent draws, each rejection-resampled until it fits the budget."""
    _check_feasible(stage_depths, checker)
    population = []
    for slot in range(settings.population):
        for attempt in range(settings.rejection_limit):
            config = sample_config(stage_depths, rng, grid)
            ok, value = checker.check(config)
            if ok:
                population.append(Candidate(config=config, resource=value))
                break
        else:
            raise RejectionExhausted(
                f"no feasible draw for slot {slot} in {settings.rejection_limit} attempts")
    return population


def mutate(parent: Candidate, mutation_prob: float, rng: np.random.Generator,
           checker: ConstraintChecker, max_attempts: int,
           stats: Optional[SearchStats] = None,
           grid: Sequence[int] = GRID_TENTHS) -> Candidate:
    """Resample each block from the full grid with probability p; repair; reject."""
    grid = tuple(grid)
    depths = parent.config.stage_depths
    for _ in range(max_attempts):
        raw = list(parent.config.tenths)
        for i in range(len(raw)):
            if rng.random() < mutation_prob:
                raw[i] = grid[int(rng.integers(len(grid)))]
        child = repair(raw, depths)
        ok, value = checker.check(child)
        if ok:
            return Candidate(config=child, resource=value)
    if stats is not None:
        stats.mutation_fallbacks += 1
    return Candidate(config=parent.config, resource=parent.resource, fitness=parent.fitness)


def crossover(a: Candidate, b: Candidate, rng: np.random.Generator,
              checker: ConstraintChecker, max_attempts: int,
              stats: Optional[SearchStats] = None) -> Candidate:
    """Uniform per-block gene choice; new coin flips on every rejection retry."""
    depths = a.config.stage_depths
    for _ in range(max_attempts):
        picks = rng.integers(2, size=len(a.config.tenths))
        raw = [a.config.tenths[i] if picks[i] == 0 else b.config.tenths[i]
               for i in range(len(picks))]
        child = repair(raw, depths)
        ok, value = checker.check(child)
        if ok:
            return Candidate(config=child, resource=value)
    if stats is not None:
        stats.crossover_fallbacks += 1
    better = a if (a.fitness or 0.0) >= (b.fitness or 0.0) else b
    return Candidate(config=better.config, resource=better.resource, fitness=better.fitness)


def _sorted_by_fitness(population: list[Candidate]) -> list[Candidate]:
    # deterministic order: fitness descending, then config tenths as tie-break
    return sorted(population, key=lambda c: (-c.fitness, c.config.tenths))


def _verify_population(population: list[Candidate], checker: ConstraintChecker) -> None:
    for cand in population:
        ok, value = checker.check(cand.config)
        if not ok:
            raise AssertionError(f"candidate {cand.config.tenths} violates the constraint "
                                 f"({value} > {checker.constraint.budget})")


def evolve(stage_depths: Sequence[int], settings: SearchSettings,
           checker: ConstraintChecker, evaluator: Callable[[SparsityConfig], float],
           grid: Sequence[int] = GRID_TENTHS):
    """Run the generational loop; returns (best-ever, per-generation log, stats)."""
    rng = np.random.Generator(np.random.PCG64(settings.seed))
    stats = SearchStats()
    cached = _CachedEvaluator(evaluator, stats)

    population = init_population(stage_depths, settings, checker, rng, grid)
    for cand in population:
        cand.fitness = cached(cand.config)
    best = _sorted_by_fitness(population)[0]

    log: list[dict] = []
    half = settings.population // 2
    for gen in range(1, settings.generations + 1):
        elites = _sorted_by_fitness(population)[:settings.elites]
        children: list[Candidate] = []
        for _ in range(half):
            parent = elites[int(rng.integers(len(elites)))]
            children.append(mutate(parent, settings.mutation_prob, rng, checker,
                                   settings.rejection_limit, stats, grid))
        for _ in range(half):
            if len(elites) >= 2:
                i, j = rng.choice(len(elites), size=2, replace=False)
                pa, pb = elites[int(i)], elites[int(j)]
            else:
                pa = pb = elites[0]
            children.append(crossover(pa, pb, rng, checker, settings.rejection_limit, stats))
        population = children
        _verify_population(population, checker)
        for cand in population:
            cand.fitness = cached(cand.config)
        gen_best = _sorted_by_fitness(population)[0]
        if gen_best.fitness > best.fitness or (
                gen_best.fitness == best.fitness and gen_best.config.tenths < best.config.tenths):
            best = gen_best
        log.append({
            "generation": gen,
            "best_fitness": gen_best.fitness,
            "mean_fitness": sum(c.fitness for c in population) / len(population),
            "best_ever_fitness": best.fitness,
            "best_ever_tenths": best.config.tenths,
            "evaluations": stats.evaluations,
        })
    return best, log, stats


def random_search(stage_depths: Sequence[int], budget: int,
                  checker: ConstraintChecker, evaluator: Callable[[SparsityConfig], float],
                  seed: int, rejection_limit: int = 100,
                  grid: Sequence[int] = GRID_TENTHS):
    """Constraint-satisfying uniform draws; returns (best, draw log, stats)."""
    if budget < 1:
        raise ValueError("random search budget must be >= 1")
    _check_feasible(stage_depths, checker)
    rng = np.random.Generator(np.random.PCG64(seed))
    stats = SearchStats()
    cached = _CachedEvaluator(evaluator, stats)
    best: Optional[Candidate] = None
    log: list[dict] = []
    for draw in range(budget):
        for _ in range(rejection_limit):
            config = sample_config(stage_depths, rng, grid)
            ok, value = checker.check(config)
            if ok:
                break
        else:
            raise RejectionExhausted(f"no feasible draw in {rejection_limit} attempts")
        duplicate = config.tenths in cached.cache
        cand = Candidate(config=config, resource=value, fitness=cached(config))
        log.append({"draw": draw, "tenths": config.tenths, "fitness": cand.fitness,
                    "duplicate": duplicate})
        if best is None or cand.fitness > best.fitness or (
                cand.fitness == best.fitness and cand.config.tenths < best.config.tenths):
            best = cand
    return best, log, stats

"""Evolutionary architecture search under a resource constraint.

Each generation keeps the k fittest individuals and rebuilds the population
from n/2 mutations (every gene of a random top-k parent redrawn with a
fixed probability) and n/2 uniform crossovers (each gene from either of two
random top-k parents). Every individual ever placed in a population
satisfies the constraint: offspring are resampled until they do, and the
evaluation boundary re-asserts it. The best candidate ever evaluated is
returned, so the reported fitness never decreases across generations.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InfeasibleConstraintError
from . import space as sp


@dataclass
class SearchResult:
    best_arch: "sp.ArchSpec"
    best_fitness: float
    history: list = field(default_factory=list)
    evaluations: int = 0


def _mutate(space, parent, mutation_prob, rng):
    depths = list(parent.depths)
    channels = [list(row) for row in parent.channels]
    for s, stage in enumerate(space.stages):
        if rng.random() < mutation_prob:
            depths[s] = int(rng.integers(1, stage.max_depth + 1))
        for j in range(stage.max_depth):
            if rng.random() < mutation_prob:
                channels[s][j] = int(stage.channel_choices[
                    rng.integers(0, len(stage.channel_choices))])
    return sp.ArchSpec(tuple(depths), tuple(tuple(row) for row in channels))


def _crossover(space, a, b, rng):
    depths, channels = [], []
    for s, stage in enumerate(space.stages):
        depths.append(a.depths[s] if rng.random() < 0.5 else b.depths[s])
        row = tuple(
            a.channels[s][j] if rng.random() < 0.5 else b.channels[s][j]
            for j in range(stage.max_depth)
        )
        channels.append(row)
    return sp.ArchSpec(tuple(depths), tuple(channels))


def _sample_satisfying(make, constraint_fn, budget):
    for _ in range(budget):
        arch = make()
        if constraint_fn is None or constraint_fn(arch):
            return arch
    raise InfeasibleConstraintError(
        f"no constraint-satisfying candidate found in {budget} attempts"
    )


def evolutionary_search(space, fitness_fn, n_pop=32, top_k=8, generations=20,
                        mutation_prob=0.1, seed=0, constraint_fn=None,
                        resample_budget=1000, log_fn=None):
    """Maximize fitness_fn over the space; returns a SearchResult.

    fitness_fn takes an ArchSpec and returns a float (higher is better);
    results are memoized on the canonical genotype. Deterministic per seed.
    """
    if n_pop % 2 != 0:
        raise ConfigError("population size must be even")
    if not 1 <= top_k <= n_pop:
        raise ConfigError("top_k must lie in [1, population size]")
    rng = np.random.default_rng(seed)

    cache = {}
    evaluations = 0

    def evaluate(arch):
        nonlocal evaluations
        assert constraint_fn is None or constraint_fn(arch), \
            "constraint-violating architecture reached evaluation"
        key = sp.canonical(space, arch)
        if key not in cache:
            cache[key] = float(fitness_fn(arch))
            evaluations += 1
        return cache[key]

    def fresh():
        return sp.sample_uniform(space, 1, rng)

    population = [_sample_satisfying(fresh, constraint_fn, resample_budget)
                  for _ in range(n_pop)]
    best_arch, best_fitness = None, -np.inf
    history = []
    for generation in range(generations + 1):
        scored = [(evaluate(arch), i, arch) for i, arch in enumerate(population)]
        scored.sort(key=lambda t: (-t[0], t[1]))
        if scored[0][0] > best_fitness:
            best_fitness, best_arch = scored[0][0], scored[0][2]
        entry = {
            "generation": generation,
            "best_fitness": best_fitness,
            "best_vector": sp.encode(space, best_arch).tolist(),
            "population_best": scored[0][0],
            "evaluations": evaluations,
        }
        history.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if generation == generations:
            break
        parents = [arch for _, _, arch in scored[:top_k]]
        offspring = []
        for _ in range(n_pop // 2):
            def mutant():
                parent = parents[rng.integers(0, len(parents))]
                return _mutate(space, parent, mutation_prob, rng)
            offspring.append(_sample_satisfying(mutant, constraint_fn, resample_budget))
        for _ in range(n_pop // 2):
            def child():
                i = rng.integers(0, len(parents))
                j = rng.integers(0, len(parents))
                return _crossover(space, parents[i], parents[j], rng)
            offspring.append(_sample_satisfying(child, constraint_fn, resample_budget))
        population = offspring
    return SearchResult(best_arch=sp.canonical(space, best_arch),
                        best_fitness=best_fitness, history=history,
                        evaluations=evaluations)

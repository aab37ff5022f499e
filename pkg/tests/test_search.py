"""Evolutionary search: correctness on enumerable spaces and constraint
handling."""

import numpy as np
import pytest

from pointvoxel import nas
from pointvoxel.errors import ConfigError, InfeasibleConstraintError


def tiny_space(choices=(4, 8, 12, 16), stages=2, max_depth=2):
    return nas.SearchSpace(
        stages=tuple(
            nas.StageSpec(max_depth=max_depth, channel_choices=choices, voxel_size=1 / 8)
            for _ in range(stages)
        ),
        kind="spvcnn", in_channels=3, num_classes=3, classifier_hidden=(8,))


def vector_fitness(space, target):
    def fitness(arch):
        return -float(np.sum((nas.encode(space, arch) - target) ** 2))
    return fitness


class TestSearchBasics:
    def test_single_arch_space_returns_it_immediately(self):
        space = nas.SearchSpace(
            stages=(nas.StageSpec(max_depth=1, channel_choices=(8,), voxel_size=1 / 8),),
            kind="spvcnn")
        result = nas.evolutionary_search(space, lambda a: 1.0, n_pop=4, top_k=2,
                                         generations=0, seed=0)
        assert result.best_arch == nas.max_arch(space)
        assert result.evaluations == 1  # memoized duplicates

    def test_population_size_must_be_even(self):
        with pytest.raises(ConfigError):
            nas.evolutionary_search(tiny_space(), lambda a: 0.0, n_pop=5, top_k=2)

    def test_best_fitness_non_decreasing(self):
        space = tiny_space()
        target = nas.encode(space, nas.max_arch(space))
        result = nas.evolutionary_search(space, vector_fitness(space, target),
                                         n_pop=8, top_k=4, generations=10, seed=1)
        best = [entry["best_fitness"] for entry in result.history]
        assert all(a <= b for a, b in zip(best, best[1:]))

    def test_finds_exhaustive_optimum(self):
        space = tiny_space()
        archs = list(nas.enumerate_archs(space))
        assert len(archs) <= 4096
        rng = np.random.default_rng(5)
        target = nas.encode(space, archs[rng.integers(len(archs))])
        fitness = vector_fitness(space, target)
        true_best = max(archs, key=fitness)
        result = nas.evolutionary_search(space, fitness, n_pop=32, top_k=8,
                                         generations=20, seed=3)
        assert fitness(result.best_arch) == fitness(true_best)

    def test_deterministic_per_seed(self):
        space = tiny_space()
        target = nas.encode(space, nas.min_arch(space))
        fitness = vector_fitness(space, target)
        a = nas.evolutionary_search(space, fitness, n_pop=8, top_k=4,
                                    generations=5, seed=9)
        b = nas.evolutionary_search(space, fitness, n_pop=8, top_k=4,
                                    generations=5, seed=9)
        assert a.best_arch == b.best_arch
        assert a.history == b.history


class TestConstraints:
    def test_all_individuals_satisfy_binding_constraint(self):
        space = tiny_space()
        estimator = _FakeEstimator(space)
        budget = 0.5 * estimator.estimate(nas.max_arch(space))
        constraint = nas.make_constraint_fn(
            nas.ResourceConstraint("macs", budget), macs_estimator=estimator)
        seen = []

        def fitness(arch):
            seen.append(arch)
            return float(np.sum(nas.encode(space, arch)))

        result = nas.evolutionary_search(space, fitness, n_pop=16, top_k=4,
                                         generations=8, seed=0,
                                         constraint_fn=constraint)
        assert seen, "search evaluated nothing"
        assert all(estimator.estimate(a) <= budget for a in seen)
        assert estimator.estimate(result.best_arch) <= budget

    def test_infeasible_budget_raises(self):
        space = tiny_space()
        estimator = _FakeEstimator(space)
        constraint = nas.make_constraint_fn(
            nas.ResourceConstraint("macs", 1e-9), macs_estimator=estimator)
        with pytest.raises(InfeasibleConstraintError):
            nas.evolutionary_search(space, lambda a: 0.0, n_pop=8, top_k=2,
                                    generations=2, seed=0, constraint_fn=constraint,
                                    resample_budget=50)

    def test_non_binding_constraint_returns_best(self):
        space = tiny_space()
        estimator = _FakeEstimator(space)
        constraint = nas.make_constraint_fn(
            nas.ResourceConstraint("macs", 1e18), macs_estimator=estimator)
        target = nas.encode(space, nas.max_arch(space))
        result = nas.evolutionary_search(space, vector_fitness(space, target),
                                         n_pop=16, top_k=4, generations=10, seed=2,
                                         constraint_fn=constraint)
        assert result.best_arch == nas.max_arch(space)


class _FakeEstimator:
    """Channel-sum cost model; monotone like the real MACs estimator."""

    def __init__(self, space):
        self.space = space

    def estimate(self, arch):
        total = 0.0
        for s in range(len(self.space.stages)):
            total += sum(c * c for c in arch.active_channels(s))
        return total

"""Multifactorial optimization loop over a unified population.

One population serves all K tasks of a family. Offspring are produced by
rmp-gated one-point crossover / uniform mutation or by DE-style mutation
and crossover, evaluated only on their skill-factor task, and survive by
one-to-one scalar-fitness comparison. Every G_tf generations the affine
transfer module reshapes the population across a task pair.

Determinism: every stochastic choice draws from a stream derived from
(master_seed, generation, index), so results are bitwise reproducible and
independent of how many evaluation workers run.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import transfer as transfer_mod
from .fitness import SENTINEL, ConstOptConfig, factorial_cost
from .genome import (Chromosome, EncodingSpec, build_encoding_space, decode,
                     legal_gene_values, random_chromosome, repair_genes,
                     to_infix, validate_chromosome)
from .pdefam import TaskSpec


@dataclass
class SolverConfig:
    """Evolution hyperparameters."""

    pop_size: int = 50
    rmp: float = 0.2
    mutation_prob: float = 0.002
    generations: int = 100
    max_evals: int = 5000
    transfer_interval: int = 10
    de_scale: float = 0.5
    master_seed: int = 0
    transfer_enabled: bool = True
    workers: int = 1

    def validate(self) -> None:
        if self.pop_size < 4 or self.pop_size % 2:
            raise ValueError("pop_size must be even and >= 4")
        if not 0.0 <= self.rmp <= 1.0:
            raise ValueError("rmp must lie in [0, 1]")
        if self.transfer_interval < 1:
            raise ValueError("transfer_interval must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class Individual:
    """Chromosome plus multifactorial bookkeeping."""

    genes: Chromosome
    costs: np.ndarray  # factorial cost per task; SENTINEL when unevaluated
    skill: int = 0
    fitness: float = 0.0
    trees: dict = field(default_factory=dict)  # task_id -> tuned ExprTree


@dataclass
class ArchiveEntry:
    task_id: int
    tree: object
    cost: float
    generation: int
    evals: int


@dataclass
class Archive:
    """Elitist per-task record of the best expression found so far."""

    entries: list
    evals_used: int = 0
    init_evals: int = 0
    generations_run: int = 0
    history: list = field(default_factory=list)  # per-generation best costs

    def update(self, task_id: int, cost: float, tree, generation: int) -> None:
        cur = self.entries[task_id]
        if cur is None or cost < cur.cost:
            self.entries[task_id] = ArchiveEntry(
                task_id, tree.copy(), float(cost), generation, self.evals_used
            )

    def snapshot(self) -> None:
        self.history.append(
            [e.cost if e is not None else SENTINEL for e in self.entries]
        )

    def best_cost(self, task_id: int) -> float:
        e = self.entries[task_id]
        return e.cost if e is not None else SENTINEL

    def best_expression(self, task_id: int) -> str:
        e = self.entries[task_id]
        return to_infix(e.tree) if e is not None else ""


def _stream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed,) + key))


def compute_ranks(costs: np.ndarray) -> np.ndarray:
    """Factorial ranks: per task, 1-based ascending-cost positions.

    Ties (including sentinel-valued unevaluated entries) break toward the
    lower individual index via the stable sort.
    """
    k, n = costs.shape
    ranks = np.empty((k, n), dtype=np.int64)
    positions = np.arange(1, n + 1)
    for j in range(k):
        order = np.argsort(costs[j], kind="stable")
        ranks[j, order] = positions
    return ranks


def assign_scalar_metrics(population: Sequence[Individual]) -> np.ndarray:
    """Recompute skill factor and scalar fitness from the cost matrix."""
    costs = np.stack([ind.costs for ind in population], axis=1)
    ranks = compute_ranks(costs)
    best_rank = ranks.min(axis=0)
    best_task = ranks.argmin(axis=0)  # first (lowest task index) on ties
    for i, ind in enumerate(population):
        ind.skill = int(best_task[i])
        ind.fitness = 1.0 / float(best_rank[i])
    return ranks


def one_to_one_select(parent: Individual, offspring: Individual,
                      redundant: bool) -> Individual:
    """Offspring replaces the parent only on strictly better scalar fitness,
    or when the parent is a redundant duplicate."""
    if offspring.fitness > parent.fitness or redundant:
        return offspring
    return parent


def _redundant_mask(population: Sequence[Individual]) -> list[bool]:
    seen: set[bytes] = set()
    flags = []
    for ind in population:
        key = ind.genes.tobytes()
        flags.append(key in seen)
        seen.add(key)
    return flags


def reproduce(parent_index: int, population: Sequence[Individual],
              cfg: SolverConfig, rng: np.random.Generator,
              spec: EncodingSpec) -> Individual:
    """One offspring via the rmp-gated GA or DE branch (unevaluated)."""
    n = len(population)
    parent = population[parent_index]
    n_tasks = parent.costs.shape[0]
    if rng.random() < cfg.rmp:
        # one-point crossover with a random mate, then uniform mutation
        r1 = int(rng.integers(n - 1))
        if r1 >= parent_index:
            r1 += 1
        mate = population[r1]
        cut = int(rng.integers(1, spec.genome_len))
        genes = np.concatenate([parent.genes[:cut], mate.genes[cut:]])
        mask = rng.random(spec.genome_len) < cfg.mutation_prob
        for pos in np.nonzero(mask)[0]:
            legal = legal_gene_values(spec, int(pos))
            genes[pos] = legal[rng.integers(len(legal))]
        skill = parent.skill if rng.random() < 0.5 else mate.skill
    else:
        # DE/best/1 with binomial crossover on the integer genes
        best = max(range(n), key=lambda i: (population[i].fitness, -i))
        r1 = parent_index
        while r1 == parent_index:
            r1 = int(rng.integers(n))
        r2 = parent_index
        while r2 == parent_index or r2 == r1:
            r2 = int(rng.integers(n))
        mutant = (population[best].genes.astype(float)
                  + cfg.de_scale * (population[r1].genes - population[r2].genes))
        cross = rng.random(spec.genome_len) < 0.5
        cross[int(rng.integers(spec.genome_len))] = True
        raw = np.where(cross, mutant, parent.genes.astype(float))
        genes = repair_genes(raw, spec)
        skill = parent.skill
    return Individual(genes, np.full(n_tasks, SENTINEL), skill=skill)


class _Evaluator:
    """Factorial-cost evaluation bound to the task data; counts every call."""

    def __init__(self, tasks: Sequence[TaskSpec], spec: EncodingSpec,
                 const_cfg: ConstOptConfig, lambda_phys: float):
        for task in tasks:
            if task.dataset is None or task.conditions is None:
                raise ValueError(
                    f"task {task.task_id} needs an attached dataset and conditions"
                )
        self.tasks = tasks
        self.spec = spec
        self.const_cfg = const_cfg
        self.lambda_phys = lambda_phys
        self.count = 0
        self._lock = threading.Lock()

    def __call__(self, individual: Individual, task_id: int) -> float:
        task = self.tasks[task_id]
        tree = individual.trees.get(task_id)
        if tree is None:
            tree = decode(individual.genes, self.spec, task)
        breakdown, tuned = factorial_cost(
            tree, task, task.dataset, task.conditions, self.const_cfg, self.lambda_phys
        )
        individual.trees[task_id] = tuned
        individual.costs[task_id] = breakdown.total
        with self._lock:
            self.count += 1
        return breakdown.total


def initialize(tasks: Sequence[TaskSpec], spec: EncodingSpec, cfg: SolverConfig,
               rng: np.random.Generator, evaluate: Callable[[Individual, int], float],
               seed_individuals: Sequence[Individual] = ()) -> list[Individual]:
    """Random population evaluated on every task, with metrics assigned.

    ``seed_individuals`` replace the first slots; their cached trees warm
    the constant optimizer.
    """
    n_tasks = len(tasks)
    population: list[Individual] = []
    for seed_ind in seed_individuals[: cfg.pop_size]:
        validate_chromosome(seed_ind.genes, spec)
        population.append(
            Individual(seed_ind.genes.copy(), np.full(n_tasks, SENTINEL),
                       trees=dict(seed_ind.trees))
        )
    while len(population) < cfg.pop_size:
        population.append(
            Individual(random_chromosome(spec, rng), np.full(n_tasks, SENTINEL))
        )
    for ind in population:
        for task_id in range(n_tasks):
            evaluate(ind, task_id)
    assign_scalar_metrics(population)
    return population


def _eval_map(evaluate, jobs, workers: int):
    """Run (individual, task) evaluations, optionally on a thread pool.

    Results are applied in index order by the caller, so the outcome is
    identical for any worker count.
    """
    if workers <= 1 or len(jobs) <= 1:
        for ind, task_id in jobs:
            evaluate(ind, task_id)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda job: evaluate(*job), jobs))


def evolve(tasks: Sequence[TaskSpec], cfg: SolverConfig,
           encoding: EncodingSpec | None = None,
           const_cfg: ConstOptConfig | None = None,
           lambda_phys: float = 0.1,
           head_len: int = 10, num_adfs: int = 1, num_adf_args: int = 2,
           seed_individuals: Sequence[Individual] = (),
           log: Callable[[str], None] | None = print) -> Archive:
    """Run the full multitask loop and return the per-task archive.

    Stops at ``generations`` or when the evaluation budget would be
    exceeded, whichever comes first. Transfer re-evaluations count against
    the same budget.
    """
    cfg.validate()
    n_tasks = len(tasks)
    spec = encoding or build_encoding_space(tasks, head_len, num_adfs, num_adf_args)
    evaluator = _Evaluator(tasks, spec, const_cfg or ConstOptConfig(), lambda_phys)
    archive = Archive(entries=[None] * n_tasks)

    population = initialize(
        tasks, spec, cfg, _stream(cfg.master_seed, 0), evaluator, seed_individuals
    )
    archive.init_evals = evaluator.count
    for ind in population:
        for task_id in range(n_tasks):
            if ind.costs[task_id] < SENTINEL:
                archive.update(task_id, ind.costs[task_id], ind.trees[task_id], 0)
    archive.snapshot()

    nets: dict[int, transfer_mod.TransferNet] = {}
    workers = cfg.workers

    generation = 0
    while generation < cfg.generations:
        used = evaluator.count - archive.init_evals
        if used + cfg.pop_size > cfg.max_evals:
            break
        generation += 1

        offspring = [
            reproduce(i, population, cfg, _stream(cfg.master_seed, 1, generation, i), spec)
            for i in range(cfg.pop_size)
        ]
        _eval_map(evaluator, [(off, off.skill) for off in offspring], workers)
        archive.evals_used = evaluator.count - archive.init_evals
        for off in offspring:
            if off.costs[off.skill] < SENTINEL:
                archive.update(off.skill, off.costs[off.skill], off.trees[off.skill],
                               generation)

        pool = list(population) + offspring
        assign_scalar_metrics(pool)
        redundant = _redundant_mask(population)
        population = [
            one_to_one_select(pool[i], pool[cfg.pop_size + i], redundant[i])
            for i in range(cfg.pop_size)
        ]
        assign_scalar_metrics(population)

        if (cfg.transfer_enabled and n_tasks >= 2
                and generation % cfg.transfer_interval == 0):
            used = evaluator.count - archive.init_evals
            if used + cfg.pop_size <= cfg.max_evals:
                population, report = transfer_mod.transfer_event(
                    population, tasks, nets, spec, cfg,
                    _stream(cfg.master_seed, 2, generation), evaluator,
                )
                archive.evals_used = evaluator.count - archive.init_evals
                for ind in report.evaluated:
                    if ind.costs[ind.skill] < SENTINEL:
                        archive.update(ind.skill, ind.costs[ind.skill],
                                       ind.trees[ind.skill], generation)
                assign_scalar_metrics(population)
                if log is not None:
                    log(report.as_line(generation))

        archive.evals_used = evaluator.count - archive.init_evals
        archive.generations_run = generation
        archive.snapshot()
        if log is not None:
            best = "\t".join(f"{archive.best_cost(t):.6g}" for t in range(n_tasks))
            log(f"gen\t{generation}\tevals\t{archive.evals_used}\t{best}")

    archive.evals_used = evaluator.count - archive.init_evals
    return archive

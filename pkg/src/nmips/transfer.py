"""Affine-transformation knowledge transfer between task groups.

A small feed-forward regressor per task maps its group's gene statistics
(mean, variance) to scale and shift vectors. Standardized genomes of the
top half of one group are projected toward the other group, repaired back
to legal integers, evaluated on the opposite task and merged into a fresh
top-N reselection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fitness import SENTINEL
from .genome import EncodingSpec, repair_genes

EPS_STAB = 1e-8


@dataclass(frozen=True)
class GroupStats:
    mean: np.ndarray
    var: np.ndarray  # population variance (ddof=0)
    group_size: int


def group_stats(genes: np.ndarray | Sequence) -> GroupStats:
    """Elementwise mean and population variance of a group's gene vectors."""
    if hasattr(genes[0], "genes"):
        genes = [ind.genes for ind in genes]
    mat = np.asarray(genes, dtype=float)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ValueError("group must be a non-empty set of gene vectors")
    return GroupStats(mat.mean(axis=0), mat.var(axis=0), mat.shape[0])


class TransferNet:
    """One-hidden-layer tanh regressor producing (gamma, beta) from stats.

    Persistent per task and warm-started across transfer events.
    """

    def __init__(self, dim: int, hidden: int = 32, learning_rate: float = 0.01,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.learning_rate = learning_rate
        self.w1 = rng.normal(0.0, 0.1, size=(hidden, 2 * dim))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, 0.1, size=(2 * dim, hidden))
        self.b2 = np.zeros(2 * dim)

    @classmethod
    def zeros(cls, dim: int, hidden: int = 32) -> "TransferNet":
        net = cls(dim, hidden)
        net.w1[:] = 0.0
        net.w2[:] = 0.0
        return net

    def forward(self, stats_input: np.ndarray):
        hidden = np.tanh(self.w1 @ stats_input + self.b1)
        out = self.w2 @ hidden + self.b2
        return out[: self.dim], out[self.dim:], hidden

    def parameters(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def affine_params(stats: GroupStats, net: TransferNet) -> tuple[np.ndarray, np.ndarray]:
    """(gamma, beta) vectors produced by the net from the group statistics."""
    if stats.mean.shape[0] != net.dim:
        raise ValueError(f"stats dimension {stats.mean.shape[0]} != net dim {net.dim}")
    gamma, beta, _ = net.forward(np.concatenate([stats.mean, stats.var]))
    return gamma, beta


def apply_affine(genes, stats: GroupStats, gamma: np.ndarray, beta: np.ndarray,
                 eps_stab: float = EPS_STAB) -> np.ndarray:
    """Standardize against the group and apply the learned scale and shift.

    Accepts a single gene vector or a (m, d) batch; returns raw reals
    (repair happens separately).
    """
    z = np.asarray(getattr(genes, "genes", genes), dtype=float)
    std = np.sqrt(stats.var + eps_stab)
    return (1.0 + gamma) * (z - stats.mean) / std + beta


def _alignment_forward(net: TransferNet, stats_input: np.ndarray,
                       standardized: np.ndarray, targets: np.ndarray):
    gamma, beta, hidden = net.forward(stats_input)
    transformed = (1.0 + gamma) * standardized + beta
    residual = transformed - targets
    loss = float(np.mean(np.sum(residual ** 2, axis=1)))
    return loss, residual, hidden


def train_alignment(net: TransferNet, source_genes: np.ndarray,
                    target_genes: np.ndarray, epochs: int = 100,
                    eps_stab: float = EPS_STAB,
                    stats: GroupStats | None = None) -> tuple[float, float]:
    """Gradient descent on the rank-matched alignment loss.

    Source and target rows must already be sorted best-first; a shorter side
    is padded by cycling its best rows. Steps that would increase the loss
    are halved away, so the accepted-loss sequence is non-increasing.
    Returns (loss before, loss after).
    """
    src = np.asarray(source_genes, dtype=float)
    tgt = np.asarray(target_genes, dtype=float)
    if src.size == 0 or tgt.size == 0:
        raise ValueError("alignment groups must be non-empty")
    m = max(src.shape[0], tgt.shape[0])
    src = src[np.arange(m) % src.shape[0]]
    tgt = tgt[np.arange(m) % tgt.shape[0]]
    stats = stats if stats is not None else group_stats(src)
    stats_input = np.concatenate([stats.mean, stats.var])
    standardized = (src - stats.mean) / np.sqrt(stats.var + eps_stab)

    loss, residual, hidden = _alignment_forward(net, stats_input, standardized, tgt)
    initial = loss
    step = net.learning_rate
    for _ in range(epochs):
        # dL/dgamma_j = (2/m) sum_i r_ij zhat_ij ; dL/dbeta_j = (2/m) sum_i r_ij
        d_gamma = 2.0 * np.mean(residual * standardized, axis=0)
        d_beta = 2.0 * np.mean(residual, axis=0)
        d_out = np.concatenate([d_gamma, d_beta])
        d_w2 = np.outer(d_out, hidden)
        d_b2 = d_out
        d_hidden = net.w2.T @ d_out
        d_pre = (1.0 - hidden ** 2) * d_hidden
        d_w1 = np.outer(d_pre, stats_input)
        d_b1 = d_pre

        saved = [p.copy() for p in net.parameters()]
        accepted = False
        while step > 1e-16:
            net.w1[:] = saved[0] - step * d_w1
            net.b1[:] = saved[1] - step * d_b1
            net.w2[:] = saved[2] - step * d_w2
            net.b2[:] = saved[3] - step * d_b2
            new_loss, new_res, new_hidden = _alignment_forward(
                net, stats_input, standardized, tgt
            )
            if new_loss <= loss:
                loss, residual, hidden = new_loss, new_res, new_hidden
                accepted = True
                step = min(step * 1.5, 100 * net.learning_rate)
                break
            step *= 0.5
        if not accepted:
            net.w1[:], net.b1[:], net.w2[:], net.b2[:] = saved
            break
    return initial, loss


@dataclass
class TransferReport:
    """Observability record of one transfer event."""

    source_task: int = -1
    target_task: int = -1
    loss_before: tuple[float, float] = (0.0, 0.0)
    loss_after: tuple[float, float] = (0.0, 0.0)
    admitted: int = 0
    skipped: bool = False
    evaluated: list = field(default_factory=list)

    def as_line(self, generation: int) -> str:
        if self.skipped:
            return f"transfer\t{generation}\tskipped"
        return (
            f"transfer\t{generation}\tpair\t{self.source_task},{self.target_task}"
            f"\talign\t{self.loss_before[0]:.6g}->{self.loss_after[0]:.6g}"
            f"\t{self.loss_before[1]:.6g}->{self.loss_after[1]:.6g}"
            f"\tadmitted\t{self.admitted}"
        )


def _sorted_by_fitness(group: list) -> list:
    return sorted(group, key=lambda pair: (-pair[1].fitness, pair[0]))


def transfer_event(population: list, tasks: Sequence, nets: dict,
                   spec: EncodingSpec, cfg, rng: np.random.Generator,
                   evaluate: Callable, epochs: int = 100) -> tuple[list, TransferReport]:
    """One bidirectional affine transfer across a random task pair.

    Top pop_size/2 individuals of each group are transformed toward the
    other, repaired, evaluated on their new task, merged with the sources
    and with individuals of uninvolved tasks, and the best pop_size by
    recomputed scalar fitness become the next population.
    """
    from .engine import Individual, assign_scalar_metrics  # cycle-free at runtime

    n = cfg.pop_size
    n_tasks = len(tasks)
    groups: dict[int, list] = {}
    for idx, ind in enumerate(population):
        groups.setdefault(ind.skill, []).append((idx, ind))
    occupied = sorted(tid for tid, members in groups.items() if members)
    if len(occupied) < 2:
        return population, TransferReport(skipped=True)

    pairs = [(a, b) for i, a in enumerate(occupied) for b in occupied[i + 1:]]
    t1, t2 = pairs[int(rng.integers(len(pairs)))]

    top1 = [ind for _, ind in _sorted_by_fitness(groups[t1])][: n // 2]
    top2 = [ind for _, ind in _sorted_by_fitness(groups[t2])][: n // 2]
    genes1 = np.asarray([ind.genes for ind in top1], dtype=float)
    genes2 = np.asarray([ind.genes for ind in top2], dtype=float)
    stats1, stats2 = group_stats(genes1), group_stats(genes2)

    for tid in (t1, t2):
        if tid not in nets:
            nets[tid] = TransferNet(
                spec.genome_len,
                rng=np.random.default_rng(np.random.SeedSequence((cfg.master_seed, 3, tid))),
            )
    before1, after1 = train_alignment(nets[t1], genes1, genes2, epochs, stats=stats1)
    before2, after2 = train_alignment(nets[t2], genes2, genes1, epochs, stats=stats2)

    def transform(sources, stats, net, new_task):
        gamma, beta = affine_params(stats, net)
        raw = apply_affine(np.asarray([s.genes for s in sources], float), stats, gamma, beta)
        out = []
        for row in raw:
            genes = repair_genes(row, spec)
            ind = Individual(genes, np.full(n_tasks, SENTINEL), skill=new_task)
            evaluate(ind, new_task)
            out.append(ind)
        return out

    moved1 = transform(top1, stats1, nets[t1], t2)
    moved2 = transform(top2, stats2, nets[t2], t1)

    others = [ind for ind in population if ind.skill not in (t1, t2)]
    pool = top1 + top2 + moved1 + moved2 + others
    assign_scalar_metrics(pool)
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].fitness, i))
    survivors = [pool[i] for i in order[:n]]
    moved_ids = {id(ind) for ind in moved1 + moved2}
    admitted = sum(1 for ind in survivors if id(ind) in moved_ids)
    report = TransferReport(
        source_task=t1, target_task=t2,
        loss_before=(before1, before2), loss_after=(after1, after2),
        admitted=admitted, evaluated=moved1 + moved2,
    )
    return survivors, report

"""Factorial cost of a candidate expression on one task.

The cost combines the data-fitting RMSE with physics penalties (PDE
residual, initial and boundary mismatches), after the expression's
constants have been tuned by gradient descent on the same objective.
Candidates whose evaluation produces any non-finite value are poisoned and
receive the worst-cost sentinel so ranking stays total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import exprcalc
from .datagen import Dataset, eval_grid
from .genome import ExprTree
from .pdefam import ConditionSet, TaskSpec, residual_tree

#: worst-case cost assigned to poisoned candidates
SENTINEL = 1e30

_TINY = 1e-300


@dataclass(frozen=True)
class ConstOptConfig:
    """Gradient-descent settings for constant tuning.

    The divergence guard rejects any step that increases the combined loss;
    a rejected step is retried at half length, so the working step adapts
    around the configured learning rate.
    """

    max_steps: int = 50
    learning_rate: float = 0.05
    include_physics_terms: bool = True

    def __post_init__(self):
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    data_loss: float
    residual_loss: float
    ic_loss: float
    bc_loss: float
    total: float

    @property
    def poisoned(self) -> bool:
        return self.total >= SENTINEL


def _rmse(residuals: np.ndarray) -> float:
    if residuals.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(residuals ** 2)))


def data_loss(u: ExprTree, data: Dataset, constants=None) -> float:
    """RMSE of the candidate against the dataset records."""
    if data.n == 0:
        raise ValueError("dataset is empty")
    xt = exprcalc.coord_matrix(u, data.X, data.var_names)
    vals = exprcalc.run_values(u, xt, constants)
    if exprcalc.is_invalid(vals):
        return SENTINEL
    return _rmse(vals - data.u)


def physics_loss(u: ExprTree, task: TaskSpec, cond: ConditionSet,
                 constants=None) -> tuple[float, float, float]:
    """(residual, IC, BC) RMSE penalties over the collocation sets."""
    names = task.variables
    poisoned = (SENTINEL, SENTINEL, SENTINEL)
    res = 0.0
    if cond.n_interior:
        rt = residual_tree(task, u)
        r = exprcalc.run_values(rt, exprcalc.coord_matrix(rt, cond.interior, names), constants)
        if exprcalc.is_invalid(r):
            return poisoned
        res = _rmse(r)
    ic = 0.0
    if cond.n_ic:
        vals = exprcalc.run_values(u, exprcalc.coord_matrix(u, cond.ic_points, names), constants)
        if exprcalc.is_invalid(vals):
            return poisoned
        ic = _rmse(vals - cond.ic_values)
    bc = 0.0
    if cond.n_bc:
        lo = exprcalc.run_values(u, exprcalc.coord_matrix(u, cond.bc_lo, names), constants)
        hi = exprcalc.run_values(u, exprcalc.coord_matrix(u, cond.bc_hi, names), constants)
        if exprcalc.is_invalid(lo) or exprcalc.is_invalid(hi):
            return poisoned
        bc = _rmse(lo - hi)
    return res, ic, bc


def _breakdown(u: ExprTree, task: TaskSpec, data: Dataset, cond: ConditionSet,
               lambda_phys: float) -> LossBreakdown:
    d = data_loss(u, data)
    if d >= SENTINEL:
        return LossBreakdown(SENTINEL, SENTINEL, SENTINEL, SENTINEL, SENTINEL)
    res, ic, bc = physics_loss(u, task, cond)
    if res >= SENTINEL:
        return LossBreakdown(SENTINEL, SENTINEL, SENTINEL, SENTINEL, SENTINEL)
    return LossBreakdown(d, res, ic, bc, d + lambda_phys * (res + ic + bc))


class _Objective:
    """Combined loss and its constant gradient with pre-built coordinate
    matrices, reused across every optimizer step."""

    def __init__(self, u: ExprTree, task: TaskSpec, data: Dataset,
                 cond: ConditionSet, lambda_phys: float, include_physics: bool):
        names = task.variables
        self.u = u
        self.lam = lambda_phys
        self.truth = data.u
        self.xd = exprcalc.coord_matrix(u, data.X, data.var_names)
        self.res_tree = None
        self.x_int = self.x_ic = self.x_lo = self.x_hi = None
        self.ic_values = cond.ic_values
        if include_physics:
            if cond.n_interior:
                self.res_tree = residual_tree(task, u)
                self.x_int = exprcalc.coord_matrix(self.res_tree, cond.interior, names)
            if cond.n_ic:
                self.x_ic = exprcalc.coord_matrix(u, cond.ic_points, names)
            if cond.n_bc:
                self.x_lo = exprcalc.coord_matrix(u, cond.bc_lo, names)
                self.x_hi = exprcalc.coord_matrix(u, cond.bc_hi, names)

    @staticmethod
    def _rmse_grad(residuals: np.ndarray, dvals: np.ndarray):
        n = residuals.size
        loss = float(np.sqrt(np.mean(residuals ** 2)))
        grad = dvals @ residuals / (n * max(loss, _TINY))
        return loss, grad

    def loss(self, c: np.ndarray) -> float:
        vals = exprcalc.run_values(self.u, self.xd, c)
        if exprcalc.is_invalid(vals):
            return SENTINEL
        total = _rmse(vals - self.truth)
        if self.res_tree is not None:
            r = exprcalc.run_values(self.res_tree, self.x_int, c)
            if exprcalc.is_invalid(r):
                return SENTINEL
            total += self.lam * _rmse(r)
        if self.x_ic is not None:
            v = exprcalc.run_values(self.u, self.x_ic, c)
            if exprcalc.is_invalid(v):
                return SENTINEL
            total += self.lam * _rmse(v - self.ic_values)
        if self.x_lo is not None:
            lo = exprcalc.run_values(self.u, self.x_lo, c)
            hi = exprcalc.run_values(self.u, self.x_hi, c)
            if exprcalc.is_invalid(lo) or exprcalc.is_invalid(hi):
                return SENTINEL
            total += self.lam * _rmse(lo - hi)
        return total

    def loss_and_grad(self, c: np.ndarray):
        k = c.size
        zero = np.zeros(k)
        vals, dvals = exprcalc.run_duals(self.u, self.xd, c)
        if exprcalc.is_invalid(vals) or exprcalc.is_invalid(dvals):
            return SENTINEL, zero
        total, grad = self._rmse_grad(vals - self.truth, dvals)
        if self.res_tree is not None:
            r, dr = exprcalc.run_duals(self.res_tree, self.x_int, c)
            if exprcalc.is_invalid(r) or exprcalc.is_invalid(dr):
                return SENTINEL, zero
            l, g = self._rmse_grad(r, dr)
            total += self.lam * l
            grad = grad + self.lam * g
        if self.x_ic is not None:
            v, dv = exprcalc.run_duals(self.u, self.x_ic, c)
            if exprcalc.is_invalid(v) or exprcalc.is_invalid(dv):
                return SENTINEL, zero
            l, g = self._rmse_grad(v - self.ic_values, dv)
            total += self.lam * l
            grad = grad + self.lam * g
        if self.x_lo is not None:
            vlo, dlo = exprcalc.run_duals(self.u, self.x_lo, c)
            vhi, dhi = exprcalc.run_duals(self.u, self.x_hi, c)
            if (exprcalc.is_invalid(vlo) or exprcalc.is_invalid(dlo)
                    or exprcalc.is_invalid(vhi) or exprcalc.is_invalid(dhi)):
                return SENTINEL, zero
            l, g = self._rmse_grad(vlo - vhi, dlo - dhi)
            total += self.lam * l
            grad = grad + self.lam * g
        return total, grad


def optimize_constants(u: ExprTree, task: TaskSpec, data: Dataset,
                       cond: ConditionSet, cfg: ConstOptConfig = ConstOptConfig(),
                       lambda_phys: float = 0.1) -> ExprTree:
    """Tune the expression's constants by guarded gradient descent.

    The tree structure is unchanged; constants are updated in place so every
    derivative view sees the tuned values. The combined loss never
    increases; steps that would increase it are halved until they improve
    or become negligible.
    """
    if not u.constants or cfg.max_steps == 0:
        return u
    obj = _Objective(u, task, data, cond, lambda_phys, cfg.include_physics_terms)
    c = np.asarray(u.constants, dtype=float)
    loss, grad = obj.loss_and_grad(c)
    if loss >= SENTINEL:
        return u
    step = cfg.learning_rate
    for _ in range(cfg.max_steps):
        gmax = float(np.max(np.abs(grad)))
        if gmax == 0.0 or not np.isfinite(gmax) or loss <= 1e-14:
            break
        improvement = 0.0
        accepted = False
        while step > 1e-14:
            trial = c - step * grad
            trial_loss = obj.loss(trial)
            if trial_loss <= loss:
                improvement = loss - trial_loss
                c, loss = trial, trial_loss
                accepted = True
                step = min(step * 2.0, 1e3 * cfg.learning_rate)
                break
            step *= 0.5
        if not accepted or improvement < 1e-12 * max(1.0, loss):
            break
        loss, grad = obj.loss_and_grad(c)
        if loss >= SENTINEL:
            break
    u.constants[:] = [float(v) for v in c]
    return u


def factorial_cost(u: ExprTree, task: TaskSpec, data: Dataset, cond: ConditionSet,
                   cfg: ConstOptConfig = ConstOptConfig(),
                   lambda_phys: float = 0.1) -> tuple[LossBreakdown, ExprTree]:
    """Constant-optimized combined loss; the tuned tree is returned with it."""
    tuned = optimize_constants(u, task, data, cond, cfg, lambda_phys)
    return _breakdown(tuned, task, data, cond, lambda_phys), tuned


def test_mse(u: ExprTree, task: TaskSpec, grid: tuple[np.ndarray, np.ndarray] | None = None,
             spatial_nodes: int | None = None, time_nodes: int | None = None) -> float:
    """MSE of the candidate against the dense held-out solution grid."""
    if grid is None:
        grid = eval_grid(task, spatial_nodes, time_nodes)
    X, truth = grid
    xt = exprcalc.coord_matrix(u, X, task.variables)
    vals = exprcalc.run_values(u, xt, None)
    if exprcalc.is_invalid(vals):
        return SENTINEL
    return float(np.mean((vals - truth) ** 2))

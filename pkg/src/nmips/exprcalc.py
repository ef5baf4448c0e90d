"""Evaluation and exact differentiation of expression trees.

Trees compile once into a flat register program executed by numba kernels,
so evaluating a candidate over thousands of points costs a single call.
Derivatives are built symbolically (the derivative of a tree is another
tree), which keeps residual evaluation reusable across collocation sets;
constant gradients use forward-mode duals inside the same kernel family.

Domain violations (log of a non-positive value, overflow) never raise: they
propagate as non-finite entries that callers treat as an invalid-value
marker via :func:`is_invalid`.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numba
import numpy as np

from .genome import FUNCTION_ARITY, ExprTree, Node, fn, lit

OP_LIT, OP_CONST, OP_VAR, OP_ADD, OP_SUB, OP_MUL, OP_DIV = range(7)
OP_SIN, OP_COS, OP_EXP, OP_LOG, OP_POW = range(7, 12)

_OPCODES = {
    "add": OP_ADD,
    "sub": OP_SUB,
    "mul": OP_MUL,
    "div": OP_DIV,
    "sin": OP_SIN,
    "cos": OP_COS,
    "exp": OP_EXP,
    "log": OP_LOG,
    "pow": OP_POW,
}

INVALID = math.nan  # marker for a poisoned evaluation


def is_invalid(value) -> bool:
    """True when an evaluation produced the invalid-value marker."""
    return not np.all(np.isfinite(value))


class Program:
    """Flat postorder register program for one tree."""

    __slots__ = ("ops", "lits", "n_vars")

    def __init__(self, ops: np.ndarray, lits: np.ndarray, n_vars: int):
        self.ops = ops
        self.lits = lits
        self.n_vars = n_vars


def compile_tree(tree: ExprTree) -> Program:
    """Compile (and cache) the register program of a tree."""
    prog = tree._cache.get("program")
    if prog is not None:
        return prog
    ops: list[tuple[int, int, int]] = []
    lits: list[float] = []
    var_index = {name: i for i, name in enumerate(tree.var_names)}

    def emit(node: Node) -> int:
        if node.op == "lit":
            lits.append(float(node.val))
            ops.append((OP_LIT, len(lits) - 1, 0))
        elif node.op == "const":
            ops.append((OP_CONST, node.val, 0))
        elif node.op == "var":
            ops.append((OP_VAR, var_index[node.val], 0))
        else:
            code = _OPCODES[node.op]
            a = emit(node.args[0])
            b = emit(node.args[1]) if len(node.args) == 2 else 0
            ops.append((code, a, b))
        return len(ops) - 1

    emit(tree.root)
    prog = Program(
        np.asarray(ops, dtype=np.int64).reshape(-1, 3),
        np.asarray(lits, dtype=np.float64),
        len(tree.var_names),
    )
    tree._cache["program"] = prog
    return prog


@numba.njit(cache=True)
def _run_values(ops, lits, consts, xt):  # pragma: no cover - jitted
    n_ops = ops.shape[0]
    n_pts = xt.shape[1]
    regs = np.empty((n_ops, n_pts))
    for i in range(n_ops):
        code, a, b = ops[i, 0], ops[i, 1], ops[i, 2]
        if code == OP_LIT:
            regs[i] = lits[a]
        elif code == OP_CONST:
            regs[i] = consts[a]
        elif code == OP_VAR:
            regs[i] = xt[a]
        elif code == OP_ADD:
            regs[i] = regs[a] + regs[b]
        elif code == OP_SUB:
            regs[i] = regs[a] - regs[b]
        elif code == OP_MUL:
            regs[i] = regs[a] * regs[b]
        elif code == OP_DIV:
            regs[i] = regs[a] / regs[b]
        elif code == OP_SIN:
            regs[i] = np.sin(regs[a])
        elif code == OP_COS:
            regs[i] = np.cos(regs[a])
        elif code == OP_EXP:
            regs[i] = np.exp(regs[a])
        elif code == OP_LOG:
            regs[i] = np.log(regs[a])
        else:
            regs[i] = regs[a] ** regs[b]
    return regs[n_ops - 1].copy()


@numba.njit(cache=True)
def _run_duals(ops, lits, consts, xt, n_duals):  # pragma: no cover - jitted
    n_ops = ops.shape[0]
    n_pts = xt.shape[1]
    regs = np.empty((n_ops, n_pts))
    dregs = np.zeros((n_ops, n_duals, n_pts))
    for i in range(n_ops):
        code, a, b = ops[i, 0], ops[i, 1], ops[i, 2]
        if code == OP_LIT:
            regs[i] = lits[a]
        elif code == OP_CONST:
            regs[i] = consts[a]
            dregs[i, a] = 1.0
        elif code == OP_VAR:
            regs[i] = xt[a]
        elif code == OP_ADD:
            regs[i] = regs[a] + regs[b]
            for j in range(n_duals):
                dregs[i, j] = dregs[a, j] + dregs[b, j]
        elif code == OP_SUB:
            regs[i] = regs[a] - regs[b]
            for j in range(n_duals):
                dregs[i, j] = dregs[a, j] - dregs[b, j]
        elif code == OP_MUL:
            regs[i] = regs[a] * regs[b]
            for j in range(n_duals):
                dregs[i, j] = dregs[a, j] * regs[b] + regs[a] * dregs[b, j]
        elif code == OP_DIV:
            inv = 1.0 / regs[b]
            regs[i] = regs[a] * inv
            for j in range(n_duals):
                dregs[i, j] = (dregs[a, j] - regs[i] * dregs[b, j]) * inv
        elif code == OP_SIN:
            regs[i] = np.sin(regs[a])
            cs = np.cos(regs[a])
            for j in range(n_duals):
                dregs[i, j] = cs * dregs[a, j]
        elif code == OP_COS:
            regs[i] = np.cos(regs[a])
            sn = -np.sin(regs[a])
            for j in range(n_duals):
                dregs[i, j] = sn * dregs[a, j]
        elif code == OP_EXP:
            regs[i] = np.exp(regs[a])
            for j in range(n_duals):
                dregs[i, j] = regs[i] * dregs[a, j]
        elif code == OP_LOG:
            inv = 1.0 / regs[a]
            regs[i] = np.log(regs[a])
            for j in range(n_duals):
                dregs[i, j] = inv * dregs[a, j]
        else:  # pow
            regs[i] = regs[a] ** regs[b]
            for j in range(n_duals):
                for p in range(n_pts):
                    base, ex = regs[a, p], regs[b, p]
                    da, db = dregs[a, j, p], dregs[b, j, p]
                    term = ex * base ** (ex - 1.0) * da
                    if db != 0.0:
                        term += np.log(base) * regs[i, p] * db
                    dregs[i, j, p] = term
    return regs[n_ops - 1].copy(), dregs[n_ops - 1].copy()


def _as_matrix(tree: ExprTree, points) -> np.ndarray:
    """Coordinates -> (n_vars, N) float matrix following tree.var_names."""
    if isinstance(points, Mapping):
        if tree.var_names:
            cols = [np.asarray(points[name], dtype=float).ravel() for name in tree.var_names]
            return np.ascontiguousarray(np.stack(cols))
        any_col = next(iter(points.values())) if points else np.zeros(1)
        return np.zeros((0, np.asarray(any_col).size))
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, max(len(tree.var_names), 1))
    if x.shape[1] != len(tree.var_names):
        raise ValueError(
            f"point matrix has {x.shape[1]} columns, tree uses {len(tree.var_names)} variables"
        )
    return np.ascontiguousarray(x.T)


def coord_matrix(tree: ExprTree, X: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """(N, len(names)) coordinates -> kernel layout for a tree using a
    subset of the named columns."""
    X = np.asarray(X, dtype=float)
    names = tuple(names)
    if names == tree.var_names:
        return np.ascontiguousarray(X.T)
    index = {n: i for i, n in enumerate(names)}
    try:
        cols = [index[v] for v in tree.var_names]
    except KeyError as exc:
        raise ValueError(f"coordinates are missing variable {exc}") from None
    if not cols:
        return np.zeros((0, X.shape[0]))
    return np.ascontiguousarray(X[:, cols].T)


def run_values(tree: ExprTree, xt: np.ndarray,
               constants: Sequence[float] | None = None) -> np.ndarray:
    """Evaluate on a pre-built (n_vars, N) coordinate matrix."""
    prog = compile_tree(tree)
    c = np.asarray(constants if constants is not None else tree.constants, dtype=float)
    with np.errstate(all="ignore"):
        return _run_values(prog.ops, prog.lits, c, xt)


def run_duals(tree: ExprTree, xt: np.ndarray,
              constants: Sequence[float] | None = None):
    """Values plus (k, N) constant-gradient rows on a pre-built matrix."""
    prog = compile_tree(tree)
    c = np.asarray(constants if constants is not None else tree.constants, dtype=float)
    with np.errstate(all="ignore"):
        return _run_duals(prog.ops, prog.lits, c, xt, len(c))


def eval_batch(tree: ExprTree, points, constants: Sequence[float] | None = None) -> np.ndarray:
    """Evaluate a tree on a batch of points; non-finite entries mark domain errors."""
    return run_values(tree, _as_matrix(tree, points), constants)


def eval_tree(tree: ExprTree, point: Mapping[str, float],
              constants: Sequence[float] | None = None) -> float:
    """Evaluate at one point; returns NaN as the invalid-value marker."""
    coords = {k: np.asarray([v], dtype=float) for k, v in point.items()}
    missing = [v for v in tree.var_names if v not in coords]
    if missing:
        raise ValueError(f"point is missing variables {missing}")
    return float(eval_batch(tree, coords, constants)[0])


def eval_with_const_grad(tree: ExprTree, points,
                         constants: Sequence[float] | None = None):
    """Values and (k, N) constant gradients via forward-mode duals."""
    return run_duals(tree, _as_matrix(tree, points), constants)


def grad_constants(tree: ExprTree, point: Mapping[str, float],
                   constants: Sequence[float] | None = None) -> np.ndarray:
    """Gradient of the evaluation with respect to each tunable constant."""
    if not tree.constants and constants is None:
        return np.zeros(0)
    coords = {k: np.asarray([v], dtype=float) for k, v in point.items()}
    _, grads = eval_with_const_grad(tree, coords, constants)
    return grads[:, 0]


# ---------------------------------------------------------------------------
# symbolic differentiation
# ---------------------------------------------------------------------------

def _is_lit(node: Node, value: float | None = None) -> bool:
    return node.op == "lit" and (value is None or node.val == value)


def sadd(a: Node, b: Node) -> Node:
    if _is_lit(a) and _is_lit(b):
        return lit(a.val + b.val)
    if _is_lit(a, 0.0):
        return b
    if _is_lit(b, 0.0):
        return a
    return fn("add", a, b)


def ssub(a: Node, b: Node) -> Node:
    if _is_lit(a) and _is_lit(b):
        return lit(a.val - b.val)
    if _is_lit(b, 0.0):
        return a
    if _is_lit(a, 0.0):
        return smul(lit(-1.0), b)
    return fn("sub", a, b)


def smul(a: Node, b: Node) -> Node:
    if _is_lit(a) and _is_lit(b):
        return lit(a.val * b.val)
    if _is_lit(a, 0.0) or _is_lit(b, 0.0):
        return lit(0.0)
    if _is_lit(a, 1.0):
        return b
    if _is_lit(b, 1.0):
        return a
    return fn("mul", a, b)


def sdiv(a: Node, b: Node) -> Node:
    if _is_lit(a, 0.0):
        return lit(0.0)
    if _is_lit(b, 1.0):
        return a
    if _is_lit(a) and _is_lit(b) and b.val != 0.0:
        return lit(a.val / b.val)
    return fn("div", a, b)


def _d(node: Node, wrt: str) -> Node:
    """Derivative of a node with respect to one variable name."""
    op = node.op
    if op == "var":
        return lit(1.0) if node.val == wrt else lit(0.0)
    if op in ("const", "lit"):
        return lit(0.0)
    if op == "add":
        return sadd(_d(node.args[0], wrt), _d(node.args[1], wrt))
    if op == "sub":
        return ssub(_d(node.args[0], wrt), _d(node.args[1], wrt))
    if op == "mul":
        a, b = node.args
        return sadd(smul(_d(a, wrt), b), smul(a, _d(b, wrt)))
    if op == "div":
        a, b = node.args
        da, db = _d(a, wrt), _d(b, wrt)
        return ssub(sdiv(da, b), sdiv(smul(a, db), smul(b, b)))
    if op == "sin":
        (a,) = node.args
        return smul(fn("cos", a), _d(a, wrt))
    if op == "cos":
        (a,) = node.args
        return smul(lit(-1.0), smul(fn("sin", a), _d(a, wrt)))
    if op == "exp":
        (a,) = node.args
        return smul(Node("exp", (a,)), _d(a, wrt))
    if op == "log":
        (a,) = node.args
        return sdiv(_d(a, wrt), a)
    if op == "pow":
        a, b = node.args
        da, db = _d(a, wrt), _d(b, wrt)
        if _is_lit(b):
            return smul(smul(b, fn("pow", a, lit(b.val - 1.0))), da)
        # d(a^b) = a^b * (db*log(a) + b*da/a)
        inner = sadd(smul(db, fn("log", a)), sdiv(smul(b, da), a))
        return smul(fn("pow", a, b), inner)
    raise ValueError(f"cannot differentiate node {op!r}; ADFs must be inlined")


def differentiate(tree: ExprTree, wrt: str, order: int = 1) -> ExprTree:
    """Exact partial-derivative tree of the given order (1 or 2).

    The result shares the constants vector with the source tree, so constant
    tuning is visible to cached derivatives. Cached per (variable, order).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    key = ("deriv", wrt, order)
    cached = tree._cache.get(key)
    if cached is not None:
        return cached
    if order == 2:
        result = differentiate(differentiate(tree, wrt, 1), wrt, 1)
    else:
        result = ExprTree(_d(tree.root, wrt), tree.constants, tree.var_names)
    tree._cache[key] = result
    return result


def warmup() -> None:
    """Trigger numba JIT compilation of the kernels on a tiny program."""
    t = ExprTree(fn("add", Node("var", (), "x"), Node("const", (), 0)), [1.0], ("x",))
    eval_batch(t, np.zeros((2, 1)))
    eval_with_const_grad(t, np.zeros((2, 1)))

"""Benchmark dataset generation: analytic sampling, numerical solvers for
the Burgers and advection-diffusion families, noise injection and CSV
persistence."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .pdefam import FAMILIES, TaskSpec, exact_solution_values, ic_value

DEFAULT_N_POINTS = 1100


class DataError(ValueError):
    pass


class CFLError(RuntimeError):
    """Explicit scheme run outside its stability bound."""


@dataclass(frozen=True)
class Dataset:
    """Sampled (coordinates, value) records for one task."""

    X: np.ndarray  # (n, n_vars) coordinates, columns follow var_names
    u: np.ndarray  # (n,) field values
    var_names: tuple[str, ...]
    provenance: str  # "analytic" | "fdm" | "crank_nicolson"
    task_id: int = 0
    noise_sigma_frac: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def records(self) -> Iterator[tuple[dict, float]]:
        for i in range(self.n):
            yield dict(zip(self.var_names, self.X[i])), float(self.u[i])


@dataclass(frozen=True)
class SolutionGrid:
    """Dense solution values over a uniform tensor grid."""

    axis_names: tuple[str, ...]
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    dx: float
    dt: float

    @property
    def n_nodes(self) -> int:
        return int(self.values.size)

    def flatten(self) -> tuple[np.ndarray, np.ndarray]:
        """All grid nodes as an (n, n_vars) matrix plus the value vector."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        X = np.stack([m.ravel() for m in mesh], axis=1)
        return X, self.values.ravel()


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_analytic(task: TaskSpec, n_points: int = DEFAULT_N_POINTS,
                 rng: np.random.Generator | None = None) -> Dataset:
    """Sample the closed-form solution at uniform points of the domain."""
    fam = FAMILIES[task.family]
    if not fam.analytic:
        raise DataError(f"{task.family} requires a numerical solver")
    rng = rng if rng is not None else np.random.default_rng(0)
    lows = np.array([d[0] for d in task.domain])
    highs = np.array([d[1] for d in task.domain])
    X = rng.uniform(lows, highs, size=(n_points, len(task.variables)))
    u = exact_solution_values(task, X)
    return Dataset(X, u, task.variables, "analytic", task.task_id)


def solve_burgers_fdm(task: TaskSpec, n_x: int = 100, n_t: int = 1000) -> SolutionGrid:
    """Conservative finite-difference solve of the viscous Burgers equation.

    Local Lax-Friedrichs flux for the convection term, central second
    differences for the nu/pi diffusion, explicit Euler in time, periodic
    boundaries on x in [0,1). The diffusive CFL bound is asserted up front
    and the advective bound from the max principle |u| <= max|u0|.
    """
    if task.family != "burgers1d":
        raise DataError("solve_burgers_fdm expects a burgers1d task")
    t_hi = FAMILIES[task.family].t_hi
    dx = 1.0 / n_x
    dt = t_hi / n_t
    diff = task.param("nu") / math.pi
    if diff > 0 and dt > 0.5 * dx * dx / diff:
        raise CFLError(f"diffusive CFL violated: dt={dt:g} > {0.5 * dx * dx / diff:g}")
    x = np.arange(n_x) * dx
    u = ic_value(task, x.reshape(-1, 1))
    if np.max(np.abs(u)) * dt / dx > 1.0:
        raise CFLError("advective CFL violated for this initial condition")
    values = np.empty((n_x, n_t + 1))
    values[:, 0] = u
    lam = dt / dx
    mu = diff * dt / (dx * dx)
    for n in range(1, n_t + 1):
        up = np.roll(u, -1)  # u_{i+1}
        um = np.roll(u, 1)   # u_{i-1}
        a_plus = np.maximum(np.abs(u), np.abs(up))
        flux_plus = 0.25 * (u * u + up * up) - 0.5 * a_plus * (up - u)
        flux_minus = np.roll(flux_plus, 1)
        u = u - lam * (flux_plus - flux_minus) + mu * (up - 2.0 * u + um)
        values[:, n] = u
    t = np.linspace(0.0, t_hi, n_t + 1)
    return SolutionGrid(("x", "t"), (x, t), values, dx, dt)


def solve_adv_diff_cn(task: TaskSpec, n_x: int = 100, n_t: int = 100) -> SolutionGrid:
    """Crank-Nicolson solve of the advection-diffusion equation.

    Centered differences for both terms on a periodic grid; one LU
    factorization serves every trapezoidal step.
    """
    if task.family != "advdiff1d":
        raise DataError("solve_adv_diff_cn expects an advdiff1d task")
    beta, alpha = task.param("beta"), task.param("alpha")
    t_hi = FAMILIES[task.family].t_hi
    dx = 1.0 / n_x
    dt = t_hi / n_t
    x = np.arange(n_x) * dx

    eye = np.eye(n_x)
    d1 = (np.roll(eye, -1, axis=1) - np.roll(eye, 1, axis=1)) / (2.0 * dx)
    d2 = (np.roll(eye, -1, axis=1) - 2.0 * eye + np.roll(eye, 1, axis=1)) / (dx * dx)
    op = beta * d1 - alpha * d2
    lhs = eye + 0.5 * dt * op
    rhs = eye - 0.5 * dt * op
    try:
        lu = lu_factor(lhs)
    except Exception as exc:  # pragma: no cover - nearly impossible for valid params
        raise DataError(f"singular Crank-Nicolson system: {exc}") from exc

    u = ic_value(task, x.reshape(-1, 1))
    values = np.empty((n_x, n_t + 1))
    values[:, 0] = u
    for n in range(1, n_t + 1):
        u = lu_solve(lu, rhs @ u)
        values[:, n] = u
    t = np.linspace(0.0, t_hi, n_t + 1)
    return SolutionGrid(("x", "t"), (x, t), values, dx, dt)


def sample_grid(grid: SolutionGrid, n_points: int, rng: np.random.Generator,
                task_id: int = 0, provenance: str = "fdm") -> Dataset:
    """Draw distinct grid nodes uniformly without replacement."""
    total = grid.n_nodes
    if n_points > total:
        raise DataError(f"requested {n_points} points from a {total}-node grid")
    flat = rng.choice(total, size=n_points, replace=False)
    idx = np.unravel_index(flat, grid.values.shape)
    X = np.stack([grid.axes[d][idx[d]] for d in range(len(grid.axes))], axis=1)
    u = grid.values[idx]
    return Dataset(X, u, grid.axis_names, provenance, task_id)


def generate_dataset(task: TaskSpec, n_points: int = DEFAULT_N_POINTS,
                     rng: np.random.Generator | None = None) -> Dataset:
    """Family-appropriate dataset: analytic sampling or solver grid sampling."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if FAMILIES[task.family].analytic:
        return gen_analytic(task, n_points, rng)
    if task.family == "burgers1d":
        grid = solve_burgers_fdm(task)
        return sample_grid(grid, n_points, rng, task.task_id, "fdm")
    grid = solve_adv_diff_cn(task)
    return sample_grid(grid, n_points, rng, task.task_id, "crank_nicolson")


def add_noise(data: Dataset, sigma_frac: float, rng: np.random.Generator) -> Dataset:
    """Gaussian noise with sigma = sigma_frac * RMS of the field values."""
    if sigma_frac < 0:
        raise DataError("sigma_frac must be non-negative")
    if sigma_frac == 0.0:
        return replace(data, noise_sigma_frac=0.0)
    scale = sigma_frac * float(np.sqrt(np.mean(data.u ** 2)))
    noisy = data.u + rng.normal(0.0, scale, size=data.u.shape)
    return replace(data, u=noisy, noise_sigma_frac=float(sigma_frac))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(data: Dataset, path: str) -> None:
    """Write the dataset as CSV (17 significant digits), atomically."""
    header = ",".join(data.var_names + ("u",))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header + "\n")
            for i in range(data.n):
                row = [f"{v:.17g}" for v in data.X[i]] + [f"{data.u[i]:.17g}"]
                fh.write(",".join(row) + "\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


_ALLOWED_COLUMNS = ("x", "y", "z", "t")


def load_dataset(path: str, task: TaskSpec | None = None,
                 provenance: str = "analytic", task_id: int = 0) -> Dataset:
    """Read a dataset CSV; malformed rows report their line number."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        columns = tuple(header.split(","))
        if len(columns) < 2 or columns[-1] != "u" or any(
            c not in _ALLOWED_COLUMNS for c in columns[:-1]
        ):
            raise DataError(f"{path}:1: bad header {header!r}")
        if task is not None and columns[:-1] != task.variables:
            raise DataError(
                f"{path}:1: columns {columns[:-1]} do not match task variables {task.variables}"
            )
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(columns):
                raise DataError(f"{path}:{lineno}: expected {len(columns)} fields")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise DataError(f"{path}: empty dataset")
    arr = np.asarray(rows)
    if task is not None:
        provenance = ("analytic" if FAMILIES[task.family].analytic
                      else "fdm" if task.family == "burgers1d" else "crank_nicolson")
        task_id = task.task_id
    return Dataset(arr[:, :-1], arr[:, -1], columns[:-1], provenance, task_id)


# ---------------------------------------------------------------------------
# held-out evaluation grids
# ---------------------------------------------------------------------------

#: (spatial nodes per axis, time nodes) used for test-MSE grids; numerical
#: families evaluate on their solver grid instead.
EVAL_GRID_DEFAULTS = {
    "adv1d": (101, 101),
    "adv2d": (101, 51),
    "ns2d": (101, 51),
    "adv3d": (41, 21),
}


def eval_grid(task: TaskSpec, spatial_nodes: int | None = None,
              time_nodes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Dense held-out grid (coordinates, true values) for test MSE."""
    fam = FAMILIES[task.family]
    if not fam.analytic:
        grid = (solve_burgers_fdm(task) if task.family == "burgers1d"
                else solve_adv_diff_cn(task))
        return grid.flatten()
    sp_default, t_default = EVAL_GRID_DEFAULTS[task.family]
    sp = spatial_nodes if spatial_nodes else sp_default
    tn = time_nodes if time_nodes else t_default
    axes = [np.linspace(0.0, 1.0, sp) for _ in task.spatial_variables]
    axes.append(np.linspace(0.0, fam.t_hi, tn))
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    return X, exact_solution_values(task, X)

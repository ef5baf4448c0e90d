"""Registry of the six benchmark PDE families.

Each family bundles its differential operator, domain, initial-condition
synthesis rule, default parameter table and symbol library. Tasks are
immutable; datasets and collocation sets attach by replacement.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import exprcalc
from .exprcalc import sadd, smul, ssub
from .genome import CONST_TOKEN, ExprTree, Node, SymbolLibrary, fn, lit, var

TWO_PI = 2.0 * math.pi

BASIC_FUNCTIONS = ("add", "sub", "mul", "sin")
EXTENDED_FUNCTIONS = ("add", "sub", "mul", "sin", "exp", "log")

#: number of constant placeholders appended to every task's terminal list
N_CONST_PLACEHOLDERS = 2


class FamilyError(ValueError):
    pass


@dataclass(frozen=True)
class ICSpec:
    """Initial-condition synthesis rule.

    ``components`` holds (amplitude, wavenumber index n, phase) triples;
    wavenumbers are k = 2*pi*n on the unit domain. Taylor-Green carries no
    random components.
    """

    mode: str  # "sine_sum" | "sine_product" | "taylor_green"
    components: tuple[tuple[float, int, float], ...] = ()
    n_max: int = 8


@dataclass(frozen=True)
class FamilyDef:
    name: str
    param_names: tuple[str, ...]
    variables: tuple[str, ...]  # spatial axes then t
    t_hi: float
    functions: tuple[str, ...]
    ic_mode: str
    analytic: bool
    default_params: tuple[tuple[float, ...], ...]


FAMILIES: dict[str, FamilyDef] = {
    f.name: f
    for f in (
        FamilyDef(
            "adv1d", ("beta",), ("x", "t"), 2.0, BASIC_FUNCTIONS, "sine_sum", True,
            ((0.1,), (0.4,), (0.7,), (1.0,)),
        ),
        FamilyDef(
            "burgers1d", ("nu",), ("x", "t"), 2.0, EXTENDED_FUNCTIONS, "sine_sum", False,
            ((0.001,), (0.004,), (0.007,), (0.01,)),
        ),
        FamilyDef(
            "advdiff1d", ("beta", "alpha"), ("x", "t"), 2.0, EXTENDED_FUNCTIONS,
            "sine_sum", False,
            ((0.1, 0.001), (0.4, 0.002), (0.7, 0.001), (1.0, 0.004)),
        ),
        FamilyDef(
            "adv2d", ("beta_x", "beta_y"), ("x", "y", "t"), 1.0, BASIC_FUNCTIONS,
            "sine_product", True,
            ((0.1, 0.842), (0.4, 0.349), (0.7, 0.969), (1.0, 0.186)),
        ),
        FamilyDef(
            "ns2d", ("nu",), ("x", "y", "t"), 2.0, EXTENDED_FUNCTIONS, "taylor_green", True,
            ((0.005,), (0.02,), (0.035,), (0.05,)),
        ),
        FamilyDef(
            "adv3d", ("beta_x", "beta_y", "beta_z"), ("x", "y", "z", "t"), 1.0,
            BASIC_FUNCTIONS, "sine_product", True,
            ((0.1, 0.983, 0.548), (0.4, 0.579, 0.573), (0.7, 0.818, 0.951),
             (1.0, 0.697, 0.204)),
        ),
    )
}


@dataclass(frozen=True)
class TaskSpec:
    """One PDE instance with its parameters, IC and symbol library."""

    family: str
    params: tuple[float, ...]
    ic: ICSpec
    library: SymbolLibrary
    task_id: int = 0
    dataset: object = None
    conditions: object = None

    def __post_init__(self):
        fam = FAMILIES.get(self.family)
        if fam is None:
            raise FamilyError(f"unknown family {self.family!r}")
        if len(self.params) != len(fam.param_names):
            raise FamilyError(
                f"{self.family} expects parameters {fam.param_names}, got {self.params}"
            )
        if any((not math.isfinite(p)) or p < 0 for p in self.params):
            raise FamilyError("parameters must be finite and non-negative")

    @property
    def definition(self) -> FamilyDef:
        return FAMILIES[self.family]

    @property
    def variables(self) -> tuple[str, ...]:
        return self.definition.variables

    @property
    def spatial_variables(self) -> tuple[str, ...]:
        return self.definition.variables[:-1]

    @property
    def domain(self) -> tuple[tuple[float, float], ...]:
        fam = self.definition
        return tuple([(0.0, 1.0)] * (len(fam.variables) - 1) + [(0.0, fam.t_hi)])

    def param(self, name: str) -> float:
        return self.params[self.definition.param_names.index(name)]

    def with_data(self, dataset=None, conditions=None) -> "TaskSpec":
        return dataclasses.replace(
            self,
            dataset=dataset if dataset is not None else self.dataset,
            conditions=conditions if conditions is not None else self.conditions,
        )


def family_library(family: str) -> SymbolLibrary:
    fam = FAMILIES[family]
    terminals = fam.variables + (CONST_TOKEN,) * N_CONST_PLACEHOLDERS
    return SymbolLibrary(fam.functions, terminals)


def draw_ic(family: str, rng: np.random.Generator) -> ICSpec:
    """Random IC per the family's synthesis rule (N=2 sines in 1D, unit
    amplitudes for the 2D/3D products, fixed Taylor-Green for NS)."""
    fam = FAMILIES[family]
    n_max = 8
    if fam.ic_mode == "taylor_green":
        return ICSpec("taylor_green")
    if fam.ic_mode == "sine_sum":
        comps = tuple(
            (float(rng.uniform(0.0, 1.0)), int(rng.integers(1, n_max + 1)),
             float(rng.uniform(0.0, TWO_PI)))
            for _ in range(2)
        )
        return ICSpec("sine_sum", comps, n_max)
    n_axes = len(fam.variables) - 1
    comps = tuple(
        (1.0, int(rng.integers(1, n_max + 1)), float(rng.uniform(0.0, TWO_PI)))
        for _ in range(n_axes)
    )
    return ICSpec("sine_product", comps, n_max)


def make_task(family: str, params: Sequence[float], ic: ICSpec | None = None,
              task_id: int = 0, rng: np.random.Generator | None = None) -> TaskSpec:
    if ic is None:
        if rng is None:
            raise FamilyError("either an ICSpec or an rng to draw one is required")
        ic = draw_ic(family, rng)
    return TaskSpec(family, tuple(float(p) for p in params), ic,
                    family_library(family), task_id)


# ---------------------------------------------------------------------------
# initial conditions and exact solutions
# ---------------------------------------------------------------------------

def _spatial_columns(task: TaskSpec, points) -> list[np.ndarray]:
    names = task.spatial_variables
    if isinstance(points, Mapping):
        return [np.asarray(points[n], dtype=float) for n in names]
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if len(names) == 1 else x.reshape(1, -1)
    if x.shape[1] == len(task.variables):  # full coordinates: drop t
        x = x[:, : len(names)]
    if x.shape[1] != len(names):
        raise FamilyError(f"expected {len(names)} spatial columns, got {x.shape[1]}")
    return [x[:, i] for i in range(len(names))]


def ic_value(task: TaskSpec, points):
    """Initial field u0 at spatial points (scalar when a single point dict)."""
    scalar = isinstance(points, Mapping) and np.isscalar(next(iter(points.values())))
    if scalar:
        points = {k: np.asarray([v], dtype=float) for k, v in points.items()}
    cols = _spatial_columns(task, points)
    ic = task.ic
    if ic.mode == "taylor_green":
        out = np.sin(TWO_PI * cols[0]) * np.sin(TWO_PI * cols[1])
    elif ic.mode == "sine_sum":
        out = np.zeros_like(cols[0])
        for amp, n, phase in ic.components:
            out += amp * np.sin(TWO_PI * n * cols[0] + phase)
    elif ic.mode == "sine_product":
        out = np.ones_like(cols[0])
        for axis, (amp, n, phase) in enumerate(ic.components):
            out *= amp * np.sin(TWO_PI * n * cols[axis] + phase)
    else:
        raise FamilyError(f"unknown IC mode {ic.mode!r}")
    return float(out[0]) if scalar else out


def exact_solution_values(task: TaskSpec, points) -> np.ndarray:
    """Closed-form field values for the analytic families."""
    fam = task.definition
    if not fam.analytic:
        raise FamilyError(f"{task.family} has no closed-form solution")
    if isinstance(points, Mapping):
        coords = {k: np.asarray(v, dtype=float) for k, v in points.items()}
    else:
        x = np.asarray(points, dtype=float)
        coords = {name: x[:, i] for i, name in enumerate(task.variables)}
    t = coords["t"]
    if task.family == "ns2d":
        nu = task.param("nu")
        return (np.sin(TWO_PI * coords["x"]) * np.sin(TWO_PI * coords["y"])
                * np.exp(-8.0 * math.pi ** 2 * nu * t))
    shifted = {
        name: coords[name] - task.params[i] * t
        for i, name in enumerate(task.spatial_variables)
    }
    return ic_value(task, shifted)


def exact_solution_tree(task: TaskSpec) -> ExprTree:
    """The analytic solution as an expression tree (literal coefficients)."""
    fam = task.definition
    if not fam.analytic:
        raise FamilyError(f"{task.family} has no closed-form solution")
    tvar = var("t")
    if task.family == "ns2d":
        nu = task.param("nu")
        root = smul(
            smul(fn("sin", smul(lit(TWO_PI), var("x"))),
                 fn("sin", smul(lit(TWO_PI), var("y")))),
            fn("exp", smul(lit(-8.0 * math.pi ** 2 * nu), tvar)),
        )
        return ExprTree(root, [], task.variables)
    terms = []
    if task.ic.mode == "sine_sum":
        beta = task.params[0]
        for amp, n, phase in task.ic.components:
            arg = sadd(smul(lit(TWO_PI * n), ssub(var("x"), smul(lit(beta), tvar))),
                       lit(phase))
            terms.append(smul(lit(amp), fn("sin", arg)))
        root = terms[0]
        for term in terms[1:]:
            root = sadd(root, term)
    else:  # sine_product over shifted axes
        root = lit(1.0)
        for axis, (amp, n, phase) in enumerate(task.ic.components):
            name = task.spatial_variables[axis]
            arg = sadd(smul(lit(TWO_PI * n), ssub(var(name), smul(lit(task.params[axis]), tvar))),
                       lit(phase))
            root = smul(root, smul(lit(amp), fn("sin", arg)))
    return ExprTree(root, [], task.variables)


# ---------------------------------------------------------------------------
# residual operators
# ---------------------------------------------------------------------------

def residual_tree(task: TaskSpec, u: ExprTree) -> ExprTree:
    """Symbolic residual of the family operator applied to a candidate.

    The result shares the candidate's constants vector. For the NS2D
    Taylor-Green regime the advection term vanishes, leaving the vorticity
    diffusion operator.
    """
    d = exprcalc.differentiate
    ut = d(u, "t").root
    if task.family == "adv1d":
        root = sadd(ut, smul(lit(task.param("beta")), d(u, "x").root))
    elif task.family == "burgers1d":
        nu = task.param("nu")
        root = ssub(sadd(ut, smul(u.root, d(u, "x").root)),
                    smul(lit(nu / math.pi), d(u, "x", 2).root))
    elif task.family == "advdiff1d":
        root = ssub(sadd(ut, smul(lit(task.param("beta")), d(u, "x").root)),
                    smul(lit(task.param("alpha")), d(u, "x", 2).root))
    elif task.family == "adv2d":
        root = sadd(sadd(ut, smul(lit(task.param("beta_x")), d(u, "x").root)),
                    smul(lit(task.param("beta_y")), d(u, "y").root))
    elif task.family == "ns2d":
        lap = sadd(d(u, "x", 2).root, d(u, "y", 2).root)
        root = ssub(ut, smul(lit(task.param("nu")), lap))
    elif task.family == "adv3d":
        root = sadd(
            sadd(sadd(ut, smul(lit(task.param("beta_x")), d(u, "x").root)),
                 smul(lit(task.param("beta_y")), d(u, "y").root)),
            smul(lit(task.param("beta_z")), d(u, "z").root),
        )
    else:
        raise FamilyError(f"unknown family {task.family!r}")
    return ExprTree(root, u.constants, u.var_names)


def residual(task: TaskSpec, u: ExprTree, point: Mapping[str, float]) -> float:
    """Residual of the family operator at one point (NaN marks a domain error)."""
    return exprcalc.eval_tree(residual_tree(task, u), point)


# ---------------------------------------------------------------------------
# collocation sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionSet:
    """Coordinate sets for the physics penalties.

    ``bc_lo``/``bc_hi`` pair points that differ only in one spatial axis set
    to its bounds; the periodic mismatch is penalized between them.
    """

    interior: np.ndarray
    ic_points: np.ndarray
    ic_values: np.ndarray
    bc_lo: np.ndarray
    bc_hi: np.ndarray

    @property
    def n_interior(self) -> int:
        return self.interior.shape[0]

    @property
    def n_ic(self) -> int:
        return self.ic_points.shape[0]

    @property
    def n_bc(self) -> int:
        return self.bc_lo.shape[0]


def sample_conditions(task: TaskSpec, n_interior: int = 256, n_ic: int = 64,
                      n_bc: int = 64, rng: np.random.Generator | None = None) -> ConditionSet:
    """Uniform collocation, initial and periodic-boundary point sets."""
    rng = rng if rng is not None else np.random.default_rng(0)
    domain = task.domain
    nv = len(task.variables)
    lows = np.array([d[0] for d in domain])
    highs = np.array([d[1] for d in domain])

    interior = rng.uniform(lows, highs, size=(n_interior, nv)) if n_interior else np.zeros((0, nv))

    ic_points = rng.uniform(lows, highs, size=(n_ic, nv)) if n_ic else np.zeros((0, nv))
    if n_ic:
        ic_points[:, -1] = domain[-1][0]
    ic_values = ic_value(task, ic_points) if n_ic else np.zeros(0)

    n_sp = nv - 1
    if n_bc:
        lo_rows, hi_rows = [], []
        for axis in range(n_sp):
            base = rng.uniform(lows, highs, size=(n_bc, nv))
            lo = base.copy()
            hi = base.copy()
            lo[:, axis] = domain[axis][0]
            hi[:, axis] = domain[axis][1]
            lo_rows.append(lo)
            hi_rows.append(hi)
        bc_lo = np.vstack(lo_rows)
        bc_hi = np.vstack(hi_rows)
    else:
        bc_lo = np.zeros((0, nv))
        bc_hi = np.zeros((0, nv))
    return ConditionSet(interior, ic_points, np.asarray(ic_values), bc_lo, bc_hi)

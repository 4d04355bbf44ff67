"""Direct transcription of the plant PDEs on a uniform space-time grid.

Time is discretized with implicit Euler (the right-hand side is evaluated at
the new time level) and space with first-order backward differences. The
inlet ghost node is substituted by the inlet expression of the controls
unless explicit inlet variables are requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr_graph import ConstraintSet, Expr, Variables, evaluate
from .plants.base import PlantModel

__all__ = [
    "Grid",
    "TranscribedSystem",
    "spatial_rhs",
    "add_trajectory_variables",
    "build_dynamics",
    "build_boundary_initial",
    "transcribe",
    "dynamics_row_count",
]


@dataclass(frozen=True)
class Grid:
    dt: float
    n_fe: int
    length: float
    P: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_fe < 2:
            raise ValueError("n_fe must be at least 2")
        if self.P < 1:
            raise ValueError("P must be at least 1")

    @property
    def dz(self) -> float:
        return self.length / self.n_fe

    @classmethod
    def for_plant(cls, plant: PlantModel, P: int) -> "Grid":
        return cls(plant.dt, plant.n_fe, plant.length, P)


@dataclass
class TranscribedSystem:
    """Variable handles of a transcribed horizon.

    ``x[k, i, v]`` is the state node of step ``k`` (``0..P``); ``u_moves[j]``
    the ``j``-th free control move; ``u_steps[k]`` the control applied on
    step ``k`` (``u_moves[min(k, M-1)]``).
    """

    variables: Variables
    x: np.ndarray
    x_index: np.ndarray
    u_moves: np.ndarray
    u_index: np.ndarray
    u_steps: np.ndarray
    constraints: ConstraintSet
    inlet: np.ndarray | None = None

    @property
    def P(self) -> int:
        return self.x.shape[0] - 1

    @property
    def M(self) -> int:
        return self.u_moves.shape[0]


def spatial_rhs(plant: PlantModel, state_profile, u, v: int) -> list:
    """Spatial operator at node ``v`` (1-based) with the inlet as node 0."""
    if not 1 <= v <= plant.n_fe:
        raise ValueError(f"node index {v} outside 1..{plant.n_fe}")
    prof = np.asarray(state_profile, dtype=object if _symbolic(state_profile) else float)
    xs = [prof[i, v - 1] for i in range(plant.n_x)]
    if v == 1:
        prev = plant.inlet(u)
    else:
        prev = [prof[i, v - 2] for i in range(plant.n_x)]
    return plant.node_rhs(xs, prev, u)


def _symbolic(a) -> bool:
    arr = np.asarray(a, dtype=object)
    return any(isinstance(e, Expr) for e in arr.ravel())


def add_trajectory_variables(variables: Variables, plant: PlantModel, P: int, M: int, x0,
                             u_init=None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Create state nodes for steps ``0..P`` followed by ``M`` control moves.

    Step-0 states are fixed to ``x0`` (tagged ``state``). Returns
    ``(x, x_index, u_moves, u_index)``.
    """
    if not 1 <= M <= P:
        raise ValueError("control horizon must satisfy 1 <= M <= P")
    x0 = np.asarray(x0, dtype=float).reshape(plant.shape)
    lo, hi = plant.state_bounds()
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("initial profile outside state bounds")
    u_init = plant.u_nominal if u_init is None else np.asarray(u_init, float)
    x = np.empty((P + 1,) + plant.shape, dtype=object)
    x_index = np.empty((P + 1,) + plant.shape, dtype=np.int64)
    for k in range(P + 1):
        for i in range(plant.n_x):
            for v in range(plant.n_fe):
                name = f"x[{k},{plant.state_names[i]},{v + 1}]"
                if k == 0:
                    node = variables.add(name, x0[i, v], x0[i, v], x0[i, v], kind="state")
                else:
                    node = variables.add(name, lo[i, v], hi[i, v], x0[i, v], kind="state")
                x[k, i, v] = node
                x_index[k, i, v] = node.data
    u = np.empty((M, plant.n_u), dtype=object)
    u_index = np.empty((M, plant.n_u), dtype=np.int64)
    for j in range(M):
        for l in range(plant.n_u):
            node = variables.add(f"u[{j},{plant.control_names[l]}]", plant.u_lb[l], plant.u_ub[l],
                                 u_init[l], kind="control")
            u[j, l] = node
            u_index[j, l] = node.data
    return x, x_index, u, u_index


def blocked_controls(u_moves: np.ndarray, P: int) -> np.ndarray:
    M = u_moves.shape[0]
    return np.array([u_moves[min(k, M - 1)] for k in range(P)], dtype=object)


def build_dynamics(plant: PlantModel, grid: Grid, x: np.ndarray, u_steps, inlet=None) -> ConstraintSet:
    """Implicit-Euler rows for every step ``k < P``, state and node.

    Exactly ``P * n_x * n_fe`` equality rows. ``inlet[k]`` optionally
    replaces the substituted inlet values by explicit variables.
    """
    if x.shape != (grid.P + 1, plant.n_x, grid.n_fe):
        raise ValueError("state handles do not match the grid")
    cs = ConstraintSet()
    inv_dt = 1.0 / grid.dt
    for k in range(grid.P):
        u = list(u_steps[k])
        res = _residual_rows(plant, x[k], x[k + 1], u, inv_dt, None if inlet is None else list(inlet[k]))
        for i in range(plant.n_x):
            for v in range(grid.n_fe):
                cs.add(res[i, v], "=", 0.0, name=f"dyn[{k},{plant.state_names[i]},{v + 1}]")
    return cs


def _residual_rows(plant, x_k, x_next, u, inv_dt, inlet):
    if inlet is None:
        return plant.residual(x_k, x_next, u, inv_dt=inv_dt)
    out = np.empty(plant.shape, dtype=object)
    for v in range(plant.n_fe):
        xs = [x_next[i, v] for i in range(plant.n_x)]
        prev = [inlet[i] if v == 0 else x_next[i, v - 1] for i in range(plant.n_x)]
        hk = plant.holdup([x_k[i, v] for i in range(plant.n_x)], u)
        r = plant.residual_nodes(hk, xs, prev, u, inv_dt)
        for i in range(plant.n_x):
            out[i, v] = r[i]
    return out


def build_boundary_initial(plant: PlantModel, grid: Grid, x0_profile, variables: Variables,
                           x: np.ndarray, u_steps) -> tuple[ConstraintSet, np.ndarray]:
    """Explicit inlet variables and rows tying them to the controls.

    Adds one inlet variable per state and step ``k = 0..P-1`` with the row
    ``inlet[k, i] - inlet_i(u_k) = 0`` and checks that the step-0 states are
    fixed to ``x0_profile``. Returns the rows and the inlet handles.
    """
    x0 = np.asarray(x0_profile, dtype=float).reshape(plant.shape)
    lo, hi = plant.state_bounds()
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("initial profile outside state bounds")
    for i in range(plant.n_x):
        for v in range(plant.n_fe):
            idx = x[0, i, v].data
            if variables.lb[idx] != x0[i, v] or variables.ub[idx] != x0[i, v]:
                variables.fix(idx, x0[i, v])
    cs = ConstraintSet()
    inlet = np.empty((grid.P, plant.n_x), dtype=object)
    guess = variables.initial()
    for k in range(grid.P):
        vals = plant.inlet(list(u_steps[k]))
        for i in range(plant.n_x):
            init = evaluate(vals[i], guess) if isinstance(vals[i], Expr) else float(vals[i])
            node = variables.add(f"inlet[{k},{plant.state_names[i]}]", plant.x_lb[i] - abs(plant.x_ub[i]),
                                 plant.x_ub[i] + abs(plant.x_ub[i]), init, kind="boundary")
            inlet[k, i] = node
            cs.add(node - vals[i], "=", 0.0, name=f"inlet[{k},{plant.state_names[i]}]")
    return cs, inlet


def transcribe(plant: PlantModel, P: int, M: int, x0, u_init=None, explicit_inlet: bool = False,
               variables: Variables | None = None) -> TranscribedSystem:
    """Full mechanistic transcription of one prediction horizon."""
    variables = variables if variables is not None else Variables()
    grid = Grid.for_plant(plant, P)
    x, x_index, u_moves, u_index = add_trajectory_variables(variables, plant, P, M, x0, u_init)
    u_steps = blocked_controls(u_moves, P)
    cs = ConstraintSet()
    inlet = None
    if explicit_inlet:
        bcs, inlet = build_boundary_initial(plant, grid, x0, variables, x, u_steps)
        cs.extend(bcs)
    cs.extend(build_dynamics(plant, grid, x, u_steps, inlet))
    return TranscribedSystem(variables, x, x_index, u_moves, u_index, u_steps, cs, inlet)


def dynamics_row_count(P: int, n_x: int, n_fe: int) -> int:
    return P * n_x * n_fe

"""NMPC problem assembly and the closed-loop simulation.

The controller tracks selected outlet states with the quadratic objective

    sum_{k=0..P} sum_m L_m (y_sp,m - y_m,k)^2 + sum_{k=0..M-1} sum_l W_l du_l,k^2

with ``du_0 = u_0 - u_prev`` and ``du_k = u_k - u_{k-1}``. Controls beyond
the control horizon reuse the last free move. Setpoints, the previous
control and the measured initial profile are fixed variables updated in
place between sampling steps, so one assembled problem serves a whole run.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .embedding import (EmbeddedStep, EmbeddingKind, TrainedNetwork, embed_fs, embed_rs_dense, initialize_aux,
                        make_efe_block)
from .expr_graph import Expr, lin_sum
from .nlp_solver import NlpProblem, SolveResult, SolverOptions, count_variables, solve
from .plants.base import PlantModel
from .plants.simulate import SimulatorConfig, simulate_implicit, simulate_mol
from .transcription import add_trajectory_variables, blocked_controls, build_dynamics, Grid

__all__ = [
    "NmpcConfig",
    "Schedule",
    "NmpcProblem",
    "TraceRecord",
    "ClosedLoopTrace",
    "build_nmpc",
    "initialize_feasible",
    "shift_solution",
    "warm_point",
    "closed_loop",
    "truth_step",
    "trajectory_distance",
    "read_trace_csv",
    "model_tag",
    "distance_factors",
    "COUNT_KEYS",
]


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant setpoints: ``changes`` maps a step to new targets."""

    initial: tuple
    changes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "initial", tuple(float(v) for v in self.initial))
        ch = tuple(sorted((int(k), tuple(float(v) for v in vals)) for k, vals in self.changes))
        for _, vals in ch:
            if len(vals) != len(self.initial):
                raise ValueError("setpoint changes must list every controlled variable")
        object.__setattr__(self, "changes", ch)

    def at(self, step: int) -> np.ndarray:
        cur = self.initial
        for k, vals in self.changes:
            if step >= k:
                cur = vals
        return np.array(cur)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(tuple(d["initial"]), tuple((c["step"], c["values"]) for c in d.get("changes", [])))


@dataclass(frozen=True)
class NmpcConfig:
    """Horizons, weights, controlled-variable selectors and the internal model.

    ``outputs`` lists ``(state_name, node)`` pairs with 1-based nodes;
    ``output_weights`` matches ``outputs`` and ``move_weights`` the plant
    controls.
    """

    P: int
    M: int
    outputs: tuple
    output_weights: tuple
    move_weights: tuple
    variant: EmbeddingKind = EmbeddingKind.MECHANISTIC
    solver: SolverOptions = field(default_factory=SolverOptions)
    aux_init: str = "forward"  # forward | zero

    def __post_init__(self):
        object.__setattr__(self, "variant", EmbeddingKind.parse(self.variant))
        object.__setattr__(self, "outputs", tuple((str(s), int(v)) for s, v in self.outputs))
        object.__setattr__(self, "output_weights", tuple(float(w) for w in self.output_weights))
        object.__setattr__(self, "move_weights", tuple(float(w) for w in self.move_weights))
        if not 1 <= self.M <= self.P:
            raise ValueError("horizons must satisfy 1 <= M <= P")
        if len(self.output_weights) != len(self.outputs):
            raise ValueError("one output weight per controlled variable is required")
        if any(w < 0 for w in self.output_weights + self.move_weights):
            raise ValueError("weights must be nonnegative")
        if self.aux_init not in ("forward", "zero"):
            raise ValueError("aux_init must be 'forward' or 'zero'")

    def validate(self, plant: PlantModel):
        if len(self.move_weights) != plant.n_u:
            raise ValueError(f"expected {plant.n_u} move weights")
        for name, node in self.outputs:
            if name not in plant.state_names or not 1 <= node <= plant.n_fe:
                raise ValueError(f"invalid controlled-variable selector ({name}, {node})")


@dataclass
class NmpcProblem:
    problem: NlpProblem
    plant: PlantModel
    cfg: NmpcConfig
    net: TrainedNetwork | None
    x: np.ndarray
    x_index: np.ndarray
    u_moves: np.ndarray
    u_index: np.ndarray
    sp_index: np.ndarray
    u_prev_index: np.ndarray
    steps: list
    rows_per_step: int

    @property
    def P(self) -> int:
        return self.cfg.P

    @property
    def M(self) -> int:
        return self.cfg.M

    def set_initial_state(self, x0):
        x0 = np.asarray(x0, dtype=float).reshape(self.plant.shape)
        v = self.problem.variables
        for idx, val in zip(self.x_index[0].ravel(), x0.ravel()):
            v.fix(int(idx), float(val))

    def set_setpoints(self, sp):
        for idx, val in zip(self.sp_index, np.asarray(sp, dtype=float)):
            self.problem.variables.fix(int(idx), float(val))

    def set_u_prev(self, u_prev):
        for idx, val in zip(self.u_prev_index, np.asarray(u_prev, dtype=float)):
            self.problem.variables.fix(int(idx), float(val))

    def first_move(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)[self.u_index[0]]

    def counts(self) -> dict:
        return count_variables(self.problem)


def _flat_states(x_k: np.ndarray) -> list:
    return list(x_k.ravel())


def build_nmpc(plant: PlantModel, net: TrainedNetwork | None, cfg: NmpcConfig, x0, u_prev,
               setpoints=None) -> NmpcProblem:
    """Assemble the NMPC problem for the configured internal model."""
    cfg.validate(plant)
    u_prev = np.asarray(u_prev, dtype=float)
    plant.check_control(u_prev, tol=1e-12)
    if cfg.variant != EmbeddingKind.MECHANISTIC:
        if net is None:
            raise ValueError(f"variant {cfg.variant.value} needs a trained network")
        spec = net.spec
        if (spec.n_x, spec.n_fe, spec.n_u) != (plant.n_x, plant.n_fe, plant.n_u):
            raise ValueError("network dimensions do not match the plant grid")
    p = NlpProblem()
    v = p.variables
    x, x_index, u_moves, u_index = add_trajectory_variables(v, plant, cfg.P, cfg.M, x0, u_prev)
    u_steps = blocked_controls(u_moves, cfg.P)
    sp0 = np.zeros(len(cfg.outputs)) if setpoints is None else np.asarray(setpoints, dtype=float)
    sp_vars = [v.add(f"sp[{n}@{node}]", s, s, s, kind="param") for (n, node), s in zip(cfg.outputs, sp0)]
    up_vars = [v.add(f"u_prev[{name}]", val, val, val, kind="param")
               for name, val in zip(plant.control_names, u_prev)]

    # objective
    terms, coeffs = [], []
    for (name, node), w, spv in zip(cfg.outputs, cfg.output_weights, sp_vars):
        i = plant.state_names.index(name)
        for k in range(cfg.P + 1):
            terms.append((spv - x[k, i, node - 1]) ** 2)
            coeffs.append(w)
    for l in range(plant.n_u):
        prev = up_vars[l]
        for k in range(cfg.M):
            terms.append((u_moves[k, l] - prev) ** 2)
            coeffs.append(cfg.move_weights[l])
            prev = u_moves[k, l]
    p.set_objective(lin_sum(terms, coeffs))

    steps = []
    if cfg.variant == EmbeddingKind.MECHANISTIC:
        p.constraints.extend(build_dynamics(plant, Grid.for_plant(plant, cfg.P), x, u_steps))
        rows = plant.n_x * plant.n_fe
    elif cfg.variant == EmbeddingKind.EFE:
        p.add_block(make_efe_block(net, cfg.P, cfg.M), 0, name="efe")
        rows = plant.n_x * plant.n_fe
    else:
        before = len(p.constraints)
        # the fixed initial state is re-fixed every step, so step 0 gets the state box
        lb, ub = p.variables.bounds()
        box_idx = [e.data for e in _flat_states(x[1]) + list(u_steps[0])]
        box = (lb[box_idx], ub[box_idx])
        for k in range(cfg.P):
            ins = _flat_states(x[k]) + list(u_steps[k])
            outs = _flat_states(x[k + 1])
            if cfg.variant == EmbeddingKind.ECE_FS:
                steps.append(embed_fs(net, ins, outs, p, name=f"nn{k}", input_bounds=box))
            else:
                steps.append(embed_rs_dense(net, ins, outs, p, name=f"nn{k}"))
        rows = (len(p.constraints) - before) // cfg.P
    return NmpcProblem(p, plant, cfg, net, x, x_index, u_moves, u_index,
                       np.array([s.data for s in sp_vars]), np.array([s.data for s in up_vars]), steps, rows)


def _model_step(nm: NmpcProblem, x_k, u):
    if nm.cfg.variant == EmbeddingKind.MECHANISTIC:
        return simulate_implicit(nm.plant, x_k, u)
    return nm.net.step(x_k, u)


def initialize_feasible(nm: NmpcProblem, x0, u_hold) -> np.ndarray:
    """Initial point from simulating the internal model under constant ``u_hold``.

    The point is also stored as the variables' initial values.
    """
    u_hold = np.asarray(u_hold, dtype=float)
    nm.plant.check_control(u_hold, tol=1e-12)
    nm.set_initial_state(x0)
    v = nm.problem.variables
    z = v.initial()
    xk = np.asarray(x0, dtype=float).reshape(nm.plant.shape)
    z[nm.x_index[0].ravel()] = xk.ravel()
    for k in range(nm.P):
        xk = _model_step(nm, xk, u_hold)
        z[nm.x_index[k + 1].ravel()] = xk.ravel()
    z[nm.u_index.ravel()] = np.tile(u_hold, nm.M)
    z = _init_aux(nm, z)
    v.init = list(z) if isinstance(v.init, list) else z.copy()
    return z


def warm_point(nm: NmpcProblem, z_shift, x0) -> np.ndarray:
    """Warm-start point: shifted moves, states and auxiliaries re-simulated from ``x0``.

    Keeping the shifted states would leave the first step inconsistent with
    the newly measured state.
    """
    z = np.array(z_shift, dtype=float)
    moves = z[nm.u_index]
    xk = np.asarray(x0, dtype=float).reshape(nm.plant.shape)
    z[nm.x_index[0].ravel()] = xk.ravel()
    for k in range(nm.P):
        xk = _model_step(nm, xk, moves[min(k, nm.M - 1)])
        z[nm.x_index[k + 1].ravel()] = xk.ravel()
    for st in nm.steps:
        z = initialize_aux(st, z)
    return z


def _init_aux(nm: NmpcProblem, z):
    if not nm.steps:
        return z
    if nm.cfg.aux_init == "forward":
        for st in nm.steps:
            z = initialize_aux(st, z)
        return z
    lb, ub = nm.problem.variables.bounds()
    for st in nm.steps:
        idx = np.array(st.aux_indices, dtype=int)
        z[idx] = np.clip(0.0, lb[idx], ub[idx])
    return z


def _set_initial(v, z):
    if isinstance(v.init, list):
        v.init[:] = list(z)
    else:
        v.init = np.asarray(z, dtype=float).copy()


def shift_solution(nm: NmpcProblem, res: SolveResult) -> SolveResult:
    """Shift an optimal solution one step forward for warm starting.

    States, moves, step-wise auxiliaries and multipliers move one step
    earlier; the last step repeats. Auxiliaries are then re-propagated.
    """
    P, M = nm.P, nm.M

    def shift_vec(vec, fill_aux=True):
        out = np.asarray(vec, dtype=float).copy()
        xi = nm.x_index
        for k in range(P):
            out[xi[k].ravel()] = vec[xi[k + 1].ravel()]
        ui = nm.u_index
        for j in range(M - 1):
            out[ui[j]] = vec[ui[j + 1]]
        if nm.steps:
            for k in range(P - 1):
                a = np.array(nm.steps[k].aux_indices, dtype=int)
                b = np.array(nm.steps[k + 1].aux_indices, dtype=int)
                out[a] = vec[b]
        return out

    x = shift_vec(res.x)
    x = _init_aux(nm, x) if nm.cfg.aux_init == "forward" else x
    lam = np.asarray(res.lam, dtype=float).copy()
    R = nm.rows_per_step
    if len(lam) == P * R:
        blocks = lam.reshape(P, R)
        lam = np.concatenate([blocks[1:], blocks[-1:]]).ravel()
    return replace(res, x=x, lam=lam, z_L=shift_vec(res.z_L), z_U=shift_vec(res.z_U))


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


def truth_step(plant: PlantModel, x, u, config: SimulatorConfig | None = None) -> np.ndarray:
    """Advance the plant one sampling interval with its ground-truth simulator."""
    if plant.supports_mol:
        return simulate_mol(plant, x, u, config=config)
    return simulate_implicit(plant, x, u, config=config)


TEXT_COLUMNS = ("plant", "variant", "model", "status")
COUNT_KEYS = ("decision_vars", "aux_vars", "total_vars", "constraints")


@dataclass
class TraceRecord:
    step: int
    setpoints: np.ndarray
    outputs: np.ndarray
    controls: np.ndarray
    state: np.ndarray
    status: str
    iterations: int
    objective: float
    wall_clock_seconds: float


@dataclass
class ClosedLoopTrace:
    plant_id: str
    variant: str
    output_names: list
    control_names: list
    state_names: list
    n_fe: int
    records: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    model: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        return np.array([r.state.ravel() for r in self.records])

    @property
    def controls(self) -> np.ndarray:
        return np.array([r.controls for r in self.records])

    @property
    def outputs(self) -> np.ndarray:
        return np.array([r.outputs for r in self.records])

    @property
    def setpoints(self) -> np.ndarray:
        return np.array([r.setpoints for r in self.records])

    @property
    def wall_clock(self) -> np.ndarray:
        return np.array([r.wall_clock_seconds for r in self.records])

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.iterations for r in self.records])

    def header(self) -> list:
        st = [f"x_{s}_{v + 1}" for s in self.state_names for v in range(self.n_fe)]
        return (["plant", "variant", "model", "step"] + [f"sp_{n}" for n in self.output_names]
                + [f"y_{n}" for n in self.output_names]
                + [f"u_{n}" for n in self.control_names] + ["status", "iterations", "objective"] + st
                + [f"count_{k}" for k in COUNT_KEYS] + ["wall_clock_seconds"])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for r in self.records:
                w.writerow([self.plant_id, str(self.variant), self.model, r.step]
                           + [repr(float(v)) for v in r.setpoints] + [repr(float(v)) for v in r.outputs]
                           + [repr(float(v)) for v in r.controls] + [r.status, r.iterations, repr(float(r.objective))]
                           + [repr(float(v)) for v in r.state.ravel()]
                           + [int(self.counts.get(k, 0)) for k in COUNT_KEYS] + [repr(float(r.wall_clock_seconds))])


def read_trace_csv(path) -> dict:
    """Columns of a trace file: numeric arrays plus the status list."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"empty trace file {path}")
    head, body = rows[0], rows[1:]
    cols = {h: [r[j] for r in body] for j, h in enumerate(head)}
    out = {k: cols.pop(k, []) for k in TEXT_COLUMNS}
    for h, vals in cols.items():
        out[h] = np.array([float(v) for v in vals])
    out["_header"] = head
    return out


def _output_values(plant: PlantModel, cfg: NmpcConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(plant.shape)
    return np.array([x[plant.state_names.index(n), node - 1] for n, node in cfg.outputs])


def closed_loop(plant_truth: PlantModel, cfg: NmpcConfig, schedule: Schedule, horizon_steps: int, x0,
                u0=None, net: TrainedNetwork | None = None, sim_config: SimulatorConfig | None = None,
                progress=None) -> ClosedLoopTrace:
    """Receding-horizon loop: solve, apply the first move, advance the plant.

    A failed solve re-applies the previous control and the next solve starts
    from a freshly simulated path.
    """
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be at least 1")
    plant = plant_truth
    u_prev = plant.u_nominal.copy() if u0 is None else np.asarray(u0, dtype=float)
    x = np.asarray(x0, dtype=float).reshape(plant.shape)
    nm = build_nmpc(plant, net, cfg, x, u_prev, schedule.at(0))
    names = [f"{n}@{node}" for n, node in cfg.outputs]
    trace = ClosedLoopTrace(plant.name, cfg.variant.value, names, list(plant.control_names),
                            list(plant.state_names), plant.n_fe, counts=nm.counts(),
                            model=model_tag(net if cfg.variant != EmbeddingKind.MECHANISTIC else None))
    warm = None
    for t in range(horizon_steps):
        sp = schedule.at(t)
        nm.set_setpoints(sp)
        nm.set_u_prev(u_prev)
        nm.set_initial_state(x)
        if warm is None:
            z = initialize_feasible(nm, x, u_prev)
        else:
            z = warm_point(nm, warm.x, x)
        _set_initial(nm.problem.variables, z)
        res = solve(nm.problem, cfg.solver, warm)
        if res.success:
            u_apply = np.clip(nm.first_move(res.x), plant.u_lb, plant.u_ub)
            warm = shift_solution(nm, res)
        else:
            u_apply = u_prev.copy()
            warm = None
        trace.records.append(TraceRecord(t, sp, _output_values(plant, cfg, x), u_apply, x.copy(), res.status,
                                         res.iterations, res.objective, res.wall_clock_seconds))
        if progress is not None:
            progress(t, res)
        x = truth_step(plant, x, u_apply, sim_config)
        u_prev = u_apply
    return trace


def model_tag(net) -> str:
    """Identifier of the internal model: ``mechanistic`` or a digest of the network."""
    if net is None:
        return "mechanistic"
    h = hashlib.sha256(net.spec.digest().encode())
    h.update(np.ascontiguousarray(net.params.flat(), dtype="<f8").tobytes())
    return "net-" + h.hexdigest()[:16]


def trajectory_distance(trace_a, trace_b, x_factors, u_factors) -> tuple[np.ndarray, np.ndarray]:
    """Per-step normalized squared distances between two traces (states, controls)."""
    xa, xb = np.asarray(_states(trace_a), float), np.asarray(_states(trace_b), float)
    ua, ub = np.asarray(_controls(trace_a), float), np.asarray(_controls(trace_b), float)
    if xa.shape != xb.shape or ua.shape != ub.shape:
        raise ValueError("traces differ in length or dimensions")
    xf = np.broadcast_to(np.asarray(x_factors, float), xa.shape[1:])
    uf = np.broadcast_to(np.asarray(u_factors, float), ua.shape[1:])
    if np.any(xf <= 0) or np.any(uf <= 0):
        raise ValueError("normalization factors must be positive")
    dx = np.sum(((xa - xb) / xf) ** 2, axis=1)
    du = np.sum(((ua - ub) / uf) ** 2, axis=1)
    return dx, du


def _states(tr):
    return tr.states if isinstance(tr, ClosedLoopTrace) else tr["states"]


def _controls(tr):
    return tr.controls if isinstance(tr, ClosedLoopTrace) else tr["controls"]


def distance_factors(plant: PlantModel) -> tuple[np.ndarray, np.ndarray]:
    """Range of each state node and control, used to normalize distances."""
    lo, hi = plant.state_bounds()
    return (hi - lo).ravel(), plant.u_ub - plant.u_lb

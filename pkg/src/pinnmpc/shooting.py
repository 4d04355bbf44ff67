"""Single-shooting baseline.

Only the ``M`` control moves are decision variables. The objective rolls the
internal model forward over the prediction horizon and its gradient comes
from forward differences, so the solver runs in quasi-Newton mode with bound
constraints only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .embedding import TrainedNetwork
from .nlp_solver import ExternalObjective, NlpProblem, SolveResult, SolverOptions, count_variables, solve
from .nmpc import ClosedLoopTrace, NmpcConfig, Schedule, TraceRecord, _output_values, model_tag, truth_step
from .plants.base import PlantModel
from .plants.simulate import SimulatorConfig, simulate_implicit, simulate_mol

__all__ = [
    "ShootingProblem",
    "ShootingObjective",
    "ShootingStats",
    "model_evaluator",
    "shooting_solve",
    "shooting_closed_loop",
    "FD_STEP",
]

FD_STEP = 1e-6
SHOOTING_SIM = SimulatorConfig(rtol=1e-8, atol=1e-10)


def model_evaluator(plant: PlantModel, model: str, net: TrainedNetwork | None = None):
    """One-step map ``(x, u) -> x_next`` for ``model`` in {mol, implicit, pinn, picnn, net}."""
    if model == "mol":
        return lambda x, u: simulate_mol(plant, x, u, config=SHOOTING_SIM)
    if model == "implicit":
        return lambda x, u: simulate_implicit(plant, x, u, config=SHOOTING_SIM)
    if model in ("pinn", "picnn", "net"):
        if net is None:
            raise ValueError(f"model {model!r} needs a trained network")
        return net.step
    raise ValueError(f"unknown shooting model {model!r}")


@dataclass
class ShootingProblem:
    step: object
    plant: PlantModel
    cfg: NmpcConfig
    x0: np.ndarray
    u_prev: np.ndarray
    setpoints: np.ndarray

    @property
    def n_decision(self) -> int:
        return self.plant.n_u * self.cfg.M


class ShootingObjective(ExternalObjective):
    """Tracking objective of the rolled-out model with forward-difference gradients."""

    def __init__(self, sp: ShootingProblem, rel_step: float = FD_STEP):
        self.sp = sp
        self.rel_step = rel_step
        self.n_evals = 0
        self._last = None
        cfg, plant = sp.cfg, sp.plant
        self._sel = [(plant.state_names.index(n), node - 1) for n, node in cfg.outputs]

    def moves(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float).reshape(self.sp.cfg.M, self.sp.plant.n_u)

    def value(self, z) -> float:
        z = np.asarray(z, dtype=float)
        if self._last is not None and np.array_equal(self._last[0], z):
            return self._last[1]
        sp, cfg = self.sp, self.sp.cfg
        U = self.moves(z)
        L = np.array(cfg.output_weights)
        Wm = np.array(cfg.move_weights)
        x = np.asarray(sp.x0, dtype=float).reshape(sp.plant.shape)
        total = 0.0
        for k in range(cfg.P + 1):
            y = np.array([x[i, v] for i, v in self._sel])
            total += float(np.sum(L * (sp.setpoints - y) ** 2))
            if k < cfg.P:
                x = self.sp.step(x, U[min(k, cfg.M - 1)])
        du = np.diff(np.vstack([sp.u_prev, U]), axis=0)
        total += float(np.sum(Wm * du * du))
        self.n_evals += 1
        self._last = (z.copy(), total)
        return total

    def gradient(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        f0 = self.value(z)
        lb = np.tile(self.sp.plant.u_lb, self.sp.cfg.M)
        ub = np.tile(self.sp.plant.u_ub, self.sp.cfg.M)
        g = np.empty_like(z)
        for i in range(len(z)):
            h = self.rel_step * max(1.0, abs(z[i]))
            if z[i] + h > ub[i]:
                h = -h
            zp = z.copy()
            zp[i] += h
            g[i] = (self._value_nocache(zp) - f0) / h
        return g

    def _value_nocache(self, z):
        saved = self._last
        out = self.value(z)
        self._last = saved
        return out


@dataclass
class ShootingStats:
    status: str
    iterations: int
    objective_evaluations: int
    wall_clock_seconds: float
    n_decision: int
    result: SolveResult


def _problem(sp: ShootingProblem, init=None) -> tuple[NlpProblem, ShootingObjective]:
    p = NlpProblem()
    plant, cfg = sp.plant, sp.cfg
    init = np.tile(sp.u_prev, (cfg.M, 1)) if init is None else np.asarray(init, float).reshape(cfg.M, plant.n_u)
    for j in range(cfg.M):
        for l in range(plant.n_u):
            p.variables.add(f"u[{j},{plant.control_names[l]}]", plant.u_lb[l], plant.u_ub[l], init[j, l],
                            kind="control")
    obj = ShootingObjective(sp)
    p.set_objective(obj)
    return p, obj


def shooting_solve(sp: ShootingProblem, opts: SolverOptions | None = None, init=None,
                   warm: SolveResult | None = None) -> tuple[np.ndarray, float, ShootingStats]:
    """Optimize the move sequence; returns ``(moves (M, n_u), objective, stats)``."""
    opts = opts or SolverOptions(hessian_mode="bfgs")
    sp.plant.check_control(sp.u_prev, tol=1e-12)
    p, obj = _problem(sp, init)
    t0 = time.perf_counter()
    res = solve(p, opts, warm)
    stats = ShootingStats(res.status, res.iterations, obj.n_evals, time.perf_counter() - t0,
                          count_variables(p)["total_vars"], res)
    return obj.moves(res.x), float(obj.value(res.x)), stats


def shooting_closed_loop(plant: PlantModel, cfg: NmpcConfig, schedule: Schedule, horizon_steps: int, x0,
                         model: str = "mol", net: TrainedNetwork | None = None, u0=None,
                         opts: SolverOptions | None = None, progress=None) -> ClosedLoopTrace:
    """Receding-horizon loop with the shooting controller."""
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be at least 1")
    step = model_evaluator(plant, model, net)
    u_prev = plant.u_nominal.copy() if u0 is None else np.asarray(u0, dtype=float)
    x = np.asarray(x0, dtype=float).reshape(plant.shape)
    names = [f"{n}@{node}" for n, node in cfg.outputs]
    trace = ClosedLoopTrace(plant.name, f"shooting-{model}", names, list(plant.control_names),
                            list(plant.state_names), plant.n_fe,
                            counts={"decision_vars": plant.n_u * cfg.M, "aux_vars": 0,
                                    "total_vars": plant.n_u * cfg.M, "constraints": 0},
                            model=model if model in ("mol", "implicit") else model_tag(net))
    init = None
    for t in range(horizon_steps):
        sp_vals = schedule.at(t)
        sp = ShootingProblem(step, plant, cfg, x, u_prev, sp_vals)
        U, f, stats = shooting_solve(sp, opts, init)
        if stats.result.success:
            u_apply = np.clip(U[0], plant.u_lb, plant.u_ub)
            init = np.vstack([U[1:], U[-1:]])
        else:
            u_apply = u_prev.copy()
            init = None
        trace.records.append(TraceRecord(t, sp_vals, _output_values(plant, cfg, x), u_apply, x.copy(),
                                         stats.status, stats.iterations, f, stats.wall_clock_seconds))
        if progress is not None:
            progress(t, stats)
        x = truth_step(plant, x, u_apply)
        u_prev = u_apply
    return trace

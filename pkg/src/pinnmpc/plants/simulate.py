"""Ground-truth simulators: adaptive method of lines and implicit Euler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from ..expr_graph import ExprDomainError, Tape, Variables
from .base import PlantModel

__all__ = [
    "SimulatorConfig",
    "SimulationError",
    "integrate_rk45",
    "simulate_mol",
    "simulate_implicit",
    "ImplicitStepper",
    "steady_state",
]


@dataclass(frozen=True)
class SimulatorConfig:
    rtol: float = 1e-8
    atol: float = 1e-10
    newton_tol: float = 1e-10
    newton_max_iter: int = 50

    def __post_init__(self):
        if min(self.rtol, self.atol, self.newton_tol) <= 0 or self.newton_max_iter < 1:
            raise ValueError("simulator tolerances must be positive")


class SimulationError(RuntimeError):
    pass


def integrate_rk45(fun, x0, t_end: float, rtol: float = 1e-8, atol: float = 1e-10) -> np.ndarray:
    """Integrate ``dx/dt = fun(x)`` over ``[0, t_end]`` with Dormand-Prince 5(4)."""
    x0 = np.asarray(x0, dtype=float)
    if t_end == 0.0:
        return x0.copy()
    sol = solve_ivp(lambda t, y: fun(y), (0.0, t_end), x0.ravel(), method="RK45",
                    rtol=rtol, atol=atol, t_eval=None, dense_output=False)
    if not sol.success:
        steps = np.diff(sol.t)
        min_step = float(steps.min()) if len(steps) else 0.0
        raise SimulationError(f"adaptive integration failed: {sol.message} (min step {min_step:.3e})")
    return sol.y[:, -1].reshape(x0.shape)


def simulate_mol(plant: PlantModel, x0, u, dt: float | None = None,
                 config: SimulatorConfig | None = None) -> np.ndarray:
    """Integrate the spatially discretized plant over one sampling interval."""
    config = config or SimulatorConfig()
    dt = plant.dt if dt is None else dt
    x0 = np.asarray(x0, dtype=float).reshape(plant.shape)
    u = np.asarray(u, dtype=float)
    n_x, n_fe = plant.shape
    return integrate_rk45(lambda y: plant.time_derivative(y.reshape(n_x, n_fe), u).ravel(),
                          x0, dt, config.rtol, config.atol)


class ImplicitStepper:
    """Damped Newton solver for one implicit-Euler step of a plant.

    The residual is compiled once as an expression tape over
    ``[x_next, x_k, u, 1/dt]``; only the ``x_next`` columns of its Jacobian
    are used.
    """

    def __init__(self, plant: PlantModel):
        self.plant = plant
        v = Variables()
        shape = plant.shape
        xn = v.add_array("x_next", shape)
        xk = v.add_array("x_k", shape)
        u = [v.add(f"u[{j}]") for j in range(plant.n_u)]
        inv_dt = v.add("inv_dt")
        res = plant.residual(xk, xn, u, inv_dt=inv_dt)
        self.n = plant.n_x * plant.n_fe
        self.n_vars = v.n
        self.tape = Tape(list(res.ravel()), v.n)

    def _point(self, x_next, x_k, u, inv_dt):
        return np.concatenate([np.ravel(x_next), np.ravel(x_k), np.ravel(u), [inv_dt]])

    def residual(self, x_next, x_k, u, inv_dt) -> np.ndarray:
        return self.tape.output_values(self._point(x_next, x_k, u, inv_dt))

    def solve(self, x_k, u, inv_dt, guess=None, tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
        x_k = np.asarray(x_k, dtype=float).ravel()
        x = (x_k if guess is None else np.asarray(guess, dtype=float).ravel()).copy()
        u = np.asarray(u, dtype=float)
        r = self.residual(x, x_k, u, inv_dt)
        norm = float(np.max(np.abs(r)))
        for _ in range(max_iter):
            if norm <= tol:
                return x.reshape(self.plant.shape)
            jac = self.tape.jacobian(self._point(x, x_k, u, inv_dt))[:, :self.n].tocsc()
            try:
                step = spla.splu(jac).solve(-r)
            except RuntimeError as exc:
                raise SimulationError(f"singular Newton matrix: {exc}") from exc
            alpha = 1.0
            while True:
                x_try = x + alpha * step
                try:
                    r_try = self.residual(x_try, x_k, u, inv_dt)
                    n_try = float(np.max(np.abs(r_try)))
                except (ExprDomainError, FloatingPointError):
                    n_try = np.inf
                if n_try < norm or (alpha < 1e-3 and np.isfinite(n_try) and n_try <= norm * (1 + 1e-12)):
                    break
                alpha *= 0.5
                if alpha < 1e-10:
                    raise SimulationError(f"Newton line search stalled at residual {norm:.3e}")
            x, r, norm = x_try, r_try, n_try
        if norm <= tol:
            return x.reshape(self.plant.shape)
        raise SimulationError(f"Newton did not converge: residual {norm:.3e} after {max_iter} iterations")


def _stepper(plant: PlantModel) -> ImplicitStepper:
    if plant._step_tape is None:
        plant._step_tape = ImplicitStepper(plant)
    return plant._step_tape


def simulate_implicit(plant: PlantModel, x0, u, dt: float | None = None,
                      config: SimulatorConfig | None = None, guess=None) -> np.ndarray:
    """One backward-Euler step solved by damped Newton on the transcription residual."""
    config = config or SimulatorConfig()
    dt = plant.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    return _stepper(plant).solve(x0, u, 1.0 / dt, guess, config.newton_tol, config.newton_max_iter)


def steady_state(plant: PlantModel, u, guess=None, tol: float = 1e-10) -> np.ndarray:
    """Steady profile under constant ``u``.

    Pseudo-transient continuation (implicit steps of growing length) followed
    by a Newton polish of the pure spatial residual.
    """
    st = _stepper(plant)
    u = np.asarray(u, dtype=float)
    if guess is None:
        inlet = np.array([float(v) for v in plant.inlet(list(u))])
        guess = np.repeat(inlet[:, None], plant.n_fe, axis=1)
    x = np.asarray(guess, dtype=float).reshape(plant.shape)
    dt = plant.dt
    for _ in range(60):
        x_new = st.solve(x, u, 1.0 / dt, guess=x, tol=tol)
        change = float(np.max(np.abs(x_new - x)))
        x = x_new
        if change <= 1e-9 * (1.0 + float(np.max(np.abs(x)))):
            break
        dt *= 3.0
    return st.solve(x, u, 0.0, guess=x, tol=tol)

"""Common structure of the plug-flow reactor models.

Every plant is a 1D transport-reaction system on a uniform grid of ``n_fe``
nodes ``z_v = v * dz`` (``v = 1..n_fe``) with an inlet ghost node ``v = 0``
supplied by the controls. Per state ``i`` the semi-discrete dynamics are

    d h_i(x_v) / dt = -a_i(u) (x_{i,v} - x_{i,v-1}) / dz + s_i(x_v, u)

where ``h`` is the holdup map (identity except for the reformer), ``a`` the
transport velocity and ``s`` the local source term. The formulas are written
once and evaluated on floats, numpy arrays, expression nodes or dual numbers.
"""

from __future__ import annotations

import numpy as np

__all__ = ["PlantModel"]


class PlantModel:
    """Base class; subclasses define ``inlet``, ``velocity`` and ``source``."""

    name = "plant"
    supports_mol = True

    def __init__(self, state_names, control_names, x_lb, x_ub, u_lb, u_ub, u_nominal,
                 length, n_fe, dt, params=None):
        self.state_names = list(state_names)
        self.control_names = list(control_names)
        if len(set(self.state_names)) != len(self.state_names):
            raise ValueError("state names must be unique")
        if len(set(self.control_names)) != len(self.control_names):
            raise ValueError("control names must be unique")
        self.x_lb = np.asarray(x_lb, dtype=float)
        self.x_ub = np.asarray(x_ub, dtype=float)
        self.u_lb = np.asarray(u_lb, dtype=float)
        self.u_ub = np.asarray(u_ub, dtype=float)
        self.u_nominal = np.asarray(u_nominal, dtype=float)
        for arr in (self.x_lb, self.x_ub, self.u_lb, self.u_ub):
            if not np.all(np.isfinite(arr)):
                raise ValueError("plant bounds must be finite")
        if n_fe < 2:
            raise ValueError("n_fe must be at least 2")
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.length = float(length)
        self.n_fe = int(n_fe)
        self.dt = float(dt)
        self.params = dict(params or {})
        self._step_tape = None

    @property
    def n_x(self) -> int:
        return len(self.state_names)

    @property
    def n_u(self) -> int:
        return len(self.control_names)

    @property
    def dz(self) -> float:
        return self.length / self.n_fe

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.n_fe)

    def nodes(self) -> np.ndarray:
        return self.dz * np.arange(1, self.n_fe + 1)

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-node bounds, shape ``(n_x, n_fe)``."""
        lo = np.repeat(self.x_lb[:, None], self.n_fe, axis=1)
        hi = np.repeat(self.x_ub[:, None], self.n_fe, axis=1)
        return lo, hi

    def with_grid(self, n_fe: int | None = None, dt: float | None = None) -> "PlantModel":
        """Copy of this plant on another grid."""
        raise NotImplementedError

    # -- model pieces (generic over value types) ---------------------------
    def inlet(self, u) -> list:
        raise NotImplementedError

    def velocity(self, u) -> list:
        raise NotImplementedError

    def source(self, xs, u) -> list:
        raise NotImplementedError

    def holdup(self, xs, u) -> list:
        return list(xs)

    def node_rhs(self, xs, xs_prev, u) -> list:
        """Spatial operator at one node (or vectorized over nodes)."""
        a = self.velocity(u)
        s = self.source(xs, u)
        inv_dz = 1.0 / self.dz
        return [-(a[i] * inv_dz) * (xs[i] - xs_prev[i]) + s[i] for i in range(self.n_x)]

    def residual_nodes(self, h_k, xs, xs_prev, u, inv_dt) -> list:
        """Implicit-Euler residual given the holdup at the current step."""
        h_next = self.holdup(xs, u)
        f = self.node_rhs(xs, xs_prev, u)
        return [(h_next[i] - h_k[i]) * inv_dt - f[i] for i in range(self.n_x)]

    # -- whole-profile evaluation ----------------------------------------
    def _prev_numeric(self, x_next, u):
        inlet = self.inlet(u)
        prev = []
        for i in range(self.n_x):
            first = np.broadcast_to(np.asarray(inlet[i], dtype=float), x_next[i, :1].shape[1:])[None]
            prev.append(np.concatenate([first, x_next[i, :-1]], axis=0))
        return prev

    def residual(self, x_k, x_next, u, dt: float | None = None, inv_dt=None):
        """Residual ``(h(x_next) - h(x_k))/dt - F(x_next, u)`` per state and node.

        ``x_k`` and ``x_next`` have shape ``(n_x, n_fe)`` (optionally with a
        trailing batch axis, in which case each control has shape
        ``(batch,)``) or are object arrays of expressions.
        """
        if inv_dt is None:
            inv_dt = 1.0 / (self.dt if dt is None else dt)
        x_k = np.asarray(x_k)
        x_next = np.asarray(x_next)
        if x_k.shape[:2] != self.shape or x_next.shape[:2] != self.shape:
            raise ValueError(f"profiles must have leading shape {self.shape}")
        symbolic = x_next.dtype == object or x_k.dtype == object or not _is_numeric(inv_dt)
        if symbolic or any(not _is_numeric(c) for c in u):
            out = np.empty(self.shape, dtype=object)
            inlet = self.inlet(u)
            for v in range(self.n_fe):
                xs = [x_next[i, v] for i in range(self.n_x)]
                prev = [inlet[i] if v == 0 else x_next[i, v - 1] for i in range(self.n_x)]
                hk = self.holdup([x_k[i, v] for i in range(self.n_x)], u)
                r = self.residual_nodes(hk, xs, prev, u, inv_dt)
                for i in range(self.n_x):
                    out[i, v] = r[i]
            return out
        u = [np.asarray(c, dtype=float) for c in u]
        xs = [x_next[i] for i in range(self.n_x)]
        prev = self._prev_numeric(x_next, u)
        hk = self.holdup([x_k[i] for i in range(self.n_x)], u)
        return np.array(self.residual_nodes(hk, xs, prev, u, inv_dt))

    def time_derivative(self, x, u) -> np.ndarray:
        """Method-of-lines right-hand side ``dx/dt`` on the grid."""
        if not self.supports_mol:
            raise NotImplementedError(f"{self.name} has a singular holdup map; use implicit stepping")
        x = np.asarray(x, dtype=float).reshape(self.shape)
        u = [float(c) for c in u]
        prev = self._prev_numeric(x, u)
        return np.array(self.node_rhs([x[i] for i in range(self.n_x)], prev, u))

    def check_state(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise ValueError(f"state profile must have shape {self.shape}, got {x.shape}")
        lo, hi = self.state_bounds()
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            raise ValueError("state profile outside bounds")

    def check_control(self, u, tol: float = 0.0):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_u,):
            raise ValueError(f"control must have length {self.n_u}")
        if np.any(u < self.u_lb - tol) or np.any(u > self.u_ub + tol):
            raise ValueError("control outside bounds")


def _is_numeric(c) -> bool:
    return isinstance(c, (int, float, np.floating, np.ndarray)) and not (
        isinstance(c, np.ndarray) and c.dtype == object)

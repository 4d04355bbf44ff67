"""Isothermal and non-isothermal liquid-phase plug-flow reactors."""

from __future__ import annotations

import numpy as np

from ..expr_graph import exp
from .base import PlantModel

__all__ = ["IsothermalPFR", "NonIsothermalPFR", "b1_rhs", "b2_rhs", "arrhenius_rate"]


class IsothermalPFR(PlantModel):
    """Second-order reaction ``dC/dt = -F dC/dz - k C^2`` with inlet ``C(0) = C_in``.

    Controls are ``u = [C_in, F]``.
    """

    name = "b1"

    def __init__(self, params: dict, n_fe: int | None = None, dt: float | None = None):
        self._spec = params
        super().__init__(
            state_names=["C"],
            control_names=["C_in", "F"],
            x_lb=[params["bounds"]["C"][0]], x_ub=[params["bounds"]["C"][1]],
            u_lb=[params["bounds"]["C_in"][0], params["bounds"]["F"][0]],
            u_ub=[params["bounds"]["C_in"][1], params["bounds"]["F"][1]],
            u_nominal=params["nominal_controls"],
            length=params["length"],
            n_fe=n_fe or params["n_fe"],
            dt=dt or params["dt"],
            params=params,
        )
        self.k_rxn = float(params["k_rxn"])

    def with_grid(self, n_fe=None, dt=None):
        return IsothermalPFR(self._spec, n_fe or self.n_fe, dt or self.dt)

    def inlet(self, u):
        return [u[0]]

    def velocity(self, u):
        return [u[1]]

    def source(self, xs, u):
        c = xs[0]
        return [-self.k_rxn * (c * c)]

    def analytic_steady_outlet(self, c_in: float, flow: float) -> float:
        """Exact steady outlet ``C_in / (1 + k C_in L / F)`` of the continuous PDE."""
        return c_in / (1.0 + self.k_rxn * c_in * self.length / flow)


def arrhenius_rate(T, k0: float, e_a: float, r_gas: float):
    return k0 * exp(-(e_a / r_gas) * (1.0 / T))


class NonIsothermalPFR(PlantModel):
    """Exothermic PFR with a cooling/heating jacket.

    States ``[C, T]``, controls ``u = [C_in, F, T_a, T_in]``. The energy
    balance is divided through by ``rho*Cp`` so both states share the
    transport velocity ``F``.
    """

    name = "b2"

    def __init__(self, params: dict, n_fe: int | None = None, dt: float | None = None):
        self._spec = params
        b = params["bounds"]
        super().__init__(
            state_names=["C", "T"],
            control_names=["C_in", "F", "T_a", "T_in"],
            x_lb=[b["C"][0], b["T"][0]], x_ub=[b["C"][1], b["T"][1]],
            u_lb=[b["C_in"][0], b["F"][0], b["T_a"][0], b["T_in"][0]],
            u_ub=[b["C_in"][1], b["F"][1], b["T_a"][1], b["T_in"][1]],
            u_nominal=params["nominal_controls"],
            length=params["length"],
            n_fe=n_fe or params["n_fe"],
            dt=dt or params["dt"],
            params=params,
        )
        self.rho_cp = float(params["rho_cp"])
        self.ua = float(params["Ua"])
        self.dh = float(params["dH"])
        self.k0 = float(params["k0"])
        self.e_a = float(params["E_A"])
        self.r_gas = float(params["R"])

    def with_grid(self, n_fe=None, dt=None):
        return NonIsothermalPFR(self._spec, n_fe or self.n_fe, dt or self.dt)

    def inlet(self, u):
        return [u[0], u[3]]

    def velocity(self, u):
        return [u[1], u[1]]

    def rate_constant(self, T):
        return arrhenius_rate(T, self.k0, self.e_a, self.r_gas)

    def source(self, xs, u):
        c, t = xs
        rate = self.rate_constant(t) * (c * c)
        inv = 1.0 / self.rho_cp
        heat = (self.ua * inv) * (u[2] - t) - (self.dh * inv) * rate
        return [-rate, heat]


def b1_rhs(plant: IsothermalPFR, c_profile, c_in: float, flow: float) -> np.ndarray:
    """Method-of-lines time derivative of the isothermal reactor."""
    return plant.time_derivative(np.asarray(c_profile, float).reshape(1, -1), [c_in, flow])[0]


def b2_rhs(plant: NonIsothermalPFR, c_profile, t_profile, controls) -> tuple[np.ndarray, np.ndarray]:
    """Method-of-lines time derivatives ``(dC/dt, dT/dt)`` of the jacketed reactor."""
    x = np.vstack([np.asarray(c_profile, float), np.asarray(t_profile, float)])
    d = plant.time_derivative(x, controls)
    return d[0], d[1]

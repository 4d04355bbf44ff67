"""Isothermal, isobaric methane steam-reforming packed-bed reactor.

States are the molar flows ``F_s`` of ``[CH4, H2O, H2, CO2, CO]`` (mmol/s)
along the bed (cm). Controls are ``u = [F_CH4_in, F_H2O_in, T]``: the two
feed flows and the uniform bed temperature (K). H2, CO2 and CO enter at
fixed small flows so the hydrogen partial pressure never vanishes.

The holdup is the gas-phase concentration ``C_s = y_s P / (R T)`` with
``y_s = F_s / sum(F)``. Rates follow Langmuir-Hinshelwood kinetics for
steam reforming (CH4 + H2O = CO + 3 H2), water-gas shift
(CO + H2O = CO2 + H2) and direct reforming (CH4 + 2 H2O = CO2 + 4 H2).
"""

from __future__ import annotations

import math

import numpy as np

from ..expr_graph import exp, log
from .base import PlantModel

__all__ = ["SteamReformer", "ReformerParams", "reformer_kinetics", "b3_rhs", "ATOMS"]

SPECIES = ("CH4", "H2O", "H2", "CO2", "CO")

# atoms (C, H, O) per molecule, in species order
ATOMS = np.array([
    [1, 4, 0],
    [0, 2, 1],
    [0, 2, 0],
    [1, 0, 2],
    [1, 0, 1],
], dtype=float)


class ReformerParams:
    """Physical constants converted to the units used by the model.

    Pressures in atm, flows in mmol/s, lengths in cm, rates in
    mmol/(g_cat s). Kinetic and adsorption constants are stored in the
    units of the source tables (bar, kmol/(kg h)) and converted here.
    """

    def __init__(self, data: dict):
        self.data = data
        spec = data["reactor"]
        self.area = float(spec["A"])
        self.rho_c = float(spec["rho_c"])
        self.p_tot = float(spec["P_tot"])
        self.r_gas_kj = float(data["constants"]["R_kJ"])
        self.r_gas_vol = float(data["constants"]["R_cm3_atm_per_mmol"])
        self.t_ref = float(data["constants"]["T_ref"])
        self.nu = np.array(data["stoichiometry"]["nu"], dtype=float)
        bar_per_atm = float(data["constants"]["bar_per_atm"])
        rate_conv = float(data["kinetics"]["rate_unit_to_mmol_per_g_s"])
        kin = data["kinetics"]
        # exponents of pressure (bar) carried by each rate constant
        p_exp = np.array(kin["pressure_exponent"], dtype=float)
        self.k0 = np.array(kin["k0"], dtype=float) * rate_conv * bar_per_atm ** p_exp
        self.e_a = np.array(kin["E_A"], dtype=float)
        ads = data["adsorption"]
        self.b_ads = {s: float(ads[s]["B"]) * bar_per_atm ** float(ads[s]["pressure_exponent"])
                      for s in ("CH4", "H2O", "H2", "CO")}
        self.dh_ads = {s: float(ads[s]["dH"]) for s in ("CH4", "H2O", "H2", "CO")}
        thermo = data["thermo"]
        self.cp = np.array([thermo["cp"][s] for s in SPECIES], dtype=float)  # J/(mol K)
        self.dhf = np.array([thermo["dHf"][s] for s in SPECIES], dtype=float)  # kJ/mol
        self.dgf = np.array([thermo["dGf"][s] for s in SPECIES], dtype=float)
        self.fixed_inlet = np.array([data["fixed_inlet"][s] for s in ("H2", "CO2", "CO")], dtype=float)
        self.p_h2_floor = float(data["guards"]["p_h2_floor"])

    def with_zero_kinetics(self) -> "ReformerParams":
        """Copy with all rate constants zeroed (pure transport)."""
        other = ReformerParams(self.data)
        other.k0 = np.zeros_like(self.k0)
        return other

    def dg0(self) -> np.ndarray:
        return self.nu @ self.dgf

    def dh0(self) -> np.ndarray:
        return self.nu @ self.dhf

    def k_eq0(self) -> np.ndarray:
        return np.exp(-self.dg0() / (self.r_gas_kj * self.t_ref))

    def ln_k_eq(self, T):
        """Closed-form van 't Hoff integration with polynomial heat capacities.

        ``d ln K / dT = dH(T) / (R T^2)`` where
        ``dH(T) = dH0 + int_Tref^T sum_s nu_s Cp_s dT``.
        Works on floats, arrays and expressions.
        """
        dcp = self.nu @ self.cp * 1e-3  # kJ/(mol K^(i+1)), shape (3, 5)
        tr = self.t_ref
        out = []
        for j in range(3):
            c = dcp[j]
            a0 = self.dh0()[j] - sum(c[i] * tr ** (i + 1) / (i + 1) for i in range(5))
            val = math.log(self.k_eq0()[j]) + (a0 / self.r_gas_kj) * (1.0 / tr) \
                - (a0 / self.r_gas_kj) * (1.0 / T) \
                + (c[0] / self.r_gas_kj) * (log(T) - math.log(tr))
            for i in range(1, 5):
                val = val + (c[i] / (self.r_gas_kj * i * (i + 1))) * (T ** i - tr ** i)
            out.append(val)
        return out


def reformer_kinetics(flows, T, params: ReformerParams, check: bool = True) -> dict:
    """Rates ``RR'_j`` (mmol/(g s)) and intermediates at one or more nodes.

    ``flows`` is a sequence of five flow values (floats, arrays or
    expressions) in species order. Numeric inputs are checked against the
    hydrogen partial-pressure floor.
    """
    total = flows[0] + flows[1] + flows[2] + flows[3] + flows[4]
    inv_total = 1.0 / total
    y = [f * inv_total for f in flows]
    p = [yi * params.p_tot for yi in y]
    p_ch4, p_h2o, p_h2, p_co2, p_co = p
    if check and isinstance(p_h2, (float, np.floating, np.ndarray)):
        if np.any(np.asarray(p_h2) < params.p_h2_floor):
            raise ValueError(f"hydrogen partial pressure below floor {params.p_h2_floor} atm")
    inv_rt = 1.0 / (params.r_gas_kj * T)
    k = [params.k0[j] * exp(-params.e_a[j] * inv_rt) for j in range(3)]
    ka = {s: params.b_ads[s] * exp(-params.dh_ads[s] * inv_rt) for s in params.b_ads}
    ln_keq = params.ln_k_eq(T)
    keq = [exp(v) for v in ln_keq]
    den = 1.0 + ka["CO"] * p_co + ka["H2"] * p_h2 + ka["CH4"] * p_ch4 + ka["H2O"] * p_h2o / p_h2
    den2 = den * den
    rr1 = k[0] / p_h2 ** 2.5 * (p_ch4 * p_h2o - p_h2 ** 3 * p_co / keq[0]) / den2
    rr2 = k[1] / p_h2 * (p_co * p_h2o - p_h2 * p_co2 / keq[1]) / den2
    rr3 = k[2] / p_h2 ** 3.5 * (p_ch4 * p_h2o ** 2 - p_h2 ** 4 * p_co2 / keq[2]) / den2
    return {"y": y, "P": p, "k": k, "K_a": ka, "K_eq": keq, "DEN": den, "RR": [rr1, rr2, rr3]}


class SteamReformer(PlantModel):
    name = "b3"
    supports_mol = False

    def __init__(self, params: dict, n_fe: int | None = None, dt: float | None = None,
                 reformer: ReformerParams | None = None):
        self._spec = params
        self.rp = reformer or ReformerParams(params)
        b = params["bounds"]
        x_lb = [b["flows"][s][0] for s in SPECIES]
        x_ub = [b["flows"][s][1] for s in SPECIES]
        super().__init__(
            state_names=["F_" + s for s in SPECIES],
            control_names=["F_CH4_in", "F_H2O_in", "T"],
            x_lb=x_lb, x_ub=x_ub,
            u_lb=[b["F_CH4_in"][0], b["F_H2O_in"][0], b["T"][0]],
            u_ub=[b["F_CH4_in"][1], b["F_H2O_in"][1], b["T"][1]],
            u_nominal=params["nominal_controls"],
            length=params["reactor"]["length"],
            n_fe=n_fe or params["n_fe"],
            dt=dt or params["dt"],
            params=params,
        )
        self.check_kinetics = True

    def with_grid(self, n_fe=None, dt=None):
        return SteamReformer(self._spec, n_fe or self.n_fe, dt or self.dt, self.rp)

    def transport_only(self) -> "SteamReformer":
        return SteamReformer(self._spec, self.n_fe, self.dt, self.rp.with_zero_kinetics())

    def inlet(self, u):
        h2, co2, co = self.rp.fixed_inlet
        return [u[0], u[1], float(h2), float(co2), float(co)]

    def velocity(self, u):
        a = 1.0 / self.rp.area
        return [a] * 5

    def holdup(self, xs, u):
        total = xs[0] + xs[1] + xs[2] + xs[3] + xs[4]
        scale = (self.rp.p_tot / self.rp.r_gas_vol) * (1.0 / u[2])
        factor = scale / total
        return [f * factor for f in xs]

    def source(self, xs, u):
        kin = reformer_kinetics(xs, u[2], self.rp, check=self.check_kinetics)
        rr = kin["RR"]
        out = []
        for s in range(5):
            terms = [(self.rp.rho_c * self.rp.nu[j, s]) * rr[j] for j in range(3) if self.rp.nu[j, s] != 0.0]
            acc = terms[0]
            for t in terms[1:]:
                acc = acc + t
            out.append(acc)
        return out


def b3_rhs(plant: SteamReformer, flows, controls) -> np.ndarray:
    """Right-hand side ``-(1/A) dF/dz + rho_c nu^T RR`` of the concentration balances.

    Returns ``dC_s/dt`` on the grid (shape ``(5, n_fe)``); the flow derivative
    is not unique because the holdup map is homogeneous of degree zero.
    """
    x = np.asarray(flows, dtype=float).reshape(plant.shape)
    u = [float(c) for c in controls]
    prev = plant._prev_numeric(x, u)
    return np.array(plant.node_rhs([x[i] for i in range(5)], prev, u))

"""Benchmark configurations: network layouts, controller settings, initial states and schedules.

Two presets exist. ``full`` uses the nominal grids; ``desk`` shrinks the
reformer to ``n_fe = 10`` and ``P = 10`` and reduces training budgets so the
whole suite runs on a laptop.
"""

from __future__ import annotations

import csv
import functools
from importlib import resources

import numpy as np
from scipy.optimize import brentq

from .embedding import EmbeddingKind
from .nlp_solver import SolverOptions
from .nmpc import NmpcConfig, Schedule
from .nn_engine import Conv1d, Dense, Flatten, NetworkSpec
from .pinn_training import TrainConfig
from .plants import make_plant
from .plants.base import PlantModel
from .plants.simulate import steady_state

__all__ = [
    "PRESETS",
    "BENCHMARKS",
    "ARCHITECTURES",
    "network_spec",
    "plant_for",
    "nmpc_config",
    "nmpc_solver_options",
    "NMPC_MU_INIT",
    "train_config",
    "initial_condition",
    "default_schedule",
    "horizon_steps",
    "initial_state_band",
    "write_band_csv",
    "check_arch",
]

PRESETS = ("desk", "full")
BENCHMARKS = ("b1", "b2", "b3")
ARCHITECTURES = ("pinn", "picnn")

_HORIZON = {"b1": 100, "b2": 150, "b3": 50}


def check_arch(benchmark: str, arch: str):
    """Reject architecture/benchmark pairs without a working surrogate."""
    if benchmark not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {benchmark!r}")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    if arch == "pinn" and benchmark != "b1":
        raise ValueError(f"no dense PINN is provided for {benchmark}: a dense network could not be trained "
                         "to an acceptable physics loss on this plant; use the convolutional 'picnn'")


def plant_for(benchmark: str, preset: str = "desk") -> PlantModel:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    if benchmark == "b3" and preset == "desk":
        return make_plant("b3", n_fe=10)
    return make_plant(benchmark)


def network_spec(benchmark: str, arch: str, plant: PlantModel) -> NetworkSpec:
    check_arch(benchmark, arch)
    n_x, n_fe, n_u = plant.n_x, plant.n_fe, plant.n_u
    n_out = n_x * n_fe
    if arch == "pinn":
        n_in = n_out + n_u
        layers = [Dense(n_in, 24)] + [Dense(24, 24) for _ in range(5)] + [Dense(24, n_out, "linear")]
        return NetworkSpec(tuple(layers), "flattened", n_x, n_fe, n_u)
    c_in = n_x + n_u
    if benchmark in ("b1", "b2"):
        length = n_fe - 2 * 3
        layers = [Conv1d(c_in, 32, 4), Conv1d(32, 32, 4), Flatten(), Dense(32 * length, n_out, "linear")]
    else:
        width = 16
        length = n_fe - 3 * 3
        layers = [Conv1d(c_in, width, 4), Conv1d(width, width, 4), Conv1d(width, width, 4), Flatten(),
                  Dense(width * length, n_out, "linear")]
    return NetworkSpec(tuple(layers), "channels", n_x, n_fe, n_u)


def train_config(benchmark: str, arch: str, preset: str = "desk", seed: int = 0) -> TrainConfig:
    check_arch(benchmark, arch)
    if preset == "full":
        return TrainConfig(epochs=1000, batch_size=256, n_samples=100_000, seed=seed)
    epochs = {"b1": 1000, "b2": 300, "b3": 200}[benchmark]
    if arch == "picnn" and benchmark == "b1":
        epochs = 400
    return TrainConfig(epochs=epochs, batch_size=64, n_samples=10_000, seed=seed)


# small initial barrier: tracking objectives are O(1e-3) and the embeddings add many bounded
# auxiliaries, so a large barrier pulls the first iterates towards the analytic center
NMPC_MU_INIT = 1e-4


def nmpc_solver_options(**overrides) -> SolverOptions:
    """Solver options used for closed-loop NMPC solves unless a scenario overrides them."""
    return SolverOptions(**{"mu_init": NMPC_MU_INIT, **overrides})


def nmpc_config(benchmark: str, variant="mechanistic", preset: str = "desk", solver: SolverOptions | None = None,
                aux_init: str = "forward") -> NmpcConfig:
    plant = plant_for(benchmark, preset)
    last = plant.n_fe
    solver = solver or nmpc_solver_options()
    if benchmark == "b1":
        return NmpcConfig(40, 10, (("C", last),), (1.0,), (1.0, 1.0), EmbeddingKind.parse(variant), solver, aux_init)
    if benchmark == "b2":
        # controls [C_in, F, T_a, T_in]
        return NmpcConfig(40, 10, (("C", last), ("T", last)), (2.77e-7, 2.5e-3),
                          (2.77e-7, 5.19e4, 2.5e-3, 2.5e-3), EmbeddingKind.parse(variant), solver, aux_init)
    P = 10 if preset == "desk" else 30
    return NmpcConfig(P, 10, (("F_CH4", last), ("F_H2", last), ("F_CO", last)), (0.379, 0.176, 11.7),
                      (0.321, 0.107, 1.18e-3), EmbeddingKind.parse(variant), solver, aux_init)


def horizon_steps(benchmark: str) -> int:
    return _HORIZON[benchmark]


@functools.lru_cache(maxsize=None)
def _b3_start(n_fe: int) -> tuple:
    """Feed scale that puts the steady hydrogen outlet at its initial setpoint."""
    plant = make_plant("b3", n_fe=n_fe)
    un = plant.u_nominal

    def h2_out(s):
        return steady_state(plant, [un[0] * s, un[1] * s, un[2]])[2, -1] - 5.69

    s = brentq(h2_out, 1.0, 2.0, xtol=1e-12)
    u0 = np.array([un[0] * s, un[1] * s, un[2]])
    return tuple(u0)


def initial_condition(benchmark: str, plant: PlantModel) -> tuple[np.ndarray, np.ndarray]:
    """Initial profile (a steady state) and the control that holds it."""
    if benchmark == "b1":
        u0 = np.array([0.8, 0.8])
    elif benchmark == "b2":
        u0 = np.array([1.0, 2.0, 315.0, 315.0])
    else:
        u0 = np.array(_b3_start(plant.n_fe))
    return steady_state(plant, u0), u0


def default_schedule(benchmark: str, plant: PlantModel, x0=None) -> Schedule:
    """Setpoint schedules; untabulated targets are the initial steady outlets."""
    if benchmark == "b1":
        return Schedule((0.4,), ((50, (0.3,)),))
    if x0 is None:
        x0, _ = initial_condition(benchmark, plant)
    if benchmark == "b2":
        c0, t0 = x0[0, -1], 315.0
        c1 = c0 * 760.0 / 570.0
        return Schedule((c0, t0), ((50, (c0, 312.0)), (100, (c1, 312.0))))
    ch4, co = x0[0, -1], x0[4, -1]
    return Schedule((ch4, 5.69, co), ((15, (ch4, 6.69, co)),))


# ---------------------------------------------------------------------------
# initial-state band of the reformer
# ---------------------------------------------------------------------------


def _corner_profiles(plant: PlantModel):
    lo, hi = plant.u_lb, plant.u_ub
    out = [steady_state(plant, plant.u_nominal)]
    for mask in range(2 ** plant.n_u):
        u = np.array([hi[l] if mask >> l & 1 else lo[l] for l in range(plant.n_u)])
        out.append(steady_state(plant, u, guess=out[0]))
    return np.array(out)


def _band_file(which: str) -> str:
    return f"b3_band_{which}.csv"


def write_band_csv(plant: PlantModel, directory) -> tuple[np.ndarray, np.ndarray]:
    """Compute the steady-profile band and store it as ``node, <state>...`` CSV files."""
    profiles = _corner_profiles(plant)
    lower, upper = profiles.min(axis=0), profiles.max(axis=0)
    for which, prof in (("lower", lower), ("upper", upper)):
        with open(f"{directory}/{_band_file(which)}", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node"] + plant.state_names)
            for v in range(plant.n_fe):
                w.writerow([v + 1] + [repr(float(prof[i, v])) for i in range(plant.n_x)])
    return lower, upper


def _read_band(which: str, plant: PlantModel):
    try:
        text = resources.files("pinnmpc.plants").joinpath("data", _band_file(which)).read_text()
    except FileNotFoundError:
        return None
    rows = list(csv.reader(text.splitlines()))
    if rows[0][1:] != plant.state_names or len(rows) - 1 != plant.n_fe:
        return None
    return np.array([[float(c) for c in r[1:]] for r in rows[1:]]).T


@functools.lru_cache(maxsize=None)
def _band_cached(n_fe: int):
    plant = make_plant("b3", n_fe=n_fe)
    lower, upper = _read_band("lower", plant), _read_band("upper", plant)
    if lower is None or upper is None:
        profiles = _corner_profiles(plant)
        lower, upper = profiles.min(axis=0), profiles.max(axis=0)
    return lower, upper


def initial_state_band(plant: PlantModel) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper steady profiles over the control-bound corners and the nominal point."""
    if plant.name != "b3":
        raise ValueError("the initial-state band is defined for the reformer only")
    lower, upper = _band_cached(plant.n_fe)
    return lower.copy(), upper.copy()

"""Benchmark reactor models and their simulators."""

from __future__ import annotations

import json
from importlib import resources

from .base import PlantModel
from .pfr import IsothermalPFR, NonIsothermalPFR, b1_rhs, b2_rhs
from .reformer import ATOMS, ReformerParams, SteamReformer, b3_rhs, reformer_kinetics
from .simulate import (ImplicitStepper, SimulationError, SimulatorConfig, integrate_rk45,
                       simulate_implicit, simulate_mol, steady_state)

__all__ = [
    "PlantModel",
    "IsothermalPFR",
    "NonIsothermalPFR",
    "SteamReformer",
    "ReformerParams",
    "ATOMS",
    "b1_rhs",
    "b2_rhs",
    "b3_rhs",
    "reformer_kinetics",
    "SimulatorConfig",
    "SimulationError",
    "ImplicitStepper",
    "integrate_rk45",
    "simulate_mol",
    "simulate_implicit",
    "steady_state",
    "load_params",
    "make_plant",
]

_CLASSES = {"b1": IsothermalPFR, "b2": NonIsothermalPFR, "b3": SteamReformer}


def load_params(plant_id: str) -> dict:
    """Shipped parameter table of a benchmark plant."""
    if plant_id not in _CLASSES:
        raise ValueError(f"unknown plant {plant_id!r}; expected one of {sorted(_CLASSES)}")
    text = resources.files(__package__).joinpath("data", f"{plant_id}.json").read_text()
    return json.loads(text)


def make_plant(plant_id: str, n_fe: int | None = None, dt: float | None = None,
               params: dict | None = None) -> PlantModel:
    params = params if params is not None else load_params(plant_id)
    return _CLASSES[plant_id](params, n_fe=n_fe, dt=dt)

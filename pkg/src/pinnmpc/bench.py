"""Benchmark harness: scenarios, training jobs, run summaries and trace comparisons.

Summaries and comparisons are computed from trace files only, so a report
can always be regenerated from the CSVs on disk.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .embedding import TrainedNetwork
from .nlp_solver import OPTIMAL, SolverOptions
from .nmpc import COUNT_KEYS, ClosedLoopTrace, Schedule, closed_loop, distance_factors, read_trace_csv
from .nmpc import trajectory_distance
from .nn_engine import ParamFileError, load_params, save_params
from .pinn_training import TrainConfig, train
from .plants import make_plant
from .presets import (BENCHMARKS, PRESETS, check_arch, default_schedule, horizon_steps, initial_condition,
                      initial_state_band, network_spec, nmpc_config, nmpc_solver_options, plant_for, train_config)
from .shooting import shooting_closed_loop

__all__ = [
    "ConfigError",
    "Scenario",
    "TrainJob",
    "SuiteConfig",
    "load_scenario",
    "resolve_params",
    "execute_scenario",
    "run_training",
    "summarize_trace",
    "compare_traces",
    "suite_report",
    "config_digest",
    "DEFAULT_THRESHOLD",
]

DEFAULT_THRESHOLD = 1e-4
VARIANTS = ("mechanistic", "ece-fs", "ece-rs", "efe", "shooting")
SHOOTING_MODELS = ("mol", "implicit", "pinn", "picnn")


class ConfigError(ValueError):
    """Invalid configuration or missing artifact (CLI exit code 2)."""


def config_digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """One closed-loop run.

    ``model`` names the surrogate architecture for embedded variants and the
    internal model for ``shooting``; ``params`` points at a trained parameter
    file when the model is a network.
    """

    name: str
    benchmark: str
    variant: str = "mechanistic"
    model: str | None = None
    params: str | None = None
    horizon: int | None = None
    preset: str = "desk"
    seed: int = 0
    aux_init: str = "forward"
    solver: dict = field(default_factory=dict)
    schedule: dict | None = None
    notes: dict = field(default_factory=dict)
    base_dir: str | None = None

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.aux_init not in ("forward", "zero"):
            raise ConfigError("aux_init must be 'forward' or 'zero'")
        if self.variant == "mechanistic":
            if self.model not in (None, "mechanistic"):
                raise ConfigError("the mechanistic variant takes no network model")
        elif self.variant == "shooting":
            self.model = self.model or "mol"
            if self.model not in SHOOTING_MODELS:
                raise ConfigError(f"unknown shooting model {self.model!r}")
        elif self.model not in ("pinn", "picnn"):
            raise ConfigError(f"variant {self.variant} needs model 'pinn' or 'picnn'")
        if self.uses_network:
            try:
                check_arch(self.benchmark, self.model)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if self.variant == "ece-rs" and self.model != "pinn":
                raise ConfigError("the reduced-space embedding is only offered for dense networks")
        if self.horizon is not None and int(self.horizon) < 1:
            raise ConfigError("horizon must be at least 1")
        unknown = set(self.solver) - {f.name for f in fields(SolverOptions)}
        if unknown:
            raise ConfigError(f"unknown solver options {sorted(unknown)}")

    @property
    def uses_network(self) -> bool:
        return self.model in ("pinn", "picnn")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "Scenario":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scenario keys {sorted(extra)}")
        if "name" not in d or "benchmark" not in d:
            raise ConfigError("a scenario needs 'name' and 'benchmark'")
        return cls(**d, base_dir=None if base_dir is None else str(base_dir))


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed scenario {path}: {exc}") from None
    d.update(overrides or {})
    return Scenario.from_dict(d, base_dir=path.parent)


def resolve_params(sc: Scenario, search=()) -> Path:
    """Locate the parameter file: absolute, then each search directory, then the scenario directory."""
    if not sc.params:
        raise ConfigError(f"scenario {sc.name} uses a network but names no parameter file")
    p = Path(sc.params)
    candidates = [p] if p.is_absolute() else [Path(d) / p for d in search] + (
        [Path(sc.base_dir) / p] if sc.base_dir else []) + [p]
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(f"parameter file {sc.params!r} not found (looked in {[str(c) for c in candidates]})")


def _load_network(sc: Scenario, plant, search) -> TrainedNetwork:
    path = resolve_params(sc, search)
    expected = network_spec(sc.benchmark, sc.model, plant)
    try:
        spec, params = load_params(path, expected)
    except ParamFileError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return TrainedNetwork(spec, params)


def _schedule(sc: Scenario, plant, x0) -> Schedule:
    if sc.schedule is None:
        return default_schedule(sc.benchmark, plant, x0)
    try:
        return Schedule.from_dict(sc.schedule)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule in scenario {sc.name}: {exc}") from None


def execute_scenario(sc: Scenario, search=(), progress=None) -> ClosedLoopTrace:
    """Run one scenario against the mechanistic truth plant."""
    plant = plant_for(sc.benchmark, sc.preset)
    x0, u0 = initial_condition(sc.benchmark, plant)
    schedule = _schedule(sc, plant, x0)
    horizon = int(sc.horizon) if sc.horizon is not None else horizon_steps(sc.benchmark)
    net = _load_network(sc, plant, search) if sc.uses_network else None
    if len(schedule.initial) != len(nmpc_config(sc.benchmark, "mechanistic", sc.preset).outputs):
        raise ConfigError(f"schedule of scenario {sc.name} has the wrong number of targets")
    if sc.variant == "shooting":
        opts = nmpc_solver_options(**{"hessian_mode": "bfgs", **sc.solver})
        cfg = nmpc_config(sc.benchmark, "mechanistic", sc.preset, opts)
        return shooting_closed_loop(plant, cfg, schedule, horizon, x0, sc.model, net, u0, opts, progress)
    cfg = nmpc_config(sc.benchmark, sc.variant, sc.preset, nmpc_solver_options(**sc.solver), sc.aux_init)
    return closed_loop(plant, cfg, schedule, horizon, x0, u0, net, progress=progress)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainJob:
    benchmark: str
    arch: str
    preset: str = "desk"
    seed: int = 0
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        try:
            check_arch(self.benchmark, self.arch)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        unknown = set(self.overrides) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")

    @property
    def stem(self) -> str:
        return f"{self.benchmark}_{self.arch}"

    def config(self) -> TrainConfig:
        base = asdict(train_config(self.benchmark, self.arch, self.preset, self.seed))
        base.update(self.overrides)
        try:
            return TrainConfig(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training configuration: {exc}") from None


def run_training(job: TrainJob, out_dir, log=None) -> dict:
    """Train one surrogate; writes ``<stem>.nnp``, ``<stem>_loss.csv`` and ``<stem>_meta.json``.

    Raises ``TrainingError`` on a non-finite loss.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plant = plant_for(job.benchmark, job.preset)
    spec = network_spec(job.benchmark, job.arch, plant)
    cfg = job.config()
    band = initial_state_band(plant) if job.benchmark == "b3" else None
    t0 = time.perf_counter()
    params, report = train(spec, plant, cfg, band=band, log=log)
    elapsed = time.perf_counter() - t0
    cfg_dict = {"benchmark": job.benchmark, "arch": job.arch, "preset": job.preset, "train": asdict(cfg),
                "n_fe": plant.n_fe, "spec_digest": spec.digest()}
    meta = {
        "benchmark": job.benchmark,
        "arch": job.arch,
        "preset": job.preset,
        "seeds": {"init": cfg.seed, "train_samples": cfg.seed, "test_samples": cfg.seed + 7919,
                  "batch_order": cfg.seed + 104729},
        "config": cfg_dict,
        "config_digest": config_digest(cfg_dict),
        "initial_train_loss": report.train_loss[0],
        "final_train_loss": report.train_loss[-1],
        "best_test_loss": min(report.test_loss),
        "best_epoch": report.best_epoch,
        "loss_reduction": report.train_loss[0] / max(min(report.train_loss), 1e-300),
        "wall_clock_seconds": elapsed,
    }
    save_params(out / f"{job.stem}.nnp", spec, params, metadata={k: meta[k] for k in ("config_digest", "seeds")})
    report.write_csv(out / f"{job.stem}_loss.csv")
    (out / f"{job.stem}_meta.json").write_text(json.dumps(meta, indent=2))
    return meta


# ---------------------------------------------------------------------------
# reports (pure functions of trace files)
# ---------------------------------------------------------------------------


def _as_columns(trace) -> dict:
    if isinstance(trace, (str, os.PathLike)):
        try:
            return read_trace_csv(trace)
        except FileNotFoundError:
            raise ConfigError(f"trace file not found: {trace}") from None
        except ValueError as exc:
            raise ConfigError(f"unreadable trace {trace}: {exc}") from None
    if isinstance(trace, ClosedLoopTrace):
        return _columns_of(trace)
    return trace


def _columns_of(trace: ClosedLoopTrace) -> dict:
    n = len(trace.records)
    cols = {
        "plant": [trace.plant_id] * n,
        "variant": [str(trace.variant)] * n,
        "model": [trace.model] * n,
        "status": [r.status for r in trace.records],
        "step": np.array([r.step for r in trace.records], float),
        "iterations": trace.iterations.astype(float),
        "wall_clock_seconds": trace.wall_clock.astype(float),
        "_header": trace.header(),
    }
    for k in COUNT_KEYS:
        cols[f"count_{k}"] = np.full(n, float(trace.counts.get(k, 0)))
    states = trace.states
    xcols = [h for h in trace.header() if h.startswith("x_")]
    for j, h in enumerate(xcols):
        cols[h] = states[:, j]
    for j, name in enumerate(trace.control_names):
        cols[f"u_{name}"] = trace.controls[:, j]
    return cols


def _first(cols, key, default=""):
    v = cols.get(key, [])
    return v[0] if len(v) else default


def _finite(v):
    return None if v is None or not math.isfinite(v) else float(v)


def summarize_trace(trace) -> dict:
    """Per-run statistics; averages exclude failed solves."""
    c = _as_columns(trace)
    status = list(c["status"])
    n = len(status)
    ok = np.array([s == OPTIMAL for s in status], bool)
    wc = np.asarray(c["wall_clock_seconds"], float)
    it = np.asarray(c["iterations"], float)
    later = ok.copy()
    if n:
        later[0] = False
    counts = {k: int(c[f"count_{k}"][0]) if n and f"count_{k}" in c else None for k in COUNT_KEYS}
    return {
        "plant": _first(c, "plant"),
        "variant": _first(c, "variant"),
        "model": _first(c, "model"),
        "steps": n,
        "failures": int(n - ok.sum()),
        "average_wall_clock_seconds": _finite(float(wc[ok].mean())) if ok.any() else None,
        "first_step_wall_clock_seconds": float(wc[0]) if n else None,
        "subsequent_average_wall_clock_seconds": float(wc[later].mean()) if later.any() else None,
        "counts": counts,
        "iterations": {
            "first": int(it[0]) if n else None,
            "mean": float(it[ok].mean()) if ok.any() else None,
            "max": int(it.max()) if n else None,
            "min": int(it.min()) if n else None,
            "total": int(it.sum()),
        },
    }


def _state_columns(c) -> list:
    return [h for h in c["_header"] if h.startswith("x_")]


def _control_columns(c) -> list:
    return [h for h in c["_header"] if h.startswith("u_")]


def _factors(c):
    plant_id = _first(c, "plant")
    base = make_plant(plant_id)
    n_fe = len(_state_columns(c)) // base.n_x
    plant = base if n_fe == base.n_fe else make_plant(plant_id, n_fe=n_fe)
    return distance_factors(plant)


def compare_traces(trace, baseline, threshold: float = DEFAULT_THRESHOLD) -> tuple[dict, np.ndarray]:
    """Distance metrics between ``trace`` and ``baseline``.

    Returns ``(result, table)`` where ``table`` has columns step, state
    metric, control metric. A verdict is issued only when both runs use the
    same internal model; otherwise a mismatch is expected and only the
    numbers are reported.
    """
    a, b = _as_columns(trace), _as_columns(baseline)
    if _first(a, "plant") != _first(b, "plant"):
        raise ConfigError("traces belong to different plants")
    xa, xb = _state_columns(a), _state_columns(b)
    ua, ub = _control_columns(a), _control_columns(b)
    if xa != xb or ua != ub or len(a["status"]) != len(b["status"]):
        raise ConfigError("traces are not aligned (different length or columns)")
    if not np.array_equal(np.asarray(a["step"]), np.asarray(b["step"])):
        raise ConfigError("traces are not aligned (different step indices)")
    xf, uf = _factors(a)
    sa = {"states": np.column_stack([a[h] for h in xa]), "controls": np.column_stack([a[h] for h in ua])}
    sb = {"states": np.column_stack([b[h] for h in xb]), "controls": np.column_stack([b[h] for h in ub])}
    dx, du = trajectory_distance(sa, sb, xf, uf)
    same_model = _first(a, "model") == _first(b, "model")
    worst = float(max(dx.max(), du.max())) if len(dx) else 0.0
    verdict = None
    if same_model:
        verdict = "consistent" if worst <= threshold else "inconsistent"
    result = {
        "plant": _first(a, "plant"),
        "variant": _first(a, "variant"),
        "baseline_variant": _first(b, "variant"),
        "model": _first(a, "model"),
        "baseline_model": _first(b, "model"),
        "max_state_metric": float(dx.max()) if len(dx) else 0.0,
        "max_control_metric": float(du.max()) if len(du) else 0.0,
        "mean_state_metric": float(dx.mean()) if len(dx) else 0.0,
        "mean_control_metric": float(du.mean()) if len(du) else 0.0,
        "threshold": threshold,
        "verdict": verdict,
    }
    table = np.column_stack([np.asarray(a["step"], float), dx, du])
    return result, table


def write_metric_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "state_metric", "control_metric"])
        for s, dx, du in table:
            w.writerow([int(s), repr(float(dx)), repr(float(du))])


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


@dataclass
class SuiteConfig:
    runs: list
    train: list = field(default_factory=list)
    baselines: dict = field(default_factory=dict)
    seed: int = 0
    preset: str = "desk"

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"suite file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed suite file {path}: {exc}") from None
        extra = set(d) - {"runs", "train", "baselines", "seed", "preset"}
        if extra:
            raise ConfigError(f"unknown suite keys {sorted(extra)}")
        if not d.get("runs"):
            raise ConfigError("a suite needs at least one run")
        runs = []
        for entry in d["runs"]:
            if isinstance(entry, str):
                entry = {"scenario": entry}
            if not isinstance(entry, dict) or not ({"scenario", "inline"} & set(entry)):
                raise ConfigError(f"run entries need 'scenario' or 'inline': {entry!r}")
            reps = int(entry.get("repetitions", 1))
            if reps < 1:
                raise ConfigError("repetitions must be at least 1")
            if "scenario" in entry:
                sc = load_scenario(path.parent / entry["scenario"], entry.get("overrides"))
            else:
                sc = Scenario.from_dict({**entry["inline"], **entry.get("overrides", {})}, base_dir=path.parent)
            runs.append((sc, reps))
        train_jobs = [TrainJob(**{"preset": d.get("preset", "desk"), "seed": d.get("seed", 0), **t})
                      for t in d.get("train", [])]
        return cls(runs, train_jobs, dict(d.get("baselines", {})), int(d.get("seed", 0)), d.get("preset", "desk"))


def suite_report(summaries: dict, traces: dict, baselines: dict, threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Combine per-run summaries with distances to each benchmark's baseline run."""
    report = {}
    for name, summary in summaries.items():
        entry = dict(summary)
        base = baselines.get(summary["plant"])
        if base is not None and base in traces and base != name:
            try:
                res, _ = compare_traces(traces[name], traces[base], threshold)
                entry["distance_to_baseline"] = {"baseline": base, **res}
            except ConfigError as exc:
                entry["distance_to_baseline"] = {"baseline": base, "error": str(exc)}
        report[name] = entry
    return report

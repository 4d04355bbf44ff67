"""Command-line entry point: ``pinnmpc {train,run,compare,suite}``.

Exit codes: 0 success, 2 configuration error or missing artifact, 3 solver
or training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .bench import (DEFAULT_THRESHOLD, ConfigError, Scenario, SuiteConfig, TrainJob, compare_traces,
                    execute_scenario, load_scenario, run_training, suite_report, summarize_trace,
                    write_metric_csv)
from .pinn_training import TrainingError
from .presets import ARCHITECTURES, BENCHMARKS, PRESETS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3

log = logging.getLogger("pinnmpc")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    benchmark = args.benchmark or cfg.pop("benchmark", None)
    arch = args.arch or cfg.pop("arch", None)
    cfg.pop("benchmark", None)
    cfg.pop("arch", None)
    preset = args.preset or cfg.pop("preset", "desk")
    cfg.pop("preset", None)
    seed = args.seed if args.seed is not None else cfg.pop("seed", 0)
    cfg.pop("seed", None)
    if benchmark is None or arch is None:
        raise ConfigError("train needs a benchmark and an architecture")
    job = TrainJob(benchmark, arch, preset, int(seed), cfg)
    every = max(1, job.config().epochs // 20)

    def progress(epoch, tr, te):
        if epoch % every == 0:
            log.info("epoch %d train %.3e test %.3e", epoch, tr, te)

    meta = run_training(job, _out_dir(args), log=progress)
    print(f"trained {job.stem}: loss {meta['initial_train_loss']:.3e} -> {meta['final_train_loss']:.3e} "
          f"(best epoch {meta['best_epoch']})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _run_one(sc: Scenario, out: Path, search) -> dict:
    def progress(t, res):
        log.debug("%s step %d %s it=%d", sc.name, t, res.status, res.iterations)

    trace = execute_scenario(sc, search, progress)
    trace_path = out / f"{sc.name}_trace.csv"
    trace.write_csv(trace_path)
    summary = summarize_trace(trace_path)
    summary["scenario"] = sc.to_dict()
    (out / f"{sc.name}_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _overrides(args) -> dict:
    over = {}
    if args.preset:
        over["preset"] = args.preset
    if args.seed is not None:
        over["seed"] = args.seed
    return over


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config <scenario.json>")
    sc = load_scenario(args.config, _overrides(args))
    out = _out_dir(args)
    summary = _run_one(sc, out, [out])
    print(f"{sc.name}: {summary['steps']} steps, {summary['failures']} failed solves, "
          f"{summary['counts']['total_vars']} variables")
    return EXIT_FAILURE if summary["failures"] else EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def cmd_compare(args) -> int:
    if not args.baseline or not args.traces:
        raise ConfigError("compare needs --baseline and at least one trace")
    out = _out_dir(args)
    results = {}
    for path in args.traces:
        res, table = compare_traces(path, args.baseline, args.threshold)
        stem = Path(path).stem
        write_metric_csv(out / f"{stem}_vs_{Path(args.baseline).stem}.csv", table)
        res["trace"] = str(path)
        res["baseline"] = str(args.baseline)
        results[stem] = res
        v = res["verdict"] or "no verdict (different internal models)"
        print(f"{stem}: max state {res['max_state_metric']:.3e}, max control {res['max_control_metric']:.3e}: {v}")
    (out / "comparison.json").write_text(json.dumps(results, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


def _suite_task(payload):
    sc, out = payload
    return sc.name, _run_one(sc, Path(out), [out])


def cmd_suite(args) -> int:
    if not args.config:
        raise ConfigError("suite needs --config <suite.json>")
    suite = SuiteConfig.load(args.config)
    out = _out_dir(args)
    for job in suite.train:
        if args.preset:
            job.preset = args.preset
        if args.seed is not None:
            job.seed = args.seed
        if (out / f"{job.stem}.nnp").is_file():
            log.info("reusing %s", out / f"{job.stem}.nnp")
            continue
        run_training(job, out)
    tasks = []
    for sc, reps in suite.runs:
        over = _overrides(args)
        for r in range(reps):
            name = sc.name if reps == 1 else f"{sc.name}_r{r + 1}"
            d = {**sc.to_dict(), **over, "name": name}
            tasks.append((Scenario.from_dict(d, base_dir=sc.base_dir), str(out)))
    if args.parallel and len(tasks) > 1:
        with ProcessPoolExecutor() as pool:
            done = dict(pool.map(_suite_task, tasks))
    else:
        done = dict(_suite_task(t) for t in tasks)
    traces = {name: out / f"{name}_trace.csv" for name in done}
    report = suite_report(done, traces, suite.baselines, args.threshold)
    (out / "suite_report.json").write_text(json.dumps(report, indent=2))
    failures = sum(s["failures"] for s in done.values())
    for name, s in report.items():
        avg = s["average_wall_clock_seconds"]
        line = (f"{name}: vars {s['counts']['total_vars']}, avg {avg if avg is None else f'{avg:.3f}'} s, "
                f"first {s['first_step_wall_clock_seconds']:.3f} s, failures {s['failures']}")
        dist = s.get("distance_to_baseline")
        if dist and "verdict" in dist:
            line += f", vs {dist['baseline']}: {dist['verdict'] or 'no verdict'}"
        print(line)
    return EXIT_FAILURE if failures else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pinnmpc", description="NMPC with embedded physics-informed networks.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=PRESETS, default=None)

    p = sub.add_parser("train", help="train a physics-informed surrogate")
    common(p)
    p.add_argument("--benchmark", choices=BENCHMARKS)
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run one closed-loop scenario")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare traces against a baseline trace")
    common(p)
    p.add_argument("--baseline", help="baseline trace CSV")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("traces", nargs="*")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("suite", help="train and run a list of scenarios, then report")
    common(p)
    p.add_argument("--parallel", action="store_true", help="run scenarios in worker processes")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

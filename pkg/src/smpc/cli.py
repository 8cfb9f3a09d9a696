"""Command line entry point: ``smpc offline | simulate | roa | bench``.

Exit codes: 0 success, 2 configuration error, 3 pipeline abort,
4 artifact version mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from smpc import lane, report
from smpc.controller import ARTIFACT_VERSION
from smpc.errors import ArtifactVersionError, InvalidInput, PipelineAbort
from smpc.lane import KINDS, GridSpec, LaneScenario
from smpc.pipeline import STAGES, atomic_write, load_artifact, store_artifact

log = logging.getLogger("smpc")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_VERSION = 0, 2, 3, 4

# keys that only affect the online simulation and may be overridden on an existing artifact
SIM_KEYS = ("s_0", "v_0", "s_0_env", "v_0_env", "N_online", "N_task", "N_trial")


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_config(path) -> LaneScenario:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return LaneScenario.from_dict(data)
    except (InvalidInput, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(items, allowed=None) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        if allowed is not None and key not in allowed:
            raise ConfigError(f"override {key!r} not allowed here; allowed: {', '.join(allowed)}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            raise ConfigError(f"override value for {key!r} is not JSON: {raw!r}") from None
    return out


def apply_overrides(ls: LaneScenario, overrides: dict) -> LaneScenario:
    if not overrides:
        return ls
    try:
        return ls.replace(**overrides)
    except (InvalidInput, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_kinds(text) -> tuple:
    kinds = tuple(k.strip() for k in text.split(",") if k.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise ConfigError(f"unknown controller kinds {bad}; choose from {', '.join(KINDS)}")
    return kinds


def parse_int_list(text) -> list:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}") from None
    if not vals or min(vals) < 0:
        raise ConfigError(f"bad integer list {text!r}")
    return vals


def open_artifact(path):
    if not os.path.exists(path):
        raise ConfigError(f"artifact {path} not found")
    art = load_artifact(path)
    art.check()
    return art, sha256_file(path)


def artifact_scenario(art, overrides: dict) -> LaneScenario:
    """Scenario echoed in the artifact, with simulation-side overrides applied."""
    if "config" not in art.meta or not art.meta["config"]:
        raise ConfigError("artifact carries no lane scenario config")
    ls = apply_overrides(LaneScenario.from_dict(art.meta["config"]), overrides)
    if lane.build_lane_model(ls)[0].digest() != art.model.digest():
        raise ConfigError("artifact model does not match its echoed config")
    return ls


def write_manifest(path, command: str, argv, config: dict, seeds: dict, outputs, artifact_digest=None,
                   results=None, timing=None) -> str:
    """Run manifest; the ``timing`` block is the only nondeterministic part."""
    doc = {
        "command": command,
        "argv": list(argv),
        "artifact_version": ARTIFACT_VERSION,
        "config": config,
        "seeds": seeds,
        "artifact_sha256": artifact_digest,
        "outputs": [{"path": os.path.basename(p), "sha256": sha256_file(p)} for p in outputs],
        "results": results or {},
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
        "timing": timing or {},
    }
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True, default=report._fmt) + "\n")
    return os.fspath(path)


# ----------------------------------------------------------------- commands


def cmd_offline(args) -> int:
    ls = apply_overrides(read_config(args.config), parse_overrides(args.set))
    t0 = time.perf_counter()
    res = lane.build_artifact(ls)
    art = res.artifact
    store_artifact(art, args.out)
    wall = time.perf_counter() - t0
    sfs = art.sfs
    results = {k: art.meta[k] for k in ("rank_W", "rank_K", "n_keep", "dim_y", "n_feature", "heuristic_truncation")}
    results.update(gamma_star=sfs.gamma_star, r=sfs.r, n_gamma=sfs.n_gamma, chebyshev_radius=sfs.radius,
                   payload_bytes=art.meta["payload_bytes"])
    write_manifest(f"{args.out}.manifest.json", "offline", sys.argv[1:] if args.argv is None else args.argv,
                   ls.to_dict(), {"scenario_seed": ls.seed}, [args.out], sha256_file(args.out), results,
                   {"stage_seconds": res.stage_seconds, "total_seconds": res.total_seconds, "wall_seconds": wall})
    log.info("artifact %s: %d features, gamma* = %.4g", args.out, art.n_feature, sfs.gamma_star)
    return EXIT_OK


def cmd_simulate(args) -> int:
    art, digest = open_artifact(args.artifact)
    ls = artifact_scenario(art, parse_overrides(args.set, SIM_KEYS))
    kinds = parse_kinds(args.kinds)
    seed = ls.seed if args.seed is None else args.seed
    n_trials = ls.N_trial if args.trials is None else args.trials
    steps = ls.N_task + 1 if args.steps is None else args.steps
    if n_trials < 0 or steps < 0:
        raise ConfigError("trials and steps must be nonnegative")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summaries = lane.run_trials(ls, kinds, art, seed=seed, n_trials=n_trials, steps=steps)
    files = []
    model = art.model
    for kind, s in summaries.items():
        files.append(report.write_csv(out / f"trials_{kind}.csv", report.trace_header(model.n, model.m),
                                      report.trace_rows(s.traces)))
    files.append(report.write_csv(out / "summary.csv", report.SUMMARY_HEADER,
                                  [report.summary_row(s, ls) for s in summaries.values()]))
    if args.figures:
        files.append(report.plot_costs(summaries, out / "cumulative_cost.png"))
        files.append(report.plot_gaps(summaries, ls, out / "gap_distance.png"))
    results = {k: {"mean": s.mean, "std": s.std, "n_infeasible": s.n_infeasible} for k, s in summaries.items()}
    write_manifest(out / "manifest.json", "simulate", sys.argv[1:] if args.argv is None else args.argv,
                   ls.to_dict(), {"trial_seed": seed, "scenario_seed": ls.seed}, files, digest, results,
                   {"wall_seconds": time.perf_counter() - t0})
    for k, s in summaries.items():
        log.info("%-9s mean %.3f  infeasible %d/%d", k, s.mean, s.n_infeasible, len(s.traces))
    return EXIT_OK


def cmd_roa(args) -> int:
    ls = apply_overrides(read_config(args.config), parse_overrides(args.set))
    try:
        grid = GridSpec.parse(args.grid)
    except (InvalidInput, ValueError) as exc:
        raise ConfigError(f"bad grid spec: {exc}") from exc
    kinds = parse_kinds(args.kinds)
    t0 = time.perf_counter()
    art, digest = None, None
    if "proposed" in kinds:
        if args.artifact:
            art, digest = open_artifact(args.artifact)
        else:
            art = lane.build_artifact(ls).artifact
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files, counts = [], {}
    for kind in kinds:
        g = lane.roa_grid(kind, ls, grid, art)
        counts[kind] = g.count
        files.append(report.write_csv(out / f"roa_{kind}.csv", ["s", "v", "feasible"], g.rows()))
        if args.figures:
            files.append(report.plot_roa(g, out / f"roa_{kind}.png"))
    files.append(report.write_csv(out / "summary.csv", ["kind", "feasible", "nodes"],
                                  [[k, c, int(np.prod([a.size for a in grid.axes()]))] for k, c in counts.items()]))
    write_manifest(out / "manifest.json", "roa", sys.argv[1:] if args.argv is None else args.argv, ls.to_dict(),
                   {"scenario_seed": ls.seed}, files, digest, {"feasible": counts, "grid": vars(grid)},
                   {"wall_seconds": time.perf_counter() - t0})
    log.info("roa feasible counts %s", counts)
    return EXIT_OK


BENCH_HEADER = ["section", "policy", "samples", "n_vars", "n_rows", "reps", "median_s", "min_s", "max_s", "p90_s"]


def bench_rows(art, ls: LaneScenario, samples, reps: int, seed: int) -> list:
    """Per-step online solve times at the nominal start, fresh scenarios per repetition."""
    rows = []
    x = ls.x_S
    for S in samples:
        for kind in KINDS:
            ctrl = lane.make_controller(kind, ls, art, n_online=S, seed=seed)
            times, dims = [], (0, 0)
            for rep in range(reps):
                res = ctrl.step(x, rep, 0)
                times.append(res.solve_time)
                dims = (res.n_vars, res.n_rows)
            t = np.array(times)
            stats = [np.median(t), t.min(), t.max(), np.percentile(t, 90)] if t.size else [np.nan] * 4
            rows.append(["online", kind, S, *dims, reps, *stats])
    secs = art.meta.get("stage_seconds", {})
    for stage in sorted(secs, key=lambda k: STAGES.index(k) if k in STAGES else len(STAGES)):
        sec = secs[stage]
        rows.append(["offline", stage, art.meta.get("n_samples"), "", "", 1, sec, sec, sec, sec])
    return rows


def cmd_bench(args) -> int:
    art, digest = open_artifact(args.artifact)
    ls = artifact_scenario(art, parse_overrides(args.set, SIM_KEYS))
    samples = parse_int_list(args.samples)
    if args.reps < 1:
        raise ConfigError("reps must be positive")
    seed = ls.seed if args.seed is None else args.seed
    t0 = time.perf_counter()
    rows = bench_rows(art, ls, samples, args.reps, seed)
    path = report.write_csv(args.out, BENCH_HEADER, rows)
    write_manifest(f"{args.out}.manifest.json", "bench", sys.argv[1:] if args.argv is None else args.argv,
                   ls.to_dict(), {"bench_seed": seed}, [path], digest, {"samples": samples, "reps": args.reps},
                   {"wall_seconds": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smpc", description="Scenario MPC with feature feedback and probabilistic scaling")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    set_help = "override a config key, value as JSON (repeatable)"

    o = sub.add_parser("offline", help="build the online artifact from a config")
    o.add_argument("--config", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--set", action="append", metavar="KEY=VALUE", help=set_help)
    o.set_defaults(func=cmd_offline)

    s = sub.add_parser("simulate", help="closed-loop trials from an artifact")
    s.add_argument("--artifact", required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="steps per trial (default N_task + 1)")
    s.add_argument("--kinds", default=",".join(KINDS))
    s.add_argument("--out-dir", required=True)
    s.add_argument("--figures", action="store_true", help="also render PNG figures")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help=set_help)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("roa", help="feasibility grids for each controller")
    r.add_argument("--config", required=True)
    r.add_argument("--grid", default="")
    r.add_argument("--artifact", help="reuse an artifact instead of building one")
    r.add_argument("--kinds", default=",".join(KINDS))
    r.add_argument("--out-dir", required=True)
    r.add_argument("--figures", action="store_true")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help=set_help)
    r.set_defaults(func=cmd_roa)

    b = sub.add_parser("bench", help="online solve-time table")
    b.add_argument("--artifact", required=True)
    b.add_argument("--samples", default="10,100,1000")
    b.add_argument("--reps", type=int, default=30)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.add_argument("--set", action="append", metavar="KEY=VALUE", help=set_help)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInput) as exc:
        print(f"smpc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineAbort as exc:
        print(f"smpc: pipeline aborted at stage {exc.stage or '?'}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ArtifactVersionError as exc:
        print(f"smpc: artifact error: {exc}", file=sys.stderr)
        return EXIT_VERSION


if __name__ == "__main__":
    sys.exit(main())

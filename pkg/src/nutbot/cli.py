"""Command line entry point: ``nutbot run --scenario ...``."""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import reporting
from .control import Gains
from .harness import ConfigError, ExperimentConfig, run_ablation, run_robustness, run_trial, prepare_trial
from .planner import PlannerConfig
from .spatial import Pose
from .world import BoltModel

log = logging.getLogger("nutbot")

EXIT_OK, EXIT_USAGE, EXIT_EXCEPTIONAL = 0, 1, 2


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value.strip()


def _apply_section(obj, section, skip=()):
    updates = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        current = getattr(obj, key)
        if key in ("grasp_angle_tol", "turn_angle", "max_turn_angle") and section.name in ("bolt", "planner"):
            updates[key] = math.radians(float(value))  # degrees in the file
        else:
            updates[key] = _coerce(value, current)
    return dataclasses.replace(obj, **updates)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI file with sections [experiment], [gains], [bolt], [planner].

    [bolt] takes ``position`` (x y z of the nut, metres) besides the
    BoltModel fields; angles in [bolt] and [planner] are in degrees.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    cfg = base or ExperimentConfig()
    known = {"experiment", "gains", "bolt", "planner"}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown config section [{name}]")
    try:
        changes = {}
        if cp.has_section("gains"):
            changes["gains"] = _apply_section(cfg.gains, cp["gains"])
        if cp.has_section("planner"):
            changes["planner"] = _apply_section(cfg.planner, cp["planner"])
        if cp.has_section("bolt"):
            sec = cp["bolt"]
            bolt = _apply_section(cfg.bolt, sec, skip=("position",))
            if "position" in sec:
                p = np.array(_coerce(sec["position"], ()), dtype=float)
                bolt = dataclasses.replace(bolt, base_pose=Pose(bolt.base_pose.rotation, p))
            changes["bolt"] = bolt
        if cp.has_section("experiment"):
            exp = _apply_section(cfg, cp["experiment"], skip=("gains", "bolt", "planner"))
            cfg = exp
        return dataclasses.replace(cfg, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def build_parser():
    p = argparse.ArgumentParser(prog="nutbot", description="Nut-screwing manipulation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment scenario")
    r.add_argument("--scenario", choices=["nominal", "ablation", "robustness"], default="nominal")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--dt", type=float, default=None)
    r.add_argument("--turns", type=int, default=None)
    r.add_argument("--limit", type=float, default=None,
                   help="disturbance limit (m); for robustness, a single limit replacing the default list")
    r.add_argument("--trials", type=int, default=None)
    r.add_argument("--variant", choices=["baseline", "hybrid"], default="hybrid",
                   help="controller for nominal and robustness runs")
    r.add_argument("--config", type=Path, default=None)
    r.add_argument("--out", type=Path, default=Path("out"))
    r.add_argument("--plan-dump", action="store_true", help="also write plan.csv (one row per keyframe)")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {"scenario": args.scenario, "out_dir": str(args.out)}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.dt is not None:
        changes["dt"] = args.dt
    if args.turns is not None:
        changes["turn_count"] = args.turns
    if args.trials is not None:
        changes["n_trials"] = args.trials
    if args.limit is not None:
        changes["disturbance_limit"] = args.limit
        if args.scenario == "robustness":
            changes["limits"] = (args.limit,)
    return dataclasses.replace(cfg, **changes)


def _run(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.scenario == "nominal":
        prepared = prepare_trial(cfg)
        res = run_trial(cfg, args.variant, prepared=prepared)
        reporting.write_trial_outputs(out, [res])
        if args.plan_dump and prepared[1] is not None:
            reporting.write_plan_dump(out / "plan.csv", prepared[1])
        print(f"{res.variant}: termination={res.termination} turns={res.turns_completed} "
              f"pitch={res.pitch_progress:.4f} rad")
        return EXIT_OK if res.termination == "normal" else EXIT_EXCEPTIONAL
    if cfg.scenario == "ablation":
        rep = run_ablation(cfg)
        reporting.write_trial_outputs(out, [rep.baseline, rep.hybrid], rep.summary_rows())
        for k, v in rep.summary_rows():
            print(f"{k}: {v:.6g}")
        return EXIT_OK
    def progress(limit, i, res):
        log.info("l=%.3f trial %d: %s (%s)", limit, i, "success" if res.success else "failure", res.termination)
    rows, records = run_robustness(cfg, args.variant, progress)
    reporting.write_csv(out / "table1.csv", ["limit", "trials", "successes", "success_rate", "failures"],
                        [(r.limit, r.trials, r.successes, r.success_rate,
                          ";".join(f"{k}={v}" for k, v in sorted(r.failures.items()))) for r in rows])
    reporting.write_csv(out / "trials.csv",
                        ["limit", "trial", "success", "turns_completed", "termination", "failed_stage",
                         "pitch_progress", "d_gripper_x", "d_gripper_y", "d_gripper_z",
                         "d_nut_x", "d_nut_y", "d_nut_z"],
                        [(l, i, int(r.success), r.turns_completed, r.termination, r.failed_stage or "",
                          r.pitch_progress, *r.disturbance) for l, i, r in records])
    for r in rows:
        print(f"l={r.limit:.3f} m: {r.successes}/{r.trials} successful")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    code = _run(cfg, args)
    log.info("finished in %.1f s", time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``tempomap run|eval|bench``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

# numpy-heavy modules are imported lazily so --single-thread can pin BLAS first
POSE_MODES = ("ground-truth", "odometry")
log = logging.getLogger("tempomap")


def _single_thread():
    # must happen before numpy spins up its BLAS pool
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def _resolve(args):
    """(scenario path, pipeline config) from --config / --scenario / overrides."""
    from .pipeline import config_from_dict, load_run_config

    if args.config:
        scenario, cfg = load_run_config(args.config)
    else:
        scenario, cfg = None, config_from_dict({})
    if args.scenario:
        scenario = args.scenario
    if scenario is None:
        raise ValueError("no scenario given (use --scenario or a config with a 'scenario' key)")
    if not Path(scenario).exists():
        raise FileNotFoundError(f"scenario file not found: {scenario}")
    if args.pose_mode:
        cfg.pose_mode = args.pose_mode
    if getattr(args, "no_global_opt", False):
        cfg.global_optimization = False
    return scenario, cfg


def cmd_run(args):
    from .pipeline import run_to_dir

    scenario, cfg = _resolve(args)
    out = Path(args.out)
    result = run_to_dir(scenario, cfg, out, args.seed_override, plots=not args.no_plots)
    s = result.summary
    print(f"wrote {out}")
    for key in ("objects_f1", "changes_f1", "dynamics_f1", "background_precision"):
        if key in s:
            print(f"  {key:22s} {s[key]:.3f}")
    return 0


def cmd_eval(args):
    from .pipeline import evaluate_beliefs, write_metrics, write_summary
    from .stmap import GroundTruth, load_map_export

    maps = load_map_export(args.map, args.grid)
    gt = GroundTruth.load(args.gt)
    if not maps:
        raise ValueError(f"{args.map}: no beliefs")
    rows, summary = evaluate_beliefs(maps, gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(rows, out / "metrics.csv")
    write_summary(summary, out / "summary.csv")
    for key, v in summary.items():
        print(f"{key:22s} {v:.3f}")
    return 0


def cmd_bench(args):
    from .pipeline import bench_active_window, run, write_timing
    from .simulator import load_scenario

    scenario, cfg = _resolve(args)
    scn = load_scenario(scenario, args.seed_override)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run(scn, cfg)
    write_timing(result.timing, out / "timing.csv")
    aw = bench_active_window(scn, cfg, args.points, args.frames)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(aw))
        w.writeheader()
        w.writerow(aw)
    totals = {k: sum(r[k] for r in result.timing) for k in ("frame_ms", "optimize_ms", "ray_query_ms", "reconcile_ms")}
    print(json.dumps({"pipeline_ms": totals, "active_window": aw}, indent=2))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tempomap", description="Spatio-temporal mapping on scripted scenarios.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config YAML (holds a 'scenario' key)")
        sp.add_argument("--scenario", help="scenario YAML, overrides the config's")
        sp.add_argument("--pose-mode", choices=POSE_MODES)
        sp.add_argument("--seed-override", type=int)
        sp.add_argument("--out", default="out")
        sp.add_argument("--single-thread", action="store_true", help="force sequential BLAS")
        sp.add_argument("--no-global-opt", action="store_true")

    r = sub.add_parser("run", help="map a scenario and write exports, metrics and plots")
    common(r)
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="recompute metrics offline from exports")
    e.add_argument("--map", required=True, help="map.jsonl (or a ground-truth export)")
    e.add_argument("--gt", required=True, help="ground_truth.jsonl")
    e.add_argument("--grid", type=float, default=5.0, help="belief spacing when --map is a ground-truth export")
    e.add_argument("--out", default="eval")
    e.add_argument("--single-thread", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-stage timing plus active-window throughput")
    common(b)
    b.add_argument("--points", type=int, default=10_000)
    b.add_argument("--frames", type=int, default=100)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.single_thread:
        _single_thread()
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"tempomap {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

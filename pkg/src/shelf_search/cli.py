"""Command line interface: run episodes, evaluate suites, render trace steps."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .environment import LEVELS, NoiseModel, RewardSpec, Scenario, ShelfSearchEnv, sample_scenario
from .harness import DEFAULT_CLUTTER_BINS, EpisodeTrace, METHODS, TIME_LIMIT_S, evaluate_suite, \
    plot_report, run_episode
from .environment import STEP_LIMIT
from .geometry import CameraModel
from .observation import PALETTE, RASTER
from .physics import ActionCaps, GripperParams, PhysicsParams, ShelfGeometry
from .planner import PlannerConfig

HEURISTIC_ENV_VAR = "SHELF_SEARCH_HEURISTIC"


def default_config() -> dict:
    return {
        "version": __version__,
        "physics": dataclasses.asdict(PhysicsParams()),
        "camera": dataclasses.asdict(CameraModel()),
        "reward": dataclasses.asdict(RewardSpec()),
        "raster": dataclasses.asdict(RASTER),
        "palette": dataclasses.asdict(PALETTE),
        "planner": dataclasses.asdict(PlannerConfig()),
        "shelf": dataclasses.asdict(ShelfGeometry()),
        "step_limit": STEP_LIMIT,
        "time_limit": TIME_LIMIT_S,
        "clutter_bins": [list(b) for b in DEFAULT_CLUTTER_BINS],
        "methods": list(METHODS),
        "levels": {k: {"count_range": list(v.count_range),
                       "target_back_half": v.target_back_half} for k, v in LEVELS.items()},
    }


def _heuristic_spec(args) -> str:
    return os.environ.get(HEURISTIC_ENV_VAR) or args.heuristic


def cmd_run(args) -> int:
    scenario = Scenario.load(args.scenario)
    trace = run_episode(
        method=args.method, scenario=scenario, noise_sigma=args.noise, seed=args.seed,
        heuristic_spec=_heuristic_spec(args), m=args.m, h=args.h,
        step_limit=args.step_limit, time_limit=args.time_limit,
        trace_path=args.trace, log_target_mask=args.log_target_mask,
        parallel_rollouts=args.parallel_rollouts,
    )
    print(f"outcome={trace.outcome} steps={trace.steps} reward={trace.reward_sum:.1f} "
          f"wall={trace.wall_clock:.2f}s hash={trace.trace_hash()[:16]}")
    return 0 if trace.outcome != "infrastructure_failure" else 2


def cmd_evaluate(args) -> int:
    with open(args.config, "r", encoding="utf-8") as f:
        config = json.load(f)
    report = evaluate_suite(config, out_dir=args.out)
    if args.plots:
        plot_report(report, args.out)
    for cell in report.cells:
        print(f"{cell.method:14s} clutter={cell.clutter_bin[0]}-{cell.clutter_bin[1]} "
              f"noise={cell.noise:.2f} success={cell.success_rate:.2f} "
              f"time={cell.avg_time_per_task:.2f}s actions={cell.avg_actions_per_task:.1f}")
    return 0


def cmd_render(args) -> int:
    from PIL import Image

    trace = EpisodeTrace.load(args.trace)
    ss = np.random.SeedSequence(entropy=trace.seed)
    noise_seed = int(ss.spawn(3)[0].generate_state(1)[0])
    env = ShelfSearchEnv(trace.scenario, noise=NoiseModel(trace.noise_sigma),
                         noise_seed=noise_seed)
    obs = env.reset()
    if args.step < 0 or args.step > len(trace.records):
        print(f"step must be in [0, {len(trace.records)}]", file=sys.stderr)
        return 1
    from .physics import Action

    for rec in trace.records[: args.step]:
        obs = env.step(Action(*rec.action)).observation
    img = Image.fromarray(obs.raster())
    if args.scale > 1:
        img = img.resize((img.width * args.scale, img.height * args.scale), Image.NEAREST)
    img.save(args.png)
    print(f"wrote {args.png} (observation after {args.step} actions)")
    return 0


def cmd_sample(args) -> int:
    scenario = sample_scenario(LEVELS[args.level], args.seed, n_objects=args.objects)
    scenario.save(args.out)
    print(f"wrote {args.out}: {len(scenario.objects)} objects, target type "
          f"{scenario.target_type}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shelf-search",
                                description="Shelf retrieval simulator and planners")
    p.add_argument("--print-config", action="store_true",
                   help="print all defaults as JSON and exit")
    sub = p.add_subparsers(dest="command")

    run = sub.add_parser("run", help="run one episode")
    run.add_argument("--scenario", required=True)
    run.add_argument("--method", default="hybrid", choices=METHODS)
    run.add_argument("--m", type=int, default=4)
    run.add_argument("--h", type=int, default=4)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--heuristic", default="scripted",
                     help=f"scripted or remote:HOST:PORT (env {HEURISTIC_ENV_VAR} overrides)")
    run.add_argument("--trace", default=None, help="write a JSON-lines trace here")
    run.add_argument("--noise", type=float, default=0.0)
    run.add_argument("--step-limit", type=int, default=STEP_LIMIT)
    run.add_argument("--time-limit", type=float, default=TIME_LIMIT_S)
    run.add_argument("--log-target-mask", action="store_true",
                     help="include the target footprint mask in each trace record")
    run.add_argument("--parallel-rollouts", action="store_true")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("evaluate", help="run a suite config and emit a report")
    ev.add_argument("--config", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--plots", action="store_true")
    ev.set_defaults(func=cmd_evaluate)

    rd = sub.add_parser("render", help="render one trace step to PNG")
    rd.add_argument("--trace", required=True)
    rd.add_argument("--step", type=int, required=True)
    rd.add_argument("--png", required=True)
    rd.add_argument("--scale", type=int, default=1)
    rd.set_defaults(func=cmd_render)

    sm = sub.add_parser("sample", help="sample a scenario file")
    sm.add_argument("--level", default="L1", choices=sorted(LEVELS))
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--objects", type=int, default=None)
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_sample)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(json.dumps(default_config(), indent=2, sort_keys=True))
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment harness: single episodes, persisted traces, and metric suites.

A task counts as a success when the target is retrieved within the action
budget and wall-clock limit without dropping anything. Reported time covers
planning only; action execution is simulated and costs no wall clock.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np

from .baselines import HierarchicalController, greedy_action, stochastic_action
from .environment import InternalSim, NoiseModel, RewardSpec, Scenario, ShelfSearchEnv, \
    LEVELS, sample_scenario, STEP_LIMIT
from .errors import ConfigError, RemoteUnavailable
from .geometry import CameraModel, Pose2
from .heuristic import Heuristic, ObservationHistory, ScriptedHeuristic
from .observation import PALETTE, RASTER
from .physics import Action, PhysicsParams
from .planner import HybridPlanner, PlannerConfig, PlannerContext

METHODS = ("hybrid", "hybrid_limited", "greedy", "stochastic", "stochastic_gen", "hierarchical")
TIME_LIMIT_S = 120.0
TRACE_VERSION = 1


def make_heuristic(spec: str, target_type: int, scenario: Scenario) -> Heuristic:
    """Build a heuristic from a spec string: 'scripted' or 'remote:HOST:PORT'."""
    if spec == "scripted":
        return ScriptedHeuristic(target_type=target_type, shelf=scenario.shelf)
    if spec.startswith("remote:"):
        from .protocol import RemoteHeuristic

        _, host, port = spec.split(":")
        return RemoteHeuristic(host=host, port=int(port))
    raise ValueError(f"unknown heuristic spec {spec!r} (use scripted or remote:HOST:PORT)")


@dataclass
class StepRecord:
    t: int
    action: list
    reward: float
    terminal: str
    visible_ids: list
    gripper_pose: list
    target_pose: Optional[list] = None
    plan_time: float = 0.0
    target_mask_b64: Optional[str] = None

    def to_json(self) -> dict:
        rec = {
            "record": "step",
            "t": self.t,
            "action": self.action,
            "reward": self.reward,
            "terminal": self.terminal,
            "visible_ids": self.visible_ids,
            "gripper_pose": self.gripper_pose,
            "plan_time": round(self.plan_time, 6),
        }
        if self.target_pose is not None:
            rec["target_pose"] = self.target_pose
        if self.target_mask_b64 is not None:
            rec["target_mask_b64"] = self.target_mask_b64
        return rec


@dataclass
class EpisodeTrace:
    episode_id: str
    method: str
    seed: int
    noise_sigma: float
    heuristic: str
    scenario: Scenario
    records: list = field(default_factory=list)
    outcome: str = "step_limit"  # success | dropped | step_limit | time_limit | infrastructure_failure
    wall_clock: float = 0.0
    m: int = 4
    h: int = 4

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def reward_sum(self) -> float:
        return sum(r.reward for r in self.records)

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def trace_hash(self) -> str:
        """Digest of the deterministic episode content (timing excluded)."""
        payload = {
            "episode_id": self.episode_id,
            "method": self.method,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "scenario": self.scenario.to_json(),
            "steps": [[r.t, r.action, r.reward, r.terminal, r.visible_ids,
                       r.gripper_pose, r.target_pose] for r in self.records],
            "outcome": self.outcome if self.outcome != "time_limit" else "time_limit",
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            header = {
                "record": "header", "version": TRACE_VERSION,
                "episode_id": self.episode_id, "method": self.method,
                "m": self.m, "h": self.h, "seed": self.seed,
                "noise_sigma": self.noise_sigma, "heuristic": self.heuristic,
                "palette_version": PALETTE.version,
                "scenario": self.scenario.to_json(),
            }
            f.write(json.dumps(header, separators=(",", ":")) + "\n")
            for r in self.records:
                f.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")
            footer = {
                "record": "footer", "outcome": self.outcome, "steps": self.steps,
                "wall_clock": round(self.wall_clock, 6),
                "reward_sum": self.reward_sum, "trace_hash": self.trace_hash(),
            }
            f.write(json.dumps(footer, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "EpisodeTrace":
        with open(path, "r", encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
        header = lines[0]
        footer = lines[-1]
        if header.get("record") != "header" or footer.get("record") != "footer":
            raise ValueError(f"malformed trace file {path}")
        trace = cls(
            episode_id=header["episode_id"], method=header["method"],
            seed=header["seed"], noise_sigma=header["noise_sigma"],
            heuristic=header["heuristic"], scenario=Scenario.from_json(header["scenario"]),
            m=header.get("m", 4), h=header.get("h", 4),
        )
        for rec in lines[1:-1]:
            trace.records.append(StepRecord(
                t=rec["t"], action=rec["action"], reward=rec["reward"],
                terminal=rec["terminal"], visible_ids=rec["visible_ids"],
                gripper_pose=rec["gripper_pose"], target_pose=rec.get("target_pose"),
                plan_time=rec.get("plan_time", 0.0),
                target_mask_b64=rec.get("target_mask_b64"),
            ))
        trace.outcome = footer["outcome"]
        trace.wall_clock = footer["wall_clock"]
        return trace


def _pack_mask(mask: np.ndarray) -> str:
    return base64.b64encode(np.packbits(mask.astype(np.uint8)).tobytes()).decode("ascii")


def run_episode(method: str, scenario: Scenario, noise_sigma: float = 0.0, seed: int = 0,
                heuristic_spec: str = "scripted", m: int = 4, h: int = 4,
                step_limit: int = STEP_LIMIT, time_limit: float = TIME_LIMIT_S,
                trace_path: Optional[str] = None, log_target_mask: bool = False,
                parallel_rollouts: bool = False,
                clock: Callable[[], float] = time.perf_counter,
                episode_id: Optional[str] = None) -> EpisodeTrace:
    """Full observe-plan-execute loop for one scenario.

    Determinism: all randomness derives from `seed`; repeated runs yield the
    same trace hash (wall-clock fields are excluded from the hash).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    episode_id = episode_id or f"{method}-s{scenario.seed}-r{seed}"
    trace = EpisodeTrace(episode_id=episode_id, method=method, seed=seed,
                         noise_sigma=noise_sigma, heuristic=heuristic_spec,
                         scenario=scenario, m=m, h=h)

    ss = np.random.SeedSequence(entropy=seed)
    noise_seed, policy_seed, planner_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    policy_rng = np.random.default_rng(policy_seed)
    planner_rng = np.random.default_rng(planner_seed)

    env = ShelfSearchEnv(scenario, noise=NoiseModel(noise_sigma), step_limit=step_limit,
                         noise_seed=noise_seed)
    heuristic = make_heuristic(heuristic_spec, scenario.target_type, scenario)
    history = ObservationHistory(key=episode_id)
    obs = env.reset()
    history.append(obs)

    planner = None
    controller = None
    queue: list = []
    recording = False
    if method in ("hybrid", "hybrid_limited"):
        ctx = PlannerContext(shelf=scenario.shelf, target_type=scenario.target_type,
                             target_shape=scenario.target_shape(),
                             target_uid=env.state.target_uid)
        planner = HybridPlanner(ctx, heuristic,
                                config=PlannerConfig(m=m, h=h, parallel_rollouts=parallel_rollouts))
    elif method == "hierarchical":
        controller = HierarchicalController(scenario.shelf, scenario.target_type,
                                            env.state.target_uid, planner_rng)
        controller.track(obs)
        controller.record(obs)

    wall = 0.0
    outcome = "step_limit"
    try:
        while env.terminal == "none":
            t0 = clock()
            if method == "hybrid":
                action = planner.plan(history, obs, planner_rng)
            elif method == "hybrid_limited":
                action = planner.plan_limited(history, obs, planner_rng)
            elif method == "greedy":
                action = greedy_action(history, heuristic)
            elif method in ("stochastic", "stochastic_gen"):
                action = stochastic_action(history, heuristic, policy_rng)
            else:  # hierarchical
                if not queue:
                    block = controller.next_block()
                    queue = list(block.plan)
                    recording = block.kind == "Search"
                action = queue.pop(0)
            wall += clock() - t0

            result = env.step(action)
            obs = result.observation
            history.append(obs)
            if controller is not None:
                controller.track(obs)
                if recording:
                    controller.record(obs)

            target = env.state.target
            target_pose = [target.pose.x, target.pose.y, target.pose.theta] if target else None
            mask_b64 = None
            if log_target_mask and target is not None:
                mask_b64 = _pack_mask(obs.footprint_mask(target.shape, target.pose))
            trace.records.append(StepRecord(
                t=env.steps - 1,
                action=[action.dx, action.dy, action.dtheta, action.dgrip],
                reward=result.reward,
                terminal=result.terminal,
                visible_ids=obs.visible_uids(),
                gripper_pose=[obs.gripper_pose.x, obs.gripper_pose.y, obs.gripper_pose.theta],
                target_pose=target_pose,
                plan_time=clock() - t0,
                target_mask_b64=mask_b64,
            ))
            if wall > time_limit:
                outcome = "time_limit"
                break
        else:
            outcome = {"retrieved": "success", "dropped": "dropped",
                       "step_limit": "step_limit"}[env.terminal]
    except RemoteUnavailable:
        outcome = "infrastructure_failure"
    finally:
        if hasattr(heuristic, "close"):
            heuristic.close()

    trace.outcome = outcome
    trace.wall_clock = round(wall, 6)  # persisted precision, so reports regenerate exactly
    if trace_path:
        trace.save(trace_path)
    return trace


# -- suites ---------------------------------------------------------------

DEFAULT_CLUTTER_BINS = ((0, 2), (3, 5), (6, 8), (9, 10))


@dataclass
class CellMetrics:
    method: str
    clutter_bin: tuple
    noise: float
    episodes: int
    success_rate: float
    avg_time_per_task: float
    avg_actions_per_task: float
    failures_excluded: int = 0  # infrastructure failures, not counted


@dataclass
class MetricsReport:
    cells: list
    master_seed: int

    def to_json(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "note": "time covers planning only; execution is simulated",
            "cells": [
                {
                    "method": c.method,
                    "clutter_bin": list(c.clutter_bin),
                    "noise": c.noise,
                    "episodes": c.episodes,
                    "success_rate": round(c.success_rate, 6),
                    "avg_time_per_task": round(c.avg_time_per_task, 6),
                    "avg_actions_per_task": round(c.avg_actions_per_task, 6),
                    "failures_excluded": c.failures_excluded,
                }
                for c in self.cells
            ],
        }

    def to_csv(self) -> str:
        lines = ["method,clutter_lo,clutter_hi,noise,episodes,success_rate,"
                 "avg_time_per_task,avg_actions_per_task,failures_excluded"]
        for c in self.cells:
            lines.append(
                f"{c.method},{c.clutter_bin[0]},{c.clutter_bin[1]},{c.noise:.3f},"
                f"{c.episodes},{c.success_rate:.6f},{c.avg_time_per_task:.6f},"
                f"{c.avg_actions_per_task:.6f},{c.failures_excluded}")
        return "\n".join(lines) + "\n"


def _require(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"config['{path}']: {msg}")


def parse_suite_config(config: dict) -> dict:
    _require(isinstance(config, dict), "", "must be a JSON object")
    out = {
        "master_seed": config.get("master_seed", 0),
        "episodes_per_cell": config.get("episodes_per_cell", 10),
        "methods": config.get("methods", [{"name": "hybrid", "m": 4, "h": 4,
                                           "heuristic": "scripted"}]),
        "clutter_bins": [tuple(b) for b in config.get("clutter_bins", DEFAULT_CLUTTER_BINS)],
        "noise_levels": config.get("noise_levels", [0.0]),
        "step_limit": config.get("step_limit", STEP_LIMIT),
        "time_limit": config.get("time_limit", TIME_LIMIT_S),
        "workers": config.get("workers", 1),
        # 'zero' freezes the clock so reruns emit byte-identical reports
        "clock": config.get("clock", "wall"),
    }
    _require(out["clock"] in ("wall", "zero"), "clock", "must be 'wall' or 'zero'")
    _require(isinstance(out["master_seed"], int), "master_seed", "must be an integer")
    _require(isinstance(out["episodes_per_cell"], int) and out["episodes_per_cell"] >= 1,
             "episodes_per_cell", "must be a positive integer")
    _require(isinstance(out["methods"], list) and out["methods"], "methods",
             "must be a non-empty list")
    for i, m in enumerate(out["methods"]):
        _require(isinstance(m, dict) and m.get("name") in METHODS, f"methods[{i}]",
                 f"name must be one of {METHODS}")
    for i, b in enumerate(out["clutter_bins"]):
        _require(len(b) == 2 and 0 <= b[0] <= b[1], f"clutter_bins[{i}]",
                 "must be [lo, hi] with 0 <= lo <= hi")
    for i, s in enumerate(out["noise_levels"]):
        _require(0.0 <= float(s) <= 0.25, f"noise_levels[{i}]", "must be in [0, 0.25]")
    return out


def _episode_args(cfg: dict, out_dir: Optional[str]):
    """Deterministic (cell, episode) grid with derived seeds."""
    cells = list(product(range(len(cfg["methods"])), range(len(cfg["clutter_bins"])),
                         range(len(cfg["noise_levels"]))))
    jobs = []
    for cell_idx, (mi, bi, ni) in enumerate(cells):
        method = cfg["methods"][mi]
        bin_lo, bin_hi = cfg["clutter_bins"][bi]
        noise = float(cfg["noise_levels"][ni])
        for ep in range(cfg["episodes_per_cell"]):
            ss = np.random.SeedSequence(entropy=(cfg["master_seed"], cell_idx, ep))
            scen_seed, run_seed, count_seed = (int(s.generate_state(1)[0]) % (2 ** 31)
                                               for s in ss.spawn(3))
            n_obstacles = int(np.random.default_rng(count_seed).integers(bin_lo, bin_hi + 1))
            trace_path = None
            if out_dir:
                trace_path = os.path.join(out_dir, "traces", f"cell{cell_idx:03d}_ep{ep:04d}.jsonl")
            jobs.append({
                "cell_idx": cell_idx, "ep": ep, "method": method["name"],
                "m": method.get("m", 4), "h": method.get("h", 4),
                "heuristic": method.get("heuristic", "scripted"),
                "clutter_bin": (bin_lo, bin_hi), "noise": noise,
                "scen_seed": scen_seed, "run_seed": run_seed,
                "n_objects": n_obstacles + 1,
                "step_limit": cfg["step_limit"], "time_limit": cfg["time_limit"],
                "trace_path": trace_path, "clock": cfg["clock"],
            })
    return cells, jobs


def _zero_clock() -> float:
    return 0.0


def _run_job(job: dict) -> tuple:
    scenario = sample_scenario(LEVELS["L1"], job["scen_seed"], n_objects=job["n_objects"])
    trace = run_episode(job["method"], scenario, noise_sigma=job["noise"],
                        seed=job["run_seed"], heuristic_spec=job["heuristic"],
                        m=job["m"], h=job["h"], step_limit=job["step_limit"],
                        time_limit=job["time_limit"], trace_path=job["trace_path"],
                        episode_id=f"cell{job['cell_idx']:03d}-ep{job['ep']:04d}",
                        clock=_zero_clock if job["clock"] == "zero" else time.perf_counter)
    return job["cell_idx"], job["ep"], trace.outcome, trace.wall_clock, trace.steps


def evaluate_suite(config: dict, out_dir: Optional[str] = None) -> MetricsReport:
    """Run a methods x clutter x noise grid and aggregate the three metrics.

    Scenario and run seeds derive from the master seed, so a rerun emits
    byte-identical reports. Episodes failing on infrastructure (heuristic
    service down) are excluded from averages and counted separately.
    """
    cfg = parse_suite_config(config)
    if out_dir:
        os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
    cells, jobs = _episode_args(cfg, out_dir)

    if cfg["workers"] > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    results.sort(key=lambda r: (r[0], r[1]))

    report = _aggregate(cfg, cells, results)
    if out_dir:
        _write_report(report, out_dir)
    return report


def _aggregate(cfg: dict, cells: list, results: list) -> MetricsReport:
    by_cell: dict = {}
    for cell_idx, ep, outcome, wall, steps in results:
        by_cell.setdefault(cell_idx, []).append((outcome, wall, steps))
    metrics = []
    for cell_idx, (mi, bi, ni) in enumerate(cells):
        rows = by_cell.get(cell_idx, [])
        counted = [r for r in rows if r[0] != "infrastructure_failure"]
        n = len(counted)
        metrics.append(CellMetrics(
            method=cfg["methods"][mi]["name"],
            clutter_bin=cfg["clutter_bins"][bi],
            noise=float(cfg["noise_levels"][ni]),
            episodes=n,
            success_rate=(sum(1 for r in counted if r[0] == "success") / n) if n else 0.0,
            avg_time_per_task=(sum(r[1] for r in counted) / n) if n else 0.0,
            avg_actions_per_task=(sum(r[2] for r in counted) / n) if n else 0.0,
            failures_excluded=len(rows) - n,
        ))
    return MetricsReport(cells=metrics, master_seed=cfg["master_seed"])


def _write_report(report: MetricsReport, out_dir: str) -> None:
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as f:
        f.write(report.to_csv())


def regenerate_report(config: dict, out_dir: str) -> MetricsReport:
    """Rebuild the report purely from persisted traces."""
    cfg = parse_suite_config(config)
    cells, jobs = _episode_args(cfg, out_dir)
    results = []
    for job in jobs:
        trace = EpisodeTrace.load(job["trace_path"])
        results.append((job["cell_idx"], job["ep"], trace.outcome, trace.wall_clock, trace.steps))
    return _aggregate(cfg, cells, results)


def plot_report(report: MetricsReport, out_dir: str) -> list:
    """Optional per-metric line charts over clutter bins (PNG files)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    noises = sorted({c.noise for c in report.cells})
    for metric, label in (("success_rate", "success rate"),
                          ("avg_time_per_task", "avg time per task [s]"),
                          ("avg_actions_per_task", "avg actions per task")):
        fig, axes = plt.subplots(1, len(noises), figsize=(4 * len(noises), 3), squeeze=False)
        for ax, noise in zip(axes[0], noises):
            rows = [c for c in report.cells if c.noise == noise]
            for method in sorted({c.method for c in rows}):
                series = [c for c in rows if c.method == method]
                series.sort(key=lambda c: c.clutter_bin)
                xs = [f"{c.clutter_bin[0]}-{c.clutter_bin[1]}" for c in series]
                ax.plot(xs, [getattr(c, metric) for c in series], marker="o", label=method)
            ax.set_title(f"noise={noise:.2f}")
            ax.set_xlabel("obstacles")
            ax.set_ylabel(label)
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths

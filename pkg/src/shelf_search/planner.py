"""Receding-horizon planning from heat-map-weighted root hypotheses.

Peak extraction turns the heuristic's heat-map into candidate target poses;
each feasible candidate becomes a full simulator state (obstacles as
currently observed, target placed at the peak). Stochastic rollouts score
each root and the first action of the best weighted rollout is executed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateHeatmap
from .environment import InternalSim, RewardSpec
from .geometry import Pose2, penetration, transform_polygon
from .heuristic import Heuristic, ObservationHistory, sample_action
from .observation import Observation, RASTER, RasterSpec, pixel_to_world
from .physics import Action, ActionCaps, FREE, GRASPED, GripperState, ObjectState, \
    ShelfGeometry, ShelfState


@dataclass(frozen=True)
class PlannerConfig:
    m: int = 4                  # rollouts per root
    h: int = 4                  # horizon depth
    max_peaks: int = 5
    peak_threshold: float = 0.5  # fraction of the heat-map maximum
    parallel_rollouts: bool = False

    def __post_init__(self):
        if self.m < 1 or self.h < 1:
            raise ValueError("m and h must be at least 1")


@dataclass
class RootHypothesis:
    state: ShelfState
    weight: float
    peak_pixel: Optional[tuple] = None


@dataclass
class RolloutResult:
    first_action: Action
    ret: float
    length: int
    terminated: bool


def extract_peaks(heatmap: np.ndarray, peak_threshold: float = 0.5,
                  max_peaks: int = 5) -> list:
    """Peaks of a heat-map as [(row, col), weight] pairs.

    Cells at or above peak_threshold * max form 8-connected components; each
    component contributes one peak at its maximum cell (ties broken toward
    the smallest row, then column). The strongest max_peaks peaks are kept
    and their values normalized into weights. Raises DegenerateHeatmap when
    the map carries no mass.
    """
    hm = np.asarray(heatmap, dtype=float)
    peak = float(hm.max())
    if peak < 1e-6:
        raise DegenerateHeatmap(f"max heat-map value {peak:.2e}")
    mask = hm >= peak_threshold * peak
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    peaks = []
    for k in range(1, count + 1):
        vals = np.where(labels == k, hm, -np.inf)
        idx = int(np.argmax(vals))  # row-major argmax: smallest row, then col
        r, c = divmod(idx, hm.shape[1])
        peaks.append(((r, c), float(hm[r, c])))
    peaks.sort(key=lambda p: (-p[1], p[0][0], p[0][1]))
    peaks = peaks[:max_peaks]
    total = sum(v for _, v in peaks)
    return [(pix, v / total) for pix, v in peaks]


def select_weighted(weights: Sequence[float], returns: Sequence[float]) -> int:
    """Index of the maximum weight * return; ties go to the lowest index."""
    scores = np.asarray(weights, dtype=float) * np.asarray(returns, dtype=float)
    return int(np.argmax(scores))


def rhp(sim, heuristic: Heuristic, root_state: ShelfState, history: ObservationHistory,
        m: int, h: int, gamma: float, rng: np.random.Generator,
        caps: ActionCaps = ActionCaps(), parallel: bool = False,
        collect: Optional[list] = None) -> tuple:
    """m stochastic depth-h rollouts from a root state; returns the first
    action and return of the best rollout.

    Each rollout follows policy samples on its own growing observation
    history. Per-step rewards are discounted by gamma**(j-1); a rollout that
    survives the horizon is bootstrapped with gamma**h times the heuristic
    value of its final history. RNG streams are split per rollout so results
    do not depend on execution order.
    """
    streams = rng.spawn(m)
    root_obs = sim.observe(root_state)  # rollouts share the root observation

    def run(i: int) -> RolloutResult:
        branch = history.branch()
        state = root_state.clone()
        branch.append(root_obs)
        ret = 0.0
        first = None
        terminated = False
        length = 0
        for j in range(1, h + 1):
            out = heuristic.evaluate(branch)
            action = sample_action(out.policy, streams[i], caps)
            if j == 1:
                first = action
            state, obs, reward, terminal = sim.step(state, action)
            ret += gamma ** (j - 1) * reward
            branch.append(obs)
            length = j
            if terminal != "none":
                terminated = True
                break
        if not terminated:
            ret += gamma ** h * heuristic.evaluate(branch).value
        return RolloutResult(first_action=first, ret=ret, length=length, terminated=terminated)

    if parallel and m > 1:
        with ThreadPoolExecutor(max_workers=min(m, 8)) as pool:
            results = list(pool.map(run, range(m)))
    else:
        results = [run(i) for i in range(m)]

    if collect is not None:
        collect.extend(results)
    best = int(np.argmax([r.ret for r in results]))
    return results[best].first_action, results[best].ret


@dataclass
class PlannerContext:
    """Task priors the planner needs to hypothesize root states."""

    shelf: ShelfGeometry
    target_type: int
    target_shape: "object"
    target_uid: int
    raster_spec: RasterSpec = RASTER
    caps: ActionCaps = field(default_factory=ActionCaps)


def _state_from_observation(obs: Observation, ctx: PlannerContext,
                            target_pose: Optional[Pose2]) -> ShelfState:
    """Simulator state holding the observed obstacles, optionally with the
    target hypothesized at a given pose."""
    objects = []
    have_target = False
    for v in obs.visible_objects:
        status = GRASPED if obs.grasped_object == v.uid else FREE
        objects.append(ObjectState(uid=v.uid, type_id=v.type_id, shape=v.shape,
                                   pose=v.pose, status=status))
        if v.uid == ctx.target_uid:
            have_target = True
    if not have_target and target_pose is not None:
        objects.append(ObjectState(uid=ctx.target_uid, type_id=ctx.target_type,
                                   shape=ctx.target_shape, pose=target_pose))
    gripper = GripperState(pose=obs.gripper_pose, aperture=obs.gripper_aperture,
                           grasped_object=obs.grasped_object)
    if gripper.grasped_object is not None:
        held = next((o for o in objects if o.uid == gripper.grasped_object), None)
        if held is not None:
            gripper.grasp_rel = gripper.pose.inverse().compose(held.pose)
        else:
            gripper.grasped_object = None
    return ShelfState(shelf=ctx.shelf, gripper=gripper, objects=objects,
                      target_uid=ctx.target_uid)


def _placement_feasible(pose: Pose2, obs: Observation, ctx: PlannerContext) -> bool:
    if not ctx.shelf.contains_centroid(pose.position):
        return False
    world = transform_polygon(ctx.target_shape, pose)
    for wall in ctx.shelf.wall_polygons():
        if penetration(wall, world) is not None:
            return False
    for v in obs.visible_objects:
        if v.uid == ctx.target_uid:
            continue
        if penetration(v.pose.apply(v.shape.vertices), world) is not None:
            return False
    return True


def generate_root_states(history: ObservationHistory, current_obs: Observation,
                         heuristic: Heuristic, ctx: PlannerContext,
                         config: PlannerConfig = PlannerConfig(),
                         rng: Optional[np.random.Generator] = None) -> list:
    """Root hypotheses for planning: one per feasible heat-map peak.

    A directly visible target short-circuits to a single weight-1 hypothesis
    at its observed pose. Peaks whose target placement penetrates a wall or
    an observed obstacle are discarded and the weights renormalized; if no
    usable peak survives (or the heat-map is degenerate) placements are
    sampled uniformly over the occluded region instead.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if current_obs.find_visible(ctx.target_type) is not None:
        return [RootHypothesis(_state_from_observation(current_obs, ctx, None), 1.0, None)]

    hypotheses = []
    try:
        peaks = extract_peaks(heuristic.evaluate(history).heatmap,
                              config.peak_threshold, config.max_peaks)
        for (r, c), w in peaks:
            world = pixel_to_world(r, c, current_obs.gripper_pose, ctx.raster_spec)
            pose = Pose2(world[0], world[1], 0.0)  # heat-map carries position only
            if _placement_feasible(pose, current_obs, ctx):
                hypotheses.append(RootHypothesis(
                    _state_from_observation(current_obs, ctx, pose), w, (r, c)))
    except DegenerateHeatmap:
        pass

    if not hypotheses:
        hypotheses = _fallback_hypotheses(current_obs, ctx, config, rng)

    total = sum(hyp.weight for hyp in hypotheses)
    for hyp in hypotheses:
        hyp.weight /= total
    return hypotheses


def _fallback_hypotheses(obs: Observation, ctx: PlannerContext,
                         config: PlannerConfig, rng: np.random.Generator) -> list:
    """Uniform sampling of feasible target sites, preferring occluded pixels."""
    out = []
    occluded = np.argwhere(obs.occluded_mask())
    if len(occluded):
        order = rng.permutation(len(occluded))
        for k in order[:200]:
            r, c = occluded[k]
            world = pixel_to_world(int(r), int(c), obs.gripper_pose, ctx.raster_spec)
            pose = Pose2(world[0], world[1], 0.0)
            if _placement_feasible(pose, obs, ctx):
                out.append(RootHypothesis(_state_from_observation(obs, ctx, pose),
                                          1.0, (int(r), int(c))))
                if len(out) >= config.max_peaks:
                    return out
    if out:
        return out
    for _ in range(200):
        pose = Pose2(rng.uniform(0.0, ctx.shelf.width), rng.uniform(0.0, ctx.shelf.depth),
                     0.0)
        if _placement_feasible(pose, obs, ctx):
            return [RootHypothesis(_state_from_observation(obs, ctx, pose), 1.0, None)]
    # nothing feasible anywhere: plan as if the target sat at the back center
    pose = Pose2(ctx.shelf.width / 2.0, ctx.shelf.depth * 0.8, 0.0)
    return [RootHypothesis(_state_from_observation(obs, ctx, pose), 1.0, None)]


class HybridPlanner:
    """Weighted receding-horizon planning over heat-map root hypotheses."""

    def __init__(self, ctx: PlannerContext, heuristic: Heuristic,
                 sim: Optional[InternalSim] = None,
                 config: PlannerConfig = PlannerConfig(),
                 reward: RewardSpec = RewardSpec()):
        self.ctx = ctx
        self.heuristic = heuristic
        self.sim = sim if sim is not None else InternalSim(reward=reward)
        self.config = config
        self.gamma = reward.gamma

    def roots(self, history: ObservationHistory, current_obs: Observation,
              rng: np.random.Generator) -> list:
        return generate_root_states(history, current_obs, self.heuristic, self.ctx,
                                    self.config, rng)

    def plan(self, history: ObservationHistory, current_obs: Observation,
             rng: np.random.Generator) -> Action:
        """One closed-loop action: argmax over weight-scaled rollout returns."""
        hyps = self.roots(history, current_obs, rng)
        streams = rng.spawn(len(hyps))
        actions, weights, returns = [], [], []
        for hyp, stream in zip(hyps, streams):
            action, ret = rhp(self.sim, self.heuristic, hyp.state, history,
                              self.config.m, self.config.h, self.gamma, stream,
                              self.ctx.caps, self.config.parallel_rollouts)
            actions.append(action)
            weights.append(hyp.weight)
            returns.append(ret)
        return actions[select_weighted(weights, returns)]

    def plan_limited(self, history: ObservationHistory, current_obs: Observation,
                     rng: np.random.Generator) -> Action:
        """Single-query variant: only the most likely hypothesis is evaluated."""
        hyps = self.roots(history, current_obs, rng)
        best = int(np.argmax([h.weight for h in hyps]))
        stream = rng.spawn(1)[0]
        action, _ = rhp(self.sim, self.heuristic, hyps[best].state, history,
                        self.config.m, self.config.h, self.gamma, stream,
                        self.ctx.caps, self.config.parallel_rollouts)
        return action

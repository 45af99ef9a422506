"""Three-headed heuristic interface: action distribution, value, heat-map.

Implementations are pure functions of the observation history, so planners
may evaluate concurrent rollout branches freely. A scripted potential-field
heuristic ships as the built-in implementation; a wire-protocol client for
a learned heuristic lives in protocol.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, runtime_checkable

import numpy as np
from scipy import ndimage

from .geometry import Pose2, normalize_angle
from .observation import Observation, RASTER, RasterSpec, pixel_to_world
from .physics import Action, ActionCaps, GripperParams, ShelfGeometry
from .physics import _points_in_convex


@dataclass(frozen=True)
class ActionDistribution:
    """Diagonal Gaussian over pre-squash action channels.

    Samples are mapped to bounded actions by per-channel tanh squashing, so
    the means are effectively bounded to the action caps.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=float))
        if self.mean.shape != (4,) or self.std.shape != (4,):
            raise ValueError("mean and std must have 4 channels")
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")


@dataclass(frozen=True)
class HeuristicOutput:
    policy: ActionDistribution
    value: float
    heatmap: np.ndarray  # (64, 64) float32 in [0, 1]


def squash_action(u: np.ndarray, caps: ActionCaps = ActionCaps()) -> Action:
    """Map unbounded channels to a capped Action via tanh."""
    u = np.asarray(u, dtype=float)
    return Action(
        dx=caps.linear * math.tanh(u[0]),
        dy=caps.linear * math.tanh(u[1]),
        dtheta=caps.angular * math.tanh(u[2]),
        dgrip=math.tanh(u[3]),
    )


def sample_action(dist: ActionDistribution, rng: np.random.Generator,
                  caps: ActionCaps = ActionCaps()) -> Action:
    """Draw a pre-squash Gaussian sample and squash it to the caps."""
    u = dist.mean + dist.std * rng.standard_normal(4)
    return squash_action(u, caps)


class ObservationHistory:
    """Append-only observation sequence for one episode or rollout branch.

    Branches copy the current sequence under a derived key so a remote
    heuristic can cache per-branch recurrent state deterministically.
    """

    def __init__(self, key: str = "ep", observations: Optional[list] = None):
        self.key = key
        self.observations: list = list(observations) if observations else []
        self._children = 0

    def append(self, obs: Observation) -> None:
        self.observations.append(obs)

    def branch(self) -> "ObservationHistory":
        self._children += 1
        return ObservationHistory(f"{self.key}.{self._children}", self.observations)

    @property
    def last(self) -> Observation:
        return self.observations[-1]

    def __len__(self) -> int:
        return len(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    def __iter__(self):
        return iter(self.observations)


@runtime_checkable
class Heuristic(Protocol):
    def evaluate(self, history: ObservationHistory) -> HeuristicOutput: ...


@dataclass(frozen=True)
class ScriptedParams:
    seen_value: float = 0.9
    seen_decay: float = 0.98
    occluded_value: float = 0.5
    floor: float = 0.01
    std: float = 0.15            # pre-squash std per channel
    repulse_radius: float = 0.06
    repulse_gain: float = 2.0
    retreat_depth: float = 0.08  # how far past the front edge to retreat
    align_gate: float = 0.6      # slow translation while heading error exceeds this


class ScriptedHeuristic:
    """Potential-field controller with a memory-based target heat-map.

    Heat-map: the target's footprint where it was last seen, decayed per
    elapsed step and kept only over currently occluded pixels; if the target
    was never seen (or its remembered spot is now visibly empty), every
    occluded pixel gets a uniform value. Observable target-free pixels stay
    at a small floor.

    Policy: steer the between-fingers capture center toward the heat-map
    argmax, repulse from nearby obstacle centroids, close on a captured
    target, and retreat past the front edge once the target is held.
    """

    def __init__(self, target_type: int,
                 shelf: ShelfGeometry = ShelfGeometry(),
                 caps: ActionCaps = ActionCaps(),
                 gripper: GripperParams = GripperParams(),
                 raster_spec: RasterSpec = RASTER,
                 params: ScriptedParams = ScriptedParams()):
        self.target_type = target_type
        self.shelf = shelf
        self.caps = caps
        self.gripper = gripper
        self.raster_spec = raster_spec
        self.params = params

    def evaluate(self, history: ObservationHistory) -> HeuristicOutput:
        if len(history) == 0:
            raise ValueError("history must contain at least one observation")
        obs = history.last
        heatmap = self._heatmap(history, obs)
        r, c = self._goal_pixel(heatmap)
        goal = pixel_to_world(int(r), int(c), obs.gripper_pose, self.raster_spec)
        mean = self._policy_mean(obs, goal)
        value = float(np.clip(-(np.linalg.norm(goal - obs.gripper_pose.position)
                                / self.caps.linear + 10.0), -50.0, 0.0))
        std = np.full(4, self.params.std)
        return HeuristicOutput(policy=ActionDistribution(mean, std), value=value, heatmap=heatmap)

    def _goal_pixel(self, heatmap: np.ndarray) -> tuple:
        """Argmax cell; a tied plateau (the uniform never-seen case) resolves
        to the pixel of the largest tied component nearest its own centroid,
        which steers exploration into the middle of unknown space instead of
        chasing a raster-order corner."""
        peak = float(heatmap.max())
        tied = heatmap >= peak - 1e-7
        if tied.sum() <= 1:
            r, c = np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)
            return int(r), int(c)
        labels, count = ndimage.label(tied, structure=np.ones((3, 3), dtype=int))
        if count > 1:
            sizes = ndimage.sum_labels(np.ones_like(heatmap), labels, range(1, count + 1))
            best = int(np.argmax(sizes)) + 1
        else:
            best = 1
        cells = np.argwhere(labels == best)
        centroid = cells.mean(axis=0)
        nearest = cells[int(np.argmin(((cells - centroid) ** 2).sum(axis=1)))]
        return int(nearest[0]), int(nearest[1])

    # -- heat-map ---------------------------------------------------------

    def _last_seen(self, history: ObservationHistory):
        for age, obs in enumerate(reversed(history.observations)):
            vis = obs.find_visible(self.target_type)
            if vis is not None:
                return vis, age
        return None, -1

    def _heatmap(self, history: ObservationHistory, obs: Observation) -> np.ndarray:
        p = self.params
        hm = np.full((self.raster_spec.size, self.raster_spec.size), p.floor, dtype=np.float32)
        vis, age = self._last_seen(history)
        if vis is not None:
            footprint = obs.footprint_mask(vis.shape, vis.pose)
            value = p.seen_value * p.seen_decay ** age
            if age == 0:
                if footprint.any():
                    hm[footprint] = value
                    return hm
            else:
                remembered = footprint & obs.occluded_mask()
                if remembered.any():
                    hm[remembered] = value
                    return hm
        # never seen, or the remembered spot is demonstrably empty
        hm[obs.occluded_mask()] = p.occluded_value
        return hm

    # -- policy -----------------------------------------------------------

    def _policy_mean(self, obs: Observation, goal: np.ndarray) -> np.ndarray:
        p = self.params
        g = obs.gripper_pose
        desired = np.zeros(2)
        dtheta = 0.0
        dgrip = 0.0

        if obs.grasped_object is not None:
            if obs.grasped_object == obs.target_uid:
                desired = np.array([0.0, -(p.retreat_depth + g.y)])
                dgrip = -1.0
            else:
                dgrip = 1.0  # holding clutter: let go
        else:
            target = obs.find_visible(self.target_type)
            if target is not None and self._in_capture(g, target.pose.position):
                dgrip = -1.0
            else:
                capture_world = g.apply(self.gripper.capture_center())
                desired = goal - capture_world
                heading = math.atan2(goal[1] - g.y, goal[0] - g.x)
                err = normalize_angle(heading - g.theta)
                dtheta = err
                for v in obs.visible_objects:
                    if v.uid == obs.target_uid:
                        continue
                    away = g.position - v.pose.position
                    d = float(np.linalg.norm(away))
                    if 1e-9 < d < p.repulse_radius:
                        desired = desired + away / d * (p.repulse_radius - d) * p.repulse_gain
                if abs(err) > p.align_gate:
                    desired = desired * 0.25
                dgrip = 1.0 if obs.gripper_aperture < 1.0 else 0.0

        local = g.rotation().T @ desired
        lin, ang = self.caps.linear, self.caps.angular
        clip = 0.995
        u = np.array([
            math.atanh(float(np.clip(local[0] / lin, -clip, clip))),
            math.atanh(float(np.clip(local[1] / lin, -clip, clip))),
            math.atanh(float(np.clip(dtheta / ang, -clip, clip))),
            math.atanh(float(np.clip(dgrip, -clip, clip))),
        ])
        return u

    def _in_capture(self, gripper_pose: Pose2, point: np.ndarray) -> bool:
        capture = gripper_pose.apply(self.gripper.capture_polygon())
        return bool(_points_in_convex(np.asarray(point, dtype=float)[None, :], capture)[0])

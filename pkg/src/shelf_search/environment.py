"""Episode environment: scenario sampling, noise injection, reward, termination.

The execution environment perturbs object parameters before every action
(modelling error); the planner's internal simulator always steps with
nominal parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EpisodeFinished, SamplingExhausted
from .geometry import CameraModel, ConvexPolygon, Pose2, penetration
from .observation import PALETTE, RASTER, Observation, RasterSpec, SemanticPalette, \
    render_observation
from .physics import Action, DROPPED, FREE, GripperState, NOMINAL_DENSITY, NOMINAL_FRICTION, \
    ObjectState, PhysicsParams, ShelfGeometry, ShelfState, physics_step

STEP_LIMIT = 50
GRIPPER_START_SETBACK = 0.06  # gripper starts this far in front of the shelf edge


@dataclass(frozen=True)
class RewardSpec:
    step_reward: float = -1.0
    drop_penalty: float = -50.0
    gamma: float = 0.995

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")


@dataclass(frozen=True)
class TaskParameterization:
    """Curriculum level: object count range and target placement region."""

    level: str
    count_range: tuple
    target_back_half: bool = False


LEVELS = {
    "L1": TaskParameterization("L1", (1, 4), False),
    "L2": TaskParameterization("L2", (5, 10), False),
    "L3": TaskParameterization("L3", (7, 10), True),
}


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian perturbation of object parameters, resampled per action.

    sigma is the standard deviation used for density (mean 1.0), friction
    (mean 0.3), and the relative perturbation of each body-frame vertex
    coordinate. Noised polygons are re-convexified by hull; noise is applied
    in the execution environment only.
    """

    sigma: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.sigma <= 0.25):
            raise ValueError("sigma must be in [0, 0.25]")


def random_convex_shape(rng: np.random.Generator,
                        vertex_range: tuple = (4, 8),
                        radius_range: tuple = (0.02, 0.05),
                        max_width: Optional[float] = None) -> ConvexPolygon:
    """Random strictly convex polygon with the requested vertex count and
    circumradius; optionally resampled until its caliper width fits max_width."""
    lo, hi = vertex_range
    for _ in range(1000):
        n = int(rng.integers(lo, hi + 1))
        angles = np.sort(rng.uniform(0.0, 2 * math.pi, n))
        if np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))) < 0.15:
            continue
        radii = rng.uniform(0.5, 1.0, n)
        pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        try:
            poly = ConvexPolygon.from_points(pts)
        except ValueError:
            continue
        if not (lo <= len(poly.vertices) <= hi):
            continue
        r = rng.uniform(*radius_range)
        poly = ConvexPolygon(poly.vertices * (r / poly.radius))
        if max_width is not None and poly.min_width() > max_width:
            continue
        return poly
    raise SamplingExhausted("could not sample a valid convex shape")


@dataclass
class ScenarioObject:
    type_id: int
    shape: ConvexPolygon
    pose: Pose2


@dataclass
class Scenario:
    """Initial shelf configuration; the target type occurs exactly once."""

    shelf: ShelfGeometry
    objects: list
    target_type: int
    seed: int

    def __post_init__(self):
        if sum(1 for o in self.objects if o.type_id == self.target_type) != 1:
            raise ValueError("target type must occur exactly once")

    def gripper_start(self) -> Pose2:
        return Pose2(self.shelf.width / 2.0, -GRIPPER_START_SETBACK, math.pi / 2)

    def target_shape(self) -> ConvexPolygon:
        for o in self.objects:
            if o.type_id == self.target_type:
                return o.shape
        raise ValueError("target missing")

    def initial_state(self) -> ShelfState:
        objects = [ObjectState(uid=i, type_id=o.type_id, shape=o.shape, pose=o.pose)
                   for i, o in enumerate(self.objects)]
        target_uid = next(i for i, o in enumerate(self.objects) if o.type_id == self.target_type)
        gripper = GripperState(pose=self.gripper_start(), aperture=1.0)
        return ShelfState(shelf=self.shelf, gripper=gripper, objects=objects,
                          target_uid=target_uid)

    def obstacle_count(self) -> int:
        return len(self.objects) - 1

    def to_json(self) -> dict:
        return {
            "shelf": {"width": self.shelf.width, "depth": self.shelf.depth},
            "objects": [
                {"type": o.type_id,
                 "vertices": [[float(x), float(y)] for x, y in o.shape.vertices],
                 "pose": [o.pose.x, o.pose.y, o.pose.theta]}
                for o in self.objects
            ],
            "target_type": self.target_type,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Scenario":
        shelf = ShelfGeometry(width=float(data["shelf"]["width"]),
                              depth=float(data["shelf"]["depth"]))
        objects = [
            ScenarioObject(type_id=int(o["type"]),
                           shape=ConvexPolygon(np.asarray(o["vertices"], dtype=float)),
                           pose=Pose2(*[float(v) for v in o["pose"]]))
            for o in data["objects"]
        ]
        return cls(shelf=shelf, objects=objects, target_type=int(data["target_type"]),
                   seed=int(data.get("seed", 0)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(json.load(f))


MAX_PLACEMENT_ATTEMPTS = 10_000
_PLACEMENT_CLEARANCE = 0.002
_FRONT_CLEARANCE = 0.01
_GRASPABLE_WIDTH = 0.075  # targets must fit the 0.085 m opening with margin


def _pose_fits(shape: ConvexPolygon, pose: Pose2, shelf: ShelfGeometry, placed: list) -> bool:
    world = pose.apply(shape.vertices)
    if np.min(world[:, 0]) < _PLACEMENT_CLEARANCE:
        return False
    if np.max(world[:, 0]) > shelf.width - _PLACEMENT_CLEARANCE:
        return False
    if np.min(world[:, 1]) < _FRONT_CLEARANCE:
        return False
    if np.max(world[:, 1]) > shelf.depth - _PLACEMENT_CLEARANCE:
        return False
    for other in placed:
        if penetration(other, world) is not None:
            return False
    return True


def sample_scenario(param: TaskParameterization, seed: int,
                    shelf: Optional[ShelfGeometry] = None,
                    n_objects: Optional[int] = None) -> Scenario:
    """Sample a non-penetrating initial configuration for a curriculum level.

    Object count is uniform over the level's range (unless pinned by
    n_objects); the target pose is uniform over the shelf, or over the back
    half for levels that require it. Raises SamplingExhausted when placement
    fails within the attempt budget.
    """
    shelf = shelf or ShelfGeometry()
    rng = np.random.default_rng(seed)
    lo, hi = param.count_range
    n = int(n_objects) if n_objects is not None else int(rng.integers(lo, hi + 1))
    if n < 1:
        raise ValueError("need at least the target object")

    shapes = [random_convex_shape(rng, max_width=_GRASPABLE_WIDTH)]
    shapes += [random_convex_shape(rng) for _ in range(n - 1)]

    attempts = 0
    placed = []
    objects = []
    for idx, shape in enumerate(shapes):
        is_target = idx == 0
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise SamplingExhausted(
                    f"placement failed after {MAX_PLACEMENT_ATTEMPTS} attempts (level {param.level})")
            x = rng.uniform(0.0, shelf.width)
            y_lo = shelf.depth / 2.0 if (is_target and param.target_back_half) else 0.0
            y = rng.uniform(y_lo, shelf.depth)
            theta = rng.uniform(-math.pi, math.pi)
            pose = Pose2(x, y, theta)
            if _pose_fits(shape, pose, shelf, placed):
                break
        placed.append(pose.apply(shape.vertices))
        objects.append(ScenarioObject(type_id=idx, shape=shape, pose=pose))

    return Scenario(shelf=shelf, objects=objects, target_type=0, seed=seed)


def apply_noise(state: ShelfState, model: NoiseModel, rng: np.random.Generator) -> ShelfState:
    """Perturbed copy of a state: density, friction, and vertex coordinates of
    every active object resampled around their nominals. sigma == 0 returns
    the input unchanged without consuming randomness."""
    if model.sigma == 0.0:
        return state
    sigma = model.sigma
    noised = state.clone()
    for obj in noised.objects:
        if obj.status == DROPPED:
            continue
        obj.density = max(0.05, NOMINAL_DENSITY + float(rng.normal(0.0, sigma)))
        obj.friction = max(0.0, NOMINAL_FRICTION + float(rng.normal(0.0, sigma)))
        jitter = 1.0 + rng.normal(0.0, sigma, obj.shape.vertices.shape)
        try:
            obj.shape = ConvexPolygon.from_points(obj.shape.vertices * jitter)
        except ValueError:
            pass  # degenerate draw: keep the nominal shape
    return noised


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminal: str  # none | dropped | retrieved | step_limit
    events: object = None


class ShelfSearchEnv:
    """Execution environment: observe -> act loop with reward accounting.

    Terminal causes: 'dropped' (any object off the shelf, overrides a
    same-step retrieval), 'retrieved', or 'step_limit' after 50 actions.
    """

    def __init__(self, scenario: Scenario,
                 noise: NoiseModel = NoiseModel(0.0),
                 reward: RewardSpec = RewardSpec(),
                 camera: CameraModel = CameraModel(),
                 physics: PhysicsParams = PhysicsParams(),
                 palette: SemanticPalette = PALETTE,
                 raster_spec: RasterSpec = RASTER,
                 step_limit: int = STEP_LIMIT,
                 noise_seed: int = 0):
        self.scenario = scenario
        self.noise = noise
        self.reward = reward
        self.camera = camera
        self.physics = physics
        self.palette = palette
        self.raster_spec = raster_spec
        self.step_limit = step_limit
        self._noise_rng = np.random.default_rng(noise_seed)
        self._nominal_shapes = {i: o.shape for i, o in enumerate(scenario.objects)}
        self.reset()

    def reset(self) -> Observation:
        self.state = self.scenario.initial_state()
        self.steps = 0
        self.terminal = "none"
        return self._observe()

    def _observe(self) -> Observation:
        return render_observation(self.state, self.camera, self.palette, self.raster_spec,
                                  self.physics.gripper)

    def step(self, action: Action) -> StepResult:
        if self.terminal != "none":
            raise EpisodeFinished(f"episode ended with '{self.terminal}'")
        stepped = apply_noise(self.state, self.noise, self._noise_rng)
        new_state, events = physics_step(stepped, action, self.physics)
        if stepped is not self.state:
            # poses and statuses evolved under noised parameters; the nominal
            # shapes and parameters describe the objects themselves
            for obj in new_state.objects:
                obj.shape = self._nominal_shapes[obj.uid]
                obj.density = NOMINAL_DENSITY
                obj.friction = NOMINAL_FRICTION
        self.state = new_state
        self.steps += 1

        reward = self.reward.step_reward
        if events.dropped_ids:
            reward += self.reward.drop_penalty

        if events.dropped_ids:
            self.terminal = "dropped"
        elif events.retrieved:
            self.terminal = "retrieved"
        elif self.steps >= self.step_limit:
            self.terminal = "step_limit"

        return StepResult(self._observe(), reward, self.terminal, events)


class InternalSim:
    """Noise-free simulator the planner rolls out in; stateless step contract."""

    def __init__(self, camera: CameraModel = CameraModel(),
                 reward: RewardSpec = RewardSpec(),
                 physics: PhysicsParams = PhysicsParams(),
                 palette: SemanticPalette = PALETTE,
                 raster_spec: RasterSpec = RASTER):
        self.camera = camera
        self.reward = reward
        self.physics = physics
        self.palette = palette
        self.raster_spec = raster_spec

    def observe(self, state: ShelfState) -> Observation:
        return render_observation(state, self.camera, self.palette, self.raster_spec,
                                  self.physics.gripper)

    def step(self, state: ShelfState, action: Action) -> tuple:
        """Returns (state, observation, reward, terminal_str)."""
        new_state, events = physics_step(state, action, self.physics)
        reward = self.reward.step_reward
        terminal = "none"
        if events.dropped_ids:
            reward += self.reward.drop_penalty
            terminal = "dropped"
        elif events.retrieved:
            terminal = "retrieved"
        return new_state, self.observe(new_state), reward, terminal

"""Comparison policies: greedy, stochastic, and a hierarchical planner whose
low-level plans come from kinodynamic RRT and are executed open-loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import Pose2, normalize_angle
from .heuristic import Heuristic, ObservationHistory, sample_action, squash_action
from .observation import Observation
from .physics import Action, ActionCaps, GripperParams, GripperState, ObjectState, \
    PhysicsParams, ShelfGeometry, ShelfState, physics_step, try_grasp


def greedy_action(history: ObservationHistory, heuristic: Heuristic,
                  caps: ActionCaps = ActionCaps()) -> Action:
    """Deterministic baseline: the squashed mean of the policy head."""
    return squash_action(heuristic.evaluate(history).policy.mean, caps)


def stochastic_action(history: ObservationHistory, heuristic: Heuristic,
                      rng: np.random.Generator, caps: ActionCaps = ActionCaps()) -> Action:
    """Sample an action from the policy head."""
    return sample_action(heuristic.evaluate(history).policy, rng, caps)


@dataclass
class RRTNode:
    state: ShelfState
    parent: Optional[int]
    action_from_parent: Optional[Action]


def _config_distance(pose: Pose2, q: np.ndarray) -> float:
    return math.hypot(pose.x - q[0], pose.y - q[1]) + 0.05 * abs(normalize_angle(pose.theta - q[2]))


def kinodynamic_rrt(start: ShelfState, goal_pred: Callable[[ShelfState], bool],
                    rng: np.random.Generator,
                    physics: PhysicsParams = PhysicsParams(),
                    max_nodes: int = 3000,
                    goal_sample: Optional[Callable[[np.random.Generator], np.ndarray]] = None,
                    goal_bias: float = 0.2,
                    tree_out: Optional[list] = None) -> Optional[list]:
    """Kinodynamic RRT over gripper configurations.

    Samples (x, y, heading) uniformly over the shelf plus its front apron,
    extends the nearest node by one steering action through the physics
    step, and rejects extensions that drop an object. Returns the action
    sequence reaching the goal predicate, or None once the node budget is
    spent.
    """
    if goal_pred(start):
        if tree_out is not None:
            tree_out.append(RRTNode(start, None, None))
        return []
    shelf = start.shelf
    caps = physics.caps
    nodes = [RRTNode(start, None, None)]
    poses = [start.gripper.pose]

    for _ in range(max_nodes):
        if goal_sample is not None and rng.uniform() < goal_bias:
            q = goal_sample(rng)
        else:
            q = np.array([rng.uniform(0.0, shelf.width),
                          rng.uniform(-0.1, shelf.depth),
                          rng.uniform(-math.pi, math.pi)])
        near = min(range(len(nodes)), key=lambda i: _config_distance(poses[i], q))
        pose = poses[near]
        dworld = np.array([q[0] - pose.x, q[1] - pose.y])
        local = pose.rotation().T @ dworld
        action = Action(
            dx=float(np.clip(local[0], -caps.linear, caps.linear)),
            dy=float(np.clip(local[1], -caps.linear, caps.linear)),
            dtheta=float(np.clip(normalize_angle(q[2] - pose.theta), -caps.angular, caps.angular)),
            dgrip=0.0,
        )
        new_state, events = physics_step(nodes[near].state, action, physics)
        if events.dropped_ids:
            continue
        nodes.append(RRTNode(new_state, near, action))
        poses.append(new_state.gripper.pose)
        if goal_pred(new_state):
            if tree_out is not None:
                tree_out.extend(nodes)
            plan = []
            i = len(nodes) - 1
            while nodes[i].parent is not None:
                plan.append(nodes[i].action_from_parent)
                i = nodes[i].parent
            plan.reverse()
            return plan
    if tree_out is not None:
        tree_out.extend(nodes)
    return None


def advance_gripper(pose: Pose2, action: Action) -> Pose2:
    """Gripper kinematics only: where a pose ends up after an action."""
    d = pose.rotation() @ np.array([action.dx, action.dy])
    return Pose2(pose.x + d[0], pose.y + d[1], pose.theta + action.dtheta)


def plan_gripper_path(start: Pose2, waypoints: list, caps: ActionCaps = ActionCaps(),
                      pos_tol: float = 2e-3, ang_tol: float = 2e-2,
                      max_steps: int = 200) -> list:
    """Open-loop action sequence visiting (x, y, theta) waypoints in order."""
    actions = []
    cur = start
    for wx, wy, wt in waypoints:
        for _ in range(max_steps):
            dworld = np.array([wx - cur.x, wy - cur.y])
            dth = normalize_angle(wt - cur.theta)
            if np.linalg.norm(dworld) < pos_tol and abs(dth) < ang_tol:
                break
            local = cur.rotation().T @ dworld
            a = Action(
                dx=float(np.clip(local[0], -caps.linear, caps.linear)),
                dy=float(np.clip(local[1], -caps.linear, caps.linear)),
                dtheta=float(np.clip(dth, -caps.angular, caps.angular)),
                dgrip=0.0,
            )
            actions.append(a)
            cur = advance_gripper(cur, a)
    return actions


@dataclass
class HighLevelAction:
    kind: str  # Search | Rearrange | MoveOut | Retrieve
    plan: list
    object_uid: Optional[int] = None


SEARCH_WAYPOINTS = 20
SWEEP_Y = -0.07


class HierarchicalController:
    """Search / Rearrange / MoveOut / Retrieve loop with RRT low-level plans.

    The controller only trusts information recorded during Search sweeps;
    every low-level plan is generated on the believed state and executed
    open-loop by the caller.
    """

    def __init__(self, shelf: ShelfGeometry, target_type: int, target_uid: int,
                 rng: np.random.Generator,
                 physics: PhysicsParams = PhysicsParams(),
                 rrt_budget: int = 3000):
        self.shelf = shelf
        self.target_type = target_type
        self.target_uid = target_uid
        self.rng = rng
        self.physics = physics
        self.rrt_budget = rrt_budget
        self.believed: dict = {}
        self.target_located = False
        self.gripper_pose: Optional[Pose2] = None
        self.gripper_aperture = 1.0
        self._last_kind: Optional[str] = None

    def record(self, obs: Observation) -> None:
        """Fold a Search-time observation into the believed object map."""
        for v in obs.visible_objects:
            self.believed[v.uid] = v
            if v.type_id == self.target_type:
                self.target_located = True

    def track(self, obs: Observation) -> None:
        self.gripper_pose = obs.gripper_pose
        self.gripper_aperture = obs.gripper_aperture

    def next_block(self) -> HighLevelAction:
        if self._last_kind in (None, "MoveOut", "Retrieve"):
            block = self._search_block()
        elif self._last_kind == "Search":
            if self.target_located:
                block = self._retrieve_block()
            else:
                block = self._rearrange_block()
        else:  # after Rearrange
            block = self._move_out_block()
        self._last_kind = block.kind
        if not block.plan:
            block.plan = [Action()]  # burn a step rather than spin
        return block

    # -- blocks -----------------------------------------------------------

    def _search_block(self) -> HighLevelAction:
        xs = np.linspace(0.03, self.shelf.width - 0.03, SEARCH_WAYPOINTS)
        waypoints = [(float(x), SWEEP_Y, math.pi / 2) for x in xs]
        plan = plan_gripper_path(self.gripper_pose, waypoints, self.physics.caps)
        return HighLevelAction("Search", plan)

    def _believed_state(self) -> ShelfState:
        objects = [ObjectState(uid=v.uid, type_id=v.type_id, shape=v.shape, pose=v.pose)
                   for v in self.believed.values()]
        gripper = GripperState(pose=self.gripper_pose, aperture=self.gripper_aperture)
        return ShelfState(shelf=self.shelf, gripper=gripper, objects=objects,
                          target_uid=self.target_uid)

    def _retrieve_block(self) -> HighLevelAction:
        state = self._believed_state()
        target = state.object_by_uid(self.target_uid)
        if target is None:
            self.target_located = False
            return self._search_block()
        gp = self.physics.gripper
        t_pos = target.centroid

        def goal_pred(s: ShelfState) -> bool:
            return try_grasp(s, gp) == self.target_uid

        def goal_sample(rng: np.random.Generator) -> np.ndarray:
            theta = rng.uniform(math.pi / 2 - 0.7, math.pi / 2 + 0.7)
            offset = Pose2(0, 0, theta).apply(gp.capture_center())
            return np.array([t_pos[0] - offset[0], t_pos[1] - offset[1], theta])

        plan = kinodynamic_rrt(state, goal_pred, self.rng, self.physics,
                               max_nodes=self.rrt_budget, goal_sample=goal_sample)
        if plan is None:
            return HighLevelAction("Retrieve", [], self.target_uid)
        end = self.gripper_pose
        for a in plan:
            end = advance_gripper(end, a)
        plan = plan + [Action(dgrip=-1.0)]
        plan += plan_gripper_path(end, [(end.x, -0.08, end.theta)], self.physics.caps)
        return HighLevelAction("Retrieve", plan, self.target_uid)

    def _rearrange_block(self) -> HighLevelAction:
        obstacles = [v for v in self.believed.values() if v.type_id != self.target_type]
        if not obstacles:
            return self._search_block()
        gpos = self.gripper_pose.position
        closest = min(obstacles, key=lambda v: float(np.linalg.norm(v.pose.position - gpos)))
        spot = self._free_back_spot(exclude_uid=closest.uid)
        state = self._believed_state()
        start = closest.pose.position
        push = spot - start
        push_len = float(np.linalg.norm(push))
        push_dir = push / push_len if push_len > 1e-9 else np.array([0.0, 1.0])

        def goal_pred(s: ShelfState) -> bool:
            obj = s.object_by_uid(closest.uid)
            if obj is None:
                return False
            return float(np.linalg.norm(obj.centroid - spot)) < 0.05

        def goal_sample(rng: np.random.Generator) -> np.ndarray:
            # waypoints along the push corridor, just behind the moving object
            t = rng.uniform(0.0, 1.0)
            behind = start + push * t - push_dir * (0.05 + rng.uniform(0.0, 0.03))
            return np.array([behind[0], behind[1], math.atan2(push_dir[1], push_dir[0])])

        plan = kinodynamic_rrt(state, goal_pred, self.rng, self.physics,
                               max_nodes=self.rrt_budget, goal_sample=goal_sample,
                               goal_bias=0.4)
        # an empty plan burns one step and the loop re-plans after a fresh Search
        return HighLevelAction("Rearrange", plan or [], closest.uid)

    def _move_out_block(self) -> HighLevelAction:
        pose = self.gripper_pose
        waypoints = [(pose.x, pose.y, math.pi / 2),
                     (pose.x, SWEEP_Y, math.pi / 2)]
        plan = plan_gripper_path(pose, waypoints, self.physics.caps)
        return HighLevelAction("MoveOut", plan)

    def _free_back_spot(self, exclude_uid: int) -> np.ndarray:
        """Largest-clearance site in the back third of the shelf."""
        xs = np.linspace(0.06, self.shelf.width - 0.06, 12)
        ys = np.linspace(self.shelf.depth * 2 / 3, self.shelf.depth - 0.04, 5)
        best, best_score = None, -1.0
        for x in xs:
            for y in ys:
                p = np.array([x, y])
                score = min(
                    [float(np.linalg.norm(p - v.pose.position))
                     for v in self.believed.values() if v.uid != exclude_uid] + [1.0])
                score = min(score, x, self.shelf.width - x, self.shelf.depth - y)
                if score > best_score:
                    best, best_score = p, score
        return best

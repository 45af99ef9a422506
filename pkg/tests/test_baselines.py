import math

import numpy as np
import pytest

from shelf_search.baselines import (HierarchicalController, advance_gripper, greedy_action,
                                    kinodynamic_rrt, plan_gripper_path, stochastic_action)
from shelf_search.environment import LEVELS, sample_scenario, ShelfSearchEnv
from shelf_search.geometry import CameraModel, Pose2
from shelf_search.heuristic import (ActionDistribution, HeuristicOutput, ObservationHistory,
                                    ScriptedHeuristic, sample_action, squash_action)
from shelf_search.observation import render_observation
from shelf_search.physics import (Action, GripperState, ObjectState, PhysicsParams,
                                  ShelfGeometry, ShelfState, physics_step)

from conftest import make_square

CAM = CameraModel()


class FixedHeuristic:
    def __init__(self, mean, std=0.15):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.full(4, std)

    def evaluate(self, history):
        return HeuristicOutput(policy=ActionDistribution(self.mean, self.std),
                               value=0.0, heatmap=np.full((64, 64), 0.5, np.float32))


def empty_history():
    h = ObservationHistory("b")
    h.append("obs")
    return h


def test_greedy_is_squashed_mean():
    heur = FixedHeuristic([0.35, 0.0, 0.0, 0.0])
    a = greedy_action(empty_history(), heur)
    assert a == squash_action(heur.mean)
    assert greedy_action(empty_history(), heur) == a  # no rng involved


def test_stochastic_matches_sample_action():
    heur = FixedHeuristic([0.0, 0.1, -0.2, 0.0])
    a = stochastic_action(empty_history(), heur, np.random.default_rng(3))
    b = sample_action(heur.evaluate(empty_history()).policy, np.random.default_rng(3))
    assert a == b


def test_greedy_equals_stochastic_in_zero_std_limit():
    heur = FixedHeuristic([0.4, -0.1, 0.2, 0.9], std=1e-12)
    g = greedy_action(empty_history(), heur)
    s = stochastic_action(empty_history(), heur, np.random.default_rng(0))
    assert g.dx == pytest.approx(s.dx, abs=1e-9)
    assert g.dgrip == pytest.approx(s.dgrip, abs=1e-9)


# -- RRT ------------------------------------------------------------------------

def single_object_state(x=0.25, y=0.15):
    gripper = GripperState(pose=Pose2(0.25, -0.06, math.pi / 2), aperture=1.0)
    obj = ObjectState(uid=0, type_id=0, shape=make_square(0.03), pose=Pose2(x, y, 0.0))
    return ShelfState(shelf=ShelfGeometry(), gripper=gripper, objects=[obj], target_uid=0)


def test_rrt_goal_already_true_gives_empty_plan():
    state = single_object_state()
    plan = kinodynamic_rrt(state, lambda s: True, np.random.default_rng(0))
    assert plan == []


def test_rrt_reaches_nearby_pose_on_most_seeds():
    start = single_object_state(x=0.4, y=0.3)  # object far away from the path
    goal_xy = np.array([0.25, -0.01])  # 0.05 m straight ahead of the start pose

    def goal_pred(s):
        return float(np.linalg.norm(s.gripper.pose.position - goal_xy)) < 0.02

    def goal_sample(r):
        return np.array([goal_xy[0], goal_xy[1], math.pi / 2])

    wins = 0
    for seed in range(100):
        plan = kinodynamic_rrt(start, goal_pred, np.random.default_rng(seed),
                               max_nodes=400, goal_sample=goal_sample)
        wins += plan is not None
    assert wins >= 95


def test_rrt_unreachable_goal_returns_none():
    state = single_object_state()
    plan = kinodynamic_rrt(state, lambda s: False, np.random.default_rng(1), max_nodes=50)
    assert plan is None


def test_rrt_plan_replays_to_goal():
    start = single_object_state(x=0.4, y=0.3)
    goal_xy = np.array([0.2, 0.1])

    def goal_pred(s):
        return float(np.linalg.norm(s.gripper.pose.position - goal_xy)) < 0.02

    plan = kinodynamic_rrt(start, goal_pred, np.random.default_rng(5), max_nodes=2000,
                           goal_sample=lambda r: np.array([goal_xy[0], goal_xy[1], math.pi / 2]))
    assert plan is not None
    state = start
    for a in plan:
        state, events = physics_step(state, a, PhysicsParams())
        assert not events.dropped_ids
    assert goal_pred(state)


def test_rrt_tree_nodes_replay_from_root():
    start = single_object_state(x=0.4, y=0.3)
    tree = []
    kinodynamic_rrt(start, lambda s: False, np.random.default_rng(2), max_nodes=40,
                    tree_out=tree)
    params = PhysicsParams()
    for node in tree:
        if node.parent is None:
            continue
        replay, _ = physics_step(tree[node.parent].state, node.action_from_parent, params)
        assert replay.gripper.pose == node.state.gripper.pose
        for a, b in zip(replay.objects, node.state.objects):
            assert a.pose == b.pose


# -- gripper path planning -----------------------------------------------------

def test_plan_gripper_path_reaches_waypoints():
    start = Pose2(0.25, -0.06, math.pi / 2)
    plan = plan_gripper_path(start, [(0.05, -0.07, math.pi / 2), (0.45, -0.07, math.pi / 2)])
    cur = start
    for a in plan:
        assert abs(a.dx) <= 0.03 + 1e-12 and abs(a.dy) <= 0.03 + 1e-12
        cur = advance_gripper(cur, a)
    assert math.hypot(cur.x - 0.45, cur.y + 0.07) < 5e-3


# -- hierarchical controller ------------------------------------------------------

def run_hierarchical(scen, seed=0, heuristic_rng=None):
    env = ShelfSearchEnv(scen)
    ctrl = HierarchicalController(scen.shelf, scen.target_type, env.state.target_uid,
                                  np.random.default_rng(seed))
    obs = env.reset()
    ctrl.track(obs)
    blocks = []
    queue = []
    recording = False
    while env.terminal == "none":
        if not queue:
            block = ctrl.next_block()
            blocks.append(block.kind)
            queue = list(block.plan)
            recording = block.kind == "Search"
        res = env.step(queue.pop(0))
        ctrl.track(res.observation)
        if recording:
            ctrl.record(res.observation)
    return env, blocks


def test_search_then_retrieve_when_target_visible():
    scen = sample_scenario(LEVELS["L1"], seed=3, n_objects=1)
    env, blocks = run_hierarchical(scen)
    assert blocks[0] == "Search"
    assert "Retrieve" in blocks
    assert "Rearrange" not in blocks[:blocks.index("Retrieve")]


def test_hidden_target_rearranges_closest_object():
    scen = sample_scenario(LEVELS["L1"], seed=3, n_objects=1)
    ctrl = HierarchicalController(scen.shelf, target_type=0, target_uid=0,
                                  rng=np.random.default_rng(0))
    ctrl.track(render_observation(scen.initial_state(), CAM))
    ctrl._last_kind = "Search"
    ctrl.target_located = False
    # two believed clutter objects at different distances
    from shelf_search.observation import VisibleObject
    near = VisibleObject(uid=5, type_id=5, pose=Pose2(0.25, 0.05, 0), shape=make_square(0.03))
    far = VisibleObject(uid=6, type_id=6, pose=Pose2(0.25, 0.3, 0), shape=make_square(0.03))
    ctrl.believed = {5: near, 6: far}
    block = ctrl.next_block()
    assert block.kind == "Rearrange"
    assert block.object_uid == 5  # closest to the robot


def test_move_out_follows_rearrange():
    scen = sample_scenario(LEVELS["L1"], seed=3, n_objects=1)
    ctrl = HierarchicalController(scen.shelf, target_type=0, target_uid=0,
                                  rng=np.random.default_rng(0))
    ctrl.track(render_observation(scen.initial_state(), CAM))
    ctrl._last_kind = "Rearrange"
    block = ctrl.next_block()
    assert block.kind == "MoveOut"


def test_retrieve_never_issued_before_target_located():
    scen = sample_scenario(LEVELS["L2"], seed=70, n_objects=8)
    env, blocks = run_hierarchical(scen)
    if "Retrieve" in blocks:
        first_retrieve = blocks.index("Retrieve")
        assert "Search" in blocks[:first_retrieve]

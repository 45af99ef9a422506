import math

import numpy as np
import pytest

from shelf_search.environment import LEVELS, sample_scenario
from shelf_search.geometry import CameraModel, Pose2, points_visible
from shelf_search.observation import (BOUNDARY_SAMPLES, PALETTE, RASTER, SemanticPalette,
                                      from_robot_centric, pixel_to_world, render_observation,
                                      to_robot_centric, world_to_pixel)
from shelf_search.physics import GripperState, ObjectState, ShelfGeometry, ShelfState

from conftest import make_square

CAM = CameraModel()


def observe(state):
    return render_observation(state, CAM)


def build_state(objects, gripper_pose=None, target_uid=0, aperture=1.0):
    gripper = GripperState(pose=gripper_pose or Pose2(0.25, -0.06, math.pi / 2),
                           aperture=aperture)
    return ShelfState(shelf=ShelfGeometry(), gripper=gripper, objects=objects,
                      target_uid=target_uid)


def sq(uid, x, y, side=0.04, type_id=None):
    return ObjectState(uid=uid, type_id=uid if type_id is None else type_id,
                       shape=make_square(side), pose=Pose2(x, y, 0.0))


# -- frames -------------------------------------------------------------------

def test_gripper_maps_to_anchor_pixel():
    g = Pose2(0.31, 0.12, 0.7)
    pix = world_to_pixel(g.position, g)
    col, row = pix[0]
    assert int(col) == RASTER.anchor_col
    assert int(row) == RASTER.anchor_row


def test_robot_centric_roundtrip(rng):
    for _ in range(200):
        g = Pose2(*rng.uniform(-0.2, 0.6, 2), rng.uniform(-math.pi, math.pi))
        p = rng.uniform(-0.5, 0.5, 2)
        back = from_robot_centric(to_robot_centric(p, g), g)
        np.testing.assert_allclose(back, p, atol=1e-9)
        pose = Pose2(*rng.uniform(-0.5, 0.5, 2), rng.uniform(-math.pi, math.pi))
        rt = from_robot_centric(to_robot_centric(pose, g), g)
        assert math.isclose(rt.x, pose.x, abs_tol=1e-9)
        assert math.isclose(rt.y, pose.y, abs_tol=1e-9)
        assert abs(rt.theta - pose.theta) < 1e-9 or abs(abs(rt.theta - pose.theta) - 2 * math.pi) < 1e-9


def test_point_ahead_maps_up_regardless_of_heading(rng):
    for _ in range(50):
        g = Pose2(*rng.uniform(0, 0.5, 2), rng.uniform(-math.pi, math.pi))
        ahead = g.position + 0.1 * np.array([math.cos(g.theta), math.sin(g.theta)])
        rc = to_robot_centric(ahead, g)
        np.testing.assert_allclose(rc, [0.0, 0.1], atol=1e-12)


def test_pixel_world_roundtrip():
    g = Pose2(0.2, 0.1, 1.1)
    for row, col in [(0, 0), (52, 32), (31, 63), (63, 5)]:
        w = pixel_to_world(row, col, g)
        pix = world_to_pixel(w, g)[0]
        assert int(math.floor(pix[0])) == col
        assert int(math.floor(pix[1])) == row


# -- visibility rule ------------------------------------------------------------

def test_hidden_target_absent_and_no_green_pixels():
    state = build_state([sq(0, 0.25, 0.25, side=0.03), sq(1, 0.25, 0.12, side=0.06)])
    obs = observe(state)
    assert 0 not in obs.visible_uids()
    assert 1 in obs.visible_uids()
    raster = obs.raster()
    green = np.all(raster == np.array(PALETTE.target, dtype=np.uint8), axis=-1)
    assert not green.any()


def test_visible_objects_satisfy_boundary_rule_exactly():
    scen = sample_scenario(LEVELS["L2"], seed=21)
    state = scen.initial_state()
    obs = observe(state)
    cam_pose = CAM.world_pose(state.gripper.pose)
    walls = state.shelf.wall_polygons()
    polys = {o.uid: o.world_vertices() for o in state.objects}
    for o in state.objects:
        others = [p for uid, p in polys.items() if uid != o.uid] + walls
        pts = o.pose.apply(o.shape.boundary_points(BOUNDARY_SAMPLES))
        seen = points_visible(cam_pose, CAM.fov_half_angle, CAM.max_range, others, pts).sum()
        assert (o.uid in obs.visible_uids()) == (seen >= BOUNDARY_SAMPLES / 2)


# -- raster -----------------------------------------------------------------------

def test_raster_deterministic_bytes():
    scen = sample_scenario(LEVELS["L2"], seed=5)
    a = observe(scen.initial_state()).raster()
    b = observe(scen.initial_state()).raster()
    assert a.tobytes() == b.tobytes()
    assert a.shape == (64, 64, 3) and a.dtype == np.uint8


def test_empty_shelf_no_white_inside_fov():
    state = build_state([], gripper_pose=Pose2(0.25, -0.02, math.pi / 2))
    obs = observe(state)
    raster = obs.raster()
    white = np.all(raster == 255, axis=-1)
    # FOV footprint: workspace pixels whose center is inside cone and range
    centers = from_robot_centric(RASTER.pixel_centers_rc(), state.gripper.pose)
    cam_pose = CAM.world_pose(state.gripper.pose)
    vis = points_visible(cam_pose, CAM.fov_half_angle, CAM.max_range,
                         state.shelf.wall_polygons(), centers).reshape(64, 64)
    assert not (white & vis).any()


def test_pixel_classification_matches_geometry(rng):
    """Grey/white pixels agree with the exact per-point visibility test."""
    mismatches = []
    for seed in range(100):
        scen = sample_scenario(LEVELS["L2"], seed=seed)
        state = scen.initial_state()
        obs = observe(state)
        raster = obs.raster()
        white = np.all(raster == np.array(PALETTE.occluded, dtype=np.uint8), axis=-1)
        grey = np.all(raster == np.array(PALETTE.observable, dtype=np.uint8), axis=-1)
        centers = from_robot_centric(RASTER.pixel_centers_rc(), state.gripper.pose)
        xmin, ymin, xmax, ymax = state.shelf.workspace
        in_ws = ((centers[:, 0] >= xmin) & (centers[:, 0] <= xmax)
                 & (centers[:, 1] >= ymin) & (centers[:, 1] <= ymax)).reshape(64, 64)
        occluders = [o.world_vertices() for o in state.active_objects()] \
            + state.shelf.wall_polygons()
        vis = points_visible(CAM.world_pose(state.gripper.pose), CAM.fov_half_angle,
                             CAM.max_range, occluders, centers).reshape(64, 64)
        sel = (white | grey) & in_ws
        agree = (white[sel] == ~vis[sel]).mean() if sel.any() else 1.0
        mismatches.append(agree)
    assert np.mean([m >= 0.99 for m in mismatches]) == 1.0


def test_rotation_equivariance_of_robot_centric_raster(rng):
    """Rotating the whole scene with the gripper leaves the raster unchanged."""
    from shelf_search.geometry import ConvexPolygon

    for trial in range(10):
        r = np.random.default_rng(trial)
        alpha = float(r.uniform(-math.pi, math.pi))
        pivot = np.array([0.25, 0.1])

        def rotate_pose(p: Pose2) -> Pose2:
            c, s = math.cos(alpha), math.sin(alpha)
            rot = np.array([[c, -s], [s, c]])
            xy = rot @ (p.position - pivot) + pivot
            return Pose2(xy[0], xy[1], p.theta + alpha)

        objs = [sq(0, 0.25, 0.2, side=0.03), sq(1, 0.18, 0.12), sq(2, 0.33, 0.15)]
        g = Pose2(0.25, -0.02, math.pi / 2)
        base = build_state(objs, gripper_pose=g)

        # rotating the shelf walls is not possible (they are task priors), so
        # compare only pixels that stay inside the workspace in both frames:
        # use a wall-free shelf stand-in by placing everything well inside
        rot_objs = [ObjectState(o.uid, o.type_id, o.shape, rotate_pose(o.pose))
                    for o in objs]
        rot = build_state(rot_objs, gripper_pose=rotate_pose(g))

        a = observe(base)
        b = observe(rot)
        ca = np.array([v.uid for v in a.visible_objects])
        cb = np.array([v.uid for v in b.visible_objects])
        np.testing.assert_array_equal(ca, cb)

        ra, rb = a.raster(), b.raster()
        # ignore wall/edge/grey-vs-white differences caused by the fixed shelf:
        # compare the object and gripper classes only
        interesting = np.zeros((64, 64), dtype=bool)
        for color in (PALETTE.target, PALETTE.clutter, PALETTE.gripper):
            interesting |= np.all(ra == np.array(color, dtype=np.uint8), axis=-1)
            interesting |= np.all(rb == np.array(color, dtype=np.uint8), axis=-1)
        agreement = (np.all(ra == rb, axis=-1)[interesting]).mean() if interesting.any() else 1.0
        assert agreement >= 0.9


def test_palette_colors_distinct():
    with pytest.raises(ValueError):
        SemanticPalette(target=(255, 0, 0))  # collides with clutter


def test_painter_order_objects_over_occlusion():
    # a visible object paints red over the grey/white background
    state = build_state([sq(1, 0.25, 0.1, type_id=1)], target_uid=99)
    obs = observe(state)
    raster = obs.raster()
    pix = world_to_pixel(np.array([0.25, 0.1]), state.gripper.pose)[0]
    col, row = int(pix[0]), int(pix[1])
    assert tuple(raster[row, col]) == PALETTE.clutter


def test_gripper_painted_blue_at_anchor():
    state = build_state([])
    raster = observe(state).raster()
    # the palm sits just behind the anchor pixel
    assert tuple(raster[RASTER.anchor_row + 2, RASTER.anchor_col]) == PALETTE.gripper

"""Deterministic quasi-static 2D pushing, grasping, and drop detection.

The contact model is kinematic: the gripper moves along an interpolated
path and penetrations are resolved geometrically each substep, so identical
inputs always produce bit-identical outputs. There is no momentum,
restitution, or stick-slip; pushes propagate through object chains and are
absorbed by the immovable shelf walls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import ConvexPolygon, Mtv, Pose2, normalize_angle, penetration, transform_polygon

FREE = "free"
GRASPED = "grasped"
DROPPED = "dropped"
RETRIEVED = "retrieved"

NOMINAL_DENSITY = 1.0
NOMINAL_FRICTION = 0.3


@dataclass(frozen=True)
class ActionCaps:
    """Per-channel magnitude limits; actions are clamped, never rejected."""

    linear: float = 0.03
    angular: float = 0.2


@dataclass(frozen=True)
class Action:
    """Gripper-frame pose increment: forward, lateral-left, rotation, aperture change."""

    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0
    dgrip: float = 0.0

    def clamped(self, caps: ActionCaps) -> "Action":
        return Action(
            dx=float(np.clip(self.dx, -caps.linear, caps.linear)),
            dy=float(np.clip(self.dy, -caps.linear, caps.linear)),
            dtheta=float(np.clip(self.dtheta, -caps.angular, caps.angular)),
            dgrip=float(np.clip(self.dgrip, -1.0, 1.0)),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta, self.dgrip])


@dataclass(frozen=True)
class GripperParams:
    """Two-finger parallel gripper, dimensions after a 2F-85 style hand."""

    max_open: float = 0.085
    finger_length: float = 0.045
    finger_width: float = 0.012
    palm_depth: float = 0.024

    def separation(self, aperture: float) -> float:
        return aperture * self.max_open

    def body_polygons(self, aperture: float) -> list:
        """Palm and finger rectangles in the gripper body frame (forward = +x)."""
        half = self.separation(aperture) / 2.0
        w = self.finger_width
        L = self.finger_length
        span = self.max_open / 2.0 + w
        palm = np.array([[-self.palm_depth, -span], [0.0, -span], [0.0, span], [-self.palm_depth, span]])
        left = np.array([[0.0, half], [L, half], [L, half + w], [0.0, half + w]])
        right = np.array([[0.0, -half - w], [L, -half - w], [L, -half], [0.0, -half]])
        return [palm, left, right]

    def capture_polygon(self) -> np.ndarray:
        """Between-fingers capture rectangle, evaluated at the 0.5 aperture crossing."""
        half = self.separation(0.5) / 2.0
        L = self.finger_length
        return np.array([[0.0, -half], [L, -half], [L, half], [0.0, half]])

    def capture_center(self) -> np.ndarray:
        return np.array([self.finger_length / 2.0, 0.0])

    def in_channel(self, local_point: np.ndarray, aperture: float) -> bool:
        """True when a body-frame point sits in the open channel between fingers."""
        x, y = local_point
        return 0.0 <= x <= self.finger_length and abs(y) <= self.separation(aperture) / 2.0


@dataclass(frozen=True)
class PhysicsParams:
    substeps: int = 8
    kappa: float = 0.5  # tangential-push rotation gain
    max_resolve_iters: int = 16
    resolve_tol: float = 1e-4
    caps: ActionCaps = field(default_factory=ActionCaps)
    gripper: GripperParams = field(default_factory=GripperParams)


@dataclass(frozen=True)
class ShelfGeometry:
    """Open-front shelf: immovable left/right/back walls, drop line at y = 0."""

    width: float = 0.50
    depth: float = 0.35
    wall_thickness: float = 0.02

    @property
    def workspace(self) -> tuple:
        return (0.0, 0.0, self.width, self.depth)

    @property
    def front_edge_y(self) -> float:
        return 0.0

    def wall_polygons(self) -> list:
        t = self.wall_thickness
        w, d = self.width, self.depth
        left = np.array([[-t, 0.0], [0.0, 0.0], [0.0, d + t], [-t, d + t]])
        right = np.array([[w, 0.0], [w + t, 0.0], [w + t, d + t], [w, d + t]])
        back = np.array([[-t, d], [w + t, d], [w + t, d + t], [-t, d + t]])
        return [left, right, back]

    def contains_centroid(self, p: np.ndarray) -> bool:
        return 0.0 <= p[0] <= self.width and 0.0 <= p[1] <= self.depth


@dataclass
class ObjectState:
    uid: int
    type_id: int
    shape: ConvexPolygon
    pose: Pose2
    density: float = NOMINAL_DENSITY
    friction: float = NOMINAL_FRICTION
    status: str = FREE
    _world: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")

    @property
    def centroid(self) -> np.ndarray:
        # body-frame shapes are centroid-centered, so the pose translation is the centroid
        return self.pose.position

    def world_vertices(self) -> np.ndarray:
        # memoized on pose identity; poses are immutable and replaced on motion
        cached = self._world
        if cached is not None and cached[0] is self.pose and cached[2] is self.shape:
            return cached[1]
        verts = transform_polygon(self.shape, self.pose)
        self._world = (self.pose, verts, self.shape)
        return verts

    def copy(self) -> "ObjectState":
        return ObjectState(self.uid, self.type_id, self.shape, self.pose,
                           self.density, self.friction, self.status, self._world)


@dataclass
class GripperState:
    pose: Pose2
    aperture: float = 1.0
    grasped_object: Optional[int] = None
    grasp_rel: Optional[Pose2] = None  # grasped object's pose in the gripper frame

    def __post_init__(self):
        self.aperture = float(np.clip(self.aperture, 0.0, 1.0))

    def body_polygons_world(self, params: GripperParams, pose: Optional[Pose2] = None,
                            aperture: Optional[float] = None) -> list:
        p = pose if pose is not None else self.pose
        a = aperture if aperture is not None else self.aperture
        return [p.apply(poly) for poly in params.body_polygons(a)]

    def copy(self) -> "GripperState":
        return GripperState(self.pose, self.aperture, self.grasped_object, self.grasp_rel)


@dataclass
class ShelfState:
    shelf: ShelfGeometry
    gripper: GripperState
    objects: list
    target_uid: int

    def clone(self) -> "ShelfState":
        return ShelfState(self.shelf, self.gripper.copy(), [o.copy() for o in self.objects],
                          self.target_uid)

    @property
    def target(self) -> Optional[ObjectState]:
        for o in self.objects:
            if o.uid == self.target_uid:
                return o
        return None

    def object_by_uid(self, uid: int) -> Optional[ObjectState]:
        for o in self.objects:
            if o.uid == uid:
                return o
        return None

    def active_objects(self) -> list:
        return [o for o in self.objects if o.status in (FREE, GRASPED)]


@dataclass(frozen=True)
class StepEvents:
    dropped_ids: tuple = ()
    grasp_acquired: Optional[int] = None
    grasp_lost: Optional[int] = None
    retrieved: bool = False


def _lerp_pose(a: Pose2, b: Pose2, t: float) -> Pose2:
    dth = normalize_angle(b.theta - a.theta)
    return Pose2(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t, a.theta + dth * t)


def _contact_point(poly_a: np.ndarray, poly_b: np.ndarray) -> np.ndarray:
    """Representative contact location: mean of mutually contained vertices."""
    pts = []
    for p, q in ((poly_a, poly_b), (poly_b, poly_a)):
        inside = _points_in_convex(q, p)
        if np.any(inside):
            pts.append(q[inside])
    if pts:
        return np.concatenate(pts).mean(axis=0)
    return 0.5 * (poly_a.mean(axis=0) + poly_b.mean(axis=0))


def _points_in_convex(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    edges = np.roll(poly, -1, axis=0) - poly
    n_in = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    rel = points[:, None, :] - poly[None, :, :]
    return np.all(np.einsum("pmd,md->pm", rel, n_in) >= -1e-12, axis=1)


def _move_object(obj: ObjectState, delta: np.ndarray, dtheta: float = 0.0) -> None:
    obj.pose = Pose2(obj.pose.x + delta[0], obj.pose.y + delta[1], obj.pose.theta + dtheta)


def _broad_skip(ca, ra, cb, rb) -> bool:
    return (ca[0] - cb[0]) ** 2 + (ca[1] - cb[1]) ** 2 > (ra + rb) ** 2


def _resolve_substep(state: ShelfState, gpose: Pose2, aperture: float,
                     gdelta: np.ndarray, gdtheta: float, params: PhysicsParams,
                     full: bool = False, closing: bool = False) -> None:
    """Push objects out of the gripper assembly, each other, and the walls.

    The gripper may end up jammed against an object that is itself pinned by
    a wall (the push is absorbed), but object-object and object-wall overlap
    always resolves below tolerance. Unless `full`, a substep whose gripper
    touches nothing returns immediately: contacts can only originate from
    gripper motion once the state is contact-free.
    """
    gp = params.gripper
    gripper_polys = [gpose.apply(p) for p in gp.body_polygons(aperture)]
    finger_reach = math.hypot(gp.finger_length, gp.max_open / 2 + gp.finger_width) + gp.palm_depth

    held = None
    if state.gripper.grasped_object is not None:
        held = state.object_by_uid(state.gripper.grasped_object)

    walls = state.shelf.wall_polygons()  # [left, right, back]
    free_objs = [o for o in state.objects if o.status == FREE]
    rotated = set()  # tangential rotation applies once per object per substep

    def resolve_gripper() -> bool:
        moved = False
        for obj in free_objs:
            world = obj.world_vertices()
            if not _broad_skip(gpose.position, finger_reach, obj.centroid, obj.shape.radius):
                local = gpose.apply_inverse(obj.centroid)
                # A graspable object whose centroid sits in the open gap is
                # enveloped by the fingers, not swept. While closing, the
                # channel never narrows below the capture width so the close
                # cannot expel a capture.
                channel_aperture = max(aperture, 0.5) if closing else aperture
                enveloped = (obj.shape.min_width() <= gp.max_open
                             and gp.in_channel(local, channel_aperture))
                for k, gpoly in enumerate(gripper_polys):
                    if enveloped and k > 0:
                        continue
                    mtv = penetration(gpoly, world)
                    if mtv is None:
                        continue
                    contact = _contact_point(gpoly, world)
                    _move_object(obj, mtv.vector)
                    if obj.uid not in rotated:
                        rotated.add(obj.uid)
                        _apply_push_rotation(obj, contact, mtv, gpose, gdelta, gdtheta, params)
                    world = obj.world_vertices()
                    moved = True
            if held is not None:
                if not _broad_skip(held.centroid, held.shape.radius, obj.centroid, obj.shape.radius):
                    hw = held.world_vertices()
                    mtv = penetration(hw, world)
                    if mtv is not None:
                        contact = _contact_point(hw, world)
                        _move_object(obj, mtv.vector)
                        if obj.uid not in rotated:
                            rotated.add(obj.uid)
                            _apply_push_rotation(obj, contact, mtv, gpose, gdelta, gdtheta, params)
                        moved = True
        return moved

    def resolve_pairs() -> bool:
        moved = False
        for i in range(len(free_objs)):
            a = free_objs[i]
            wa = a.world_vertices()
            for j in range(i + 1, len(free_objs)):
                b = free_objs[j]
                if _broad_skip(a.centroid, a.shape.radius, b.centroid, b.shape.radius):
                    continue
                mtv = penetration(wa, b.world_vertices())
                if mtv is None:
                    continue
                # split the correction so pushes propagate through chains
                _move_object(a, -0.5 * mtv.vector)
                _move_object(b, 0.5 * mtv.vector)
                wa = a.world_vertices()
                moved = True
        return moved

    shelf = state.shelf

    def resolve_walls() -> bool:
        moved = False
        for obj in free_objs:
            world = obj.world_vertices()
            # cheap slab rejects before the axis sweep
            touch_left = world[:, 0].min() < 0.0
            touch_right = world[:, 0].max() > shelf.width
            touch_back = world[:, 1].max() > shelf.depth
            if not (touch_left or touch_right or touch_back):
                continue
            for w, touching in zip(walls, (touch_left, touch_right, touch_back)):
                if not touching:
                    continue
                mtv = penetration(w, world)
                if mtv is None:
                    continue
                _move_object(obj, mtv.vector)  # walls are immovable; the push is absorbed
                world = obj.world_vertices()
                moved = True
        return moved

    progressed = full
    for _ in range(params.max_resolve_iters):
        moved = resolve_gripper()
        if not moved and not progressed:
            return  # gripper touched nothing; the state stays contact-free
        moved |= resolve_pairs()
        moved |= resolve_walls()
        progressed = True
        if not moved:
            break
    # gripper contact may stay jammed; object-object / object-wall must not
    for _ in range(params.max_resolve_iters):
        moved = resolve_pairs()
        moved |= resolve_walls()
        if not moved:
            break


def _apply_push_rotation(obj: ObjectState, contact: np.ndarray, mtv: Mtv, gpose: Pose2,
                         gdelta: np.ndarray, gdtheta: float, params: PhysicsParams) -> None:
    """Rotate a pushed object from the tangential component of the gripper motion."""
    rg = contact - gpose.position
    v = gdelta + gdtheta * np.array([-rg[1], rg[0]])  # rigid gripper velocity at contact
    n = mtv.normal
    t_hat = np.array([-n[1], n[0]])
    tangential = float(np.dot(v, t_hat))
    r = contact - obj.centroid
    lever = float(r[0] * t_hat[1] - r[1] * t_hat[0])
    gain = params.kappa * (obj.friction / NOMINAL_FRICTION) / (obj.density * max(obj.shape.area, 1e-8))
    dtheta = float(np.clip(gain * tangential * lever, -0.5, 0.5))
    if dtheta != 0.0:
        obj.pose = Pose2(obj.pose.x, obj.pose.y, obj.pose.theta + dtheta)


def try_grasp(state: ShelfState, params: GripperParams) -> Optional[int]:
    """Object acquired when the aperture closes: the free object whose centroid
    lies in the between-fingers capture rectangle, nearest to the palm."""
    g = state.gripper
    capture = g.pose.apply(params.capture_polygon())
    best = None
    best_depth = math.inf
    for obj in state.objects:
        if obj.status != FREE:
            continue
        if not _points_in_convex(obj.centroid[None, :], capture)[0]:
            continue
        depth = float(g.pose.apply_inverse(obj.centroid)[0])  # distance from the palm plane
        if depth < best_depth:
            best_depth = depth
            best = obj.uid
    return best


def detect_terminal(state: ShelfState) -> str:
    """'dropped' when any free object's centroid left the shelf, 'retrieved'
    when the grasped target crossed the front edge, else 'none'."""
    shelf = state.shelf
    for obj in state.objects:
        if obj.status == DROPPED:
            return "dropped"
        if obj.status == FREE and not shelf.contains_centroid(obj.centroid):
            return "dropped"
    target = state.target
    if target is not None:
        if target.status == RETRIEVED:
            return "retrieved"
        if target.status == GRASPED and target.centroid[1] < shelf.front_edge_y:
            return "retrieved"
    return "none"


def physics_step(state: ShelfState, action: Action, params: PhysicsParams) -> tuple:
    """Advance the shelf by one clamped gripper action.

    Returns (new_state, StepEvents). The input state is never mutated.
    """
    action = action.clamped(params.caps)
    state = state.clone()
    g = state.gripper

    p0 = g.pose
    world_delta = p0.rotation() @ np.array([action.dx, action.dy])
    p1 = Pose2(p0.x + world_delta[0], p0.y + world_delta[1], p0.theta + action.dtheta)
    ap0 = g.aperture
    ap1 = float(np.clip(ap0 + action.dgrip, 0.0, 1.0))

    n = params.substeps
    prev = p0
    for i in range(1, n + 1):
        t = i / n
        cur = _lerp_pose(p0, p1, t)
        ap = ap0 + (ap1 - ap0) * t
        gdelta = cur.position - prev.position
        gdtheta = normalize_angle(cur.theta - prev.theta)
        g.pose = cur
        g.aperture = ap
        if g.grasped_object is not None and g.grasp_rel is not None:
            held = state.object_by_uid(g.grasped_object)
            if held is not None:
                held.pose = cur.compose(g.grasp_rel)
        _resolve_substep(state, cur, ap, gdelta, gdtheta, params, full=(i == 1),
                         closing=ap1 < ap0)
        prev = cur

    grasp_acquired = None
    grasp_lost = None
    if ap0 >= 0.5 > ap1 and g.grasped_object is None:
        uid = try_grasp(state, params.gripper)
        if uid is not None:
            obj = state.object_by_uid(uid)
            obj.status = GRASPED
            g.grasped_object = uid
            g.grasp_rel = g.pose.inverse().compose(obj.pose)
            grasp_acquired = uid
    elif ap0 < 0.5 <= ap1 and g.grasped_object is not None:
        obj = state.object_by_uid(g.grasped_object)
        if obj is not None and obj.status == GRASPED:
            obj.status = FREE
        grasp_lost = g.grasped_object
        g.grasped_object = None
        g.grasp_rel = None

    dropped = []
    for obj in state.objects:
        if obj.status == FREE and not state.shelf.contains_centroid(obj.centroid):
            obj.status = DROPPED
            dropped.append(obj.uid)

    retrieved = False
    target = state.target
    if target is not None and target.status == GRASPED and target.centroid[1] < state.shelf.front_edge_y:
        target.status = RETRIEVED
        retrieved = True

    return state, StepEvents(dropped_ids=tuple(dropped), grasp_acquired=grasp_acquired,
                             grasp_lost=grasp_lost, retrieved=retrieved)

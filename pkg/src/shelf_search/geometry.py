"""Planar poses, convex polygons, collision queries, and camera visibility.

All polygons are numpy (N, 2) float arrays with counter-clockwise vertex
order. Body-frame polygons are centered on their area centroid so that the
world-frame centroid of an object equals its pose translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.ops import unary_union

TWO_PI = 2.0 * math.pi

# Step used to polygonize the max-range arc of the field of view (radians).
# Chord error at 1 m radius is below 1e-5 m, negligible next to test tolerances.
ARC_STEP = math.radians(0.5)


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform: rotation by theta then translation by (x, y)."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map body-frame point(s) to the world frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation().T + self.position

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map world-frame point(s) into this pose's body frame."""
        pts = np.asarray(points, dtype=float)
        return (pts - self.position) @ self.rotation()

    def compose(self, other: "Pose2") -> "Pose2":
        """Return self * other (other expressed in self's frame)."""
        p = self.apply(np.array([other.x, other.y]))
        return Pose2(p[0], p[1], self.theta + other.theta)

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(self.x * c + self.y * s), self.x * s - self.y * c, -self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area (positive for CCW order)."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(vertices: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    a = 0.5 * np.sum(cross)
    if abs(a) < 1e-18:
        return v.mean(axis=0)
    cx = np.sum((x + np.roll(x, -1)) * cross) / (6.0 * a)
    cy = np.sum((y + np.roll(y, -1)) * cross) / (6.0 * a)
    return np.array([cx, cy])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull vertices."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                u = out[-1] - out[-2]
                w = p - out[-2]
                if u[0] * w[1] - u[1] * w[0] > 1e-14:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


class ConvexPolygon:
    """Strictly convex polygon in body frame, CCW, centroid at the origin."""

    __slots__ = ("vertices", "area", "radius", "_minw")

    def __init__(self, vertices: np.ndarray):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("need at least 3 planar vertices")
        a = polygon_area(v)
        if a <= 0:
            raise ValueError("vertices must be in CCW order with positive area")
        edges = np.roll(v, -1, axis=0) - v
        nxt = np.roll(edges, -1, axis=0)
        crosses = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
        if np.any(crosses <= 1e-14):
            raise ValueError("polygon is not strictly convex")
        c = polygon_centroid(v)
        if np.max(np.abs(c)) > 1e-9:
            raise ValueError("centroid must sit at the body-frame origin")
        self.vertices = v
        self.area = a
        self.radius = float(np.max(np.linalg.norm(v, axis=1)))
        self._minw = None

    @classmethod
    def from_points(cls, points: np.ndarray) -> "ConvexPolygon":
        """Build from arbitrary points: hull, CCW order, recentered centroid."""
        hull = convex_hull(points)
        if len(hull) < 3:
            raise ValueError("points are degenerate (collinear hull)")
        return cls(hull - polygon_centroid(hull))

    def min_width(self) -> float:
        """Smallest caliper width (support extent over edge normals)."""
        if self._minw is None:
            v = self.vertices
            edges = np.roll(v, -1, axis=0) - v
            normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            proj = v @ normals.T
            self._minw = float(np.min(proj.max(axis=0) - proj.min(axis=0)))
        return self._minw

    def boundary_points(self, n: int) -> np.ndarray:
        """n points spread uniformly by arc length along the boundary."""
        v = self.vertices
        nxt = np.roll(v, -1, axis=0)
        seg = np.linalg.norm(nxt - v, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        s = (np.arange(n) + 0.5) / n * total
        idx = np.searchsorted(cum, s, side="right") - 1
        idx = np.clip(idx, 0, len(v) - 1)
        frac = (s - cum[idx]) / np.maximum(seg[idx], 1e-18)
        return v[idx] + (nxt[idx] - v[idx]) * frac[:, None]

    def __eq__(self, other):
        return isinstance(other, ConvexPolygon) and np.array_equal(self.vertices, other.vertices)

    def __repr__(self):
        return f"ConvexPolygon({len(self.vertices)} vertices, area={self.area:.5f})"


def transform_polygon(poly: ConvexPolygon, pose: Pose2) -> np.ndarray:
    """World-frame vertices of a body-frame polygon at a pose."""
    return pose.apply(poly.vertices)


class Mtv(NamedTuple):
    """Minimum translation vector separating polygon b from polygon a."""

    normal: np.ndarray  # unit vector, direction b must move
    depth: float

    @property
    def vector(self) -> np.ndarray:
        return self.normal * self.depth


def _edge_normals(vertices: np.ndarray) -> np.ndarray:
    n = np.empty_like(vertices)
    n[:-1, 0] = vertices[1:, 1] - vertices[:-1, 1]
    n[-1, 0] = vertices[0, 1] - vertices[-1, 1]
    n[:-1, 1] = vertices[:-1, 0] - vertices[1:, 0]
    n[-1, 1] = vertices[-1, 0] - vertices[0, 0]
    n /= np.sqrt(np.maximum((n * n).sum(axis=1), 1e-36))[:, None]
    return n


def penetration(a: np.ndarray, b: np.ndarray) -> Optional[Mtv]:
    """Separating-axis overlap test between convex world polygons.

    Returns None when disjoint (or merely touching), else the smallest
    translation that moves b out of a.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    # bounding-box reject before the full axis sweep
    if (a[:, 0].min() >= b[:, 0].max() or b[:, 0].min() >= a[:, 0].max()
            or a[:, 1].min() >= b[:, 1].max() or b[:, 1].min() >= a[:, 1].max()):
        return None
    axes = np.concatenate([_edge_normals(a), _edge_normals(b)], axis=0)
    pa = a @ axes.T
    pb = b @ axes.T
    overlap = np.minimum(pa.max(axis=0), pb.max(axis=0)) - np.maximum(pa.min(axis=0), pb.min(axis=0))
    k = int(np.argmin(overlap))
    depth = float(overlap[k])
    if depth <= 1e-12:
        return None
    normal = axes[k]
    # orient so that translating b along the normal separates the pair
    if float(np.dot(b.mean(axis=0) - a.mean(axis=0), normal)) < 0.0:
        normal = -normal
    return Mtv(normal.copy(), depth)


@dataclass(frozen=True)
class CameraModel:
    """Camera rigidly mounted on the gripper, looking along its heading."""

    offset: Pose2 = field(default_factory=Pose2)
    fov_half_angle: float = math.pi / 4
    max_range: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.fov_half_angle <= math.pi):
            raise ValueError("fov_half_angle must be in (0, pi]")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    def world_pose(self, gripper_pose: Pose2) -> Pose2:
        return gripper_pose.compose(self.offset)


def points_visible(
    camera_pose: Pose2,
    fov_half_angle: float,
    max_range: float,
    occluders: Sequence[np.ndarray],
    points: np.ndarray,
) -> np.ndarray:
    """Vectorized visibility test for world points.

    A point is visible when it lies inside the field-of-view cone, within
    max_range, and the open segment from the camera to the point crosses no
    occluder interior. Boundary grazing does not count as a crossing.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam = camera_pose.position
    d = pts - cam
    dist = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
    at_camera = dist < 1e-12

    ang = np.arctan2(d[:, 1], d[:, 0])
    rel = ang - camera_pose.theta
    dang = np.abs(np.arctan2(np.sin(rel), np.cos(rel)))
    visible = (dist <= max_range) & ((dang <= fov_half_angle + 1e-12) | at_camera)

    for occ in occluders:
        idx = np.flatnonzero(visible & ~at_camera)
        if idx.size == 0:
            break
        v = np.asarray(occ, dtype=float)

        # shadow-cone prune: only points inside the occluder's angular span
        # (and not closer than its bounding box) can be blocked by it
        rel_cam = v - cam
        if np.min(np.einsum("ij,ij->i", rel_cam, rel_cam)) > 1e-18:
            ref = math.atan2(v[0, 1] - cam[1], v[0, 0] - cam[0])
            va = np.arctan2(rel_cam[:, 1], rel_cam[:, 0]) - ref
            va = np.arctan2(np.sin(va), np.cos(va))
            half_span = float(np.max(np.abs(va)))
            if half_span < math.pi / 2 - 1e-6:
                bbox_dist = math.hypot(
                    max(v[:, 0].min() - cam[0], cam[0] - v[:, 0].max(), 0.0),
                    max(v[:, 1].min() - cam[1], cam[1] - v[:, 1].max(), 0.0))
                pa = ang[idx] - ref
                pa = np.arctan2(np.sin(pa), np.cos(pa))
                cand = (np.abs(pa) <= half_span + 1e-9) & (dist[idx] >= bbox_dist - 1e-12)
                idx = idx[cand]
                if idx.size == 0:
                    continue

        dsub = d[idx]
        n_in = -_edge_normals(v)  # inward normals of the CCW polygon
        a = np.einsum("ij,ij->i", rel_cam, n_in)  # (M,)   n_i . (v_i - c)
        bmat = dsub @ n_in.T                      # (N, M) n_i . d

        pos = bmat > 1e-14
        neg = bmat < -1e-14
        para = ~pos & ~neg
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = a[None, :] / np.where(para, 1.0, bmat)
        t0 = np.maximum(np.max(np.where(pos, ratio, -np.inf), axis=1, initial=0.0), 0.0)
        t1 = np.minimum(np.min(np.where(neg, ratio, np.inf), axis=1, initial=1.0), 1.0)
        feasible = ~np.any(para & (a > 1e-12)[None, :], axis=1)
        grazing = np.any(para & (np.abs(a) <= 1e-12)[None, :], axis=1)
        crosses = feasible & ~grazing & (t1 - t0 > 1e-9)
        visible[idx[crosses]] = False
    return visible


def point_visible(
    camera: CameraModel,
    gripper_pose: Pose2,
    occluders: Sequence[np.ndarray],
    point: np.ndarray,
) -> bool:
    """True when a single world point is visible from the mounted camera."""
    cam = camera.world_pose(gripper_pose)
    return bool(
        points_visible(cam, camera.fov_half_angle, camera.max_range, occluders, np.asarray(point))[0]
    )


@dataclass
class VisibilityRegion:
    """Partition of the workspace into observable and occluded area."""

    observable: shapely.Geometry
    occluded: shapely.Geometry
    workspace: tuple

    @property
    def observable_area(self) -> float:
        return float(self.observable.area)

    @property
    def occluded_area(self) -> float:
        return float(self.occluded.area)

    @property
    def observable_polygons(self) -> list:
        return _geometry_to_arrays(self.observable)

    @property
    def occluded_polygons(self) -> list:
        return _geometry_to_arrays(self.occluded)

    def classify_points(self, points: np.ndarray) -> np.ndarray:
        """True where a point lies in the observable part of the workspace."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return shapely.contains_xy(self.observable, pts[:, 0], pts[:, 1])


def _geometry_to_arrays(geom) -> list:
    if geom.is_empty:
        return []
    if geom.geom_type == "Polygon":
        parts = [geom]
    elif geom.geom_type in ("MultiPolygon", "GeometryCollection"):
        parts = [g for g in geom.geoms if g.geom_type == "Polygon"]
    else:
        parts = []
    return [np.asarray(p.exterior.coords)[:-1] for p in parts]


def _fov_wedge(camera_pose: Pose2, fov_half_angle: float, max_range: float) -> ShapelyPolygon:
    c = camera_pose.position
    if fov_half_angle >= math.pi - 1e-12:
        angles = np.arange(0.0, TWO_PI, ARC_STEP)
        ring = c + max_range * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return ShapelyPolygon(ring)
    n = max(8, int(math.ceil(2 * fov_half_angle / ARC_STEP)))
    angles = camera_pose.theta + np.linspace(-fov_half_angle, fov_half_angle, n + 1)
    arc = c + max_range * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return ShapelyPolygon(np.concatenate([[c], arc]))


_SHADOW_REACH = 10.0  # beyond any workspace at shelf scale


def _shadow_polygons(camera: np.ndarray, occluder: np.ndarray) -> list:
    """Shadow quads cast by every camera-facing edge of a convex occluder."""
    v = np.asarray(occluder, dtype=float)
    quads = []
    front = 0
    for i in range(len(v)):
        v1, v2 = v[i], v[(i + 1) % len(v)]
        edge = v2 - v1
        out = np.array([edge[1], -edge[0]])
        if float(np.dot(out, camera - v1)) <= 1e-12:
            continue
        front += 1
        r1 = v1 - camera
        r2 = v2 - camera
        n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
        if n1 < 1e-9 or n2 < 1e-9:
            # camera sits on a vertex: nudge it off by the documented epsilon
            r1 = r1 + 1e-9
            r2 = r2 - 1e-9
            n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
        quads.append(
            ShapelyPolygon([v1, v2, v2 + _SHADOW_REACH * r2 / n2, v1 + _SHADOW_REACH * r1 / n1])
        )
    if front == 0:
        # camera inside the occluder: everything is shadowed
        c = camera
        quads.append(ShapelyPolygon([c + [-_SHADOW_REACH, -_SHADOW_REACH],
                                     c + [_SHADOW_REACH, -_SHADOW_REACH],
                                     c + [_SHADOW_REACH, _SHADOW_REACH],
                                     c + [-_SHADOW_REACH, _SHADOW_REACH]]))
    return quads


def visibility_region(
    camera: CameraModel,
    gripper_pose: Pose2,
    occluders: Sequence[np.ndarray],
    workspace: tuple,
) -> VisibilityRegion:
    """Exact observable/occluded decomposition of the workspace rectangle.

    Observable points lie in the FOV cone within max_range with an
    unobstructed open segment to the camera; occluded is the workspace
    complement, which also absorbs everything outside the FOV.

    workspace is (xmin, ymin, xmax, ymax).
    """
    cam_pose = camera.world_pose(gripper_pose)
    ws = shapely.box(*workspace)
    wedge = _fov_wedge(cam_pose, camera.fov_half_angle, camera.max_range)
    observable = ws.intersection(wedge)
    blockers = []
    for occ in occluders:
        poly = ShapelyPolygon(np.asarray(occ, dtype=float))
        if not poly.is_valid:
            poly = poly.buffer(0)
        blockers.append(poly)
        blockers.extend(_shadow_polygons(cam_pose.position, occ))
    if blockers:
        observable = observable.difference(unary_union(blockers))
    occluded = ws.difference(observable)
    return VisibilityRegion(observable=observable, occluded=occluded, workspace=tuple(workspace))

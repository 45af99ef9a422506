"""Abstract robot-centric observation: geometric view plus 64x64x3 raster.

The raster is a pure rendering of geometric truth: observable/occluded
pixels come from exact per-pixel-center visibility tests, and object, wall,
edge, and gripper footprints are painted on top in a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image, ImageDraw

from .geometry import CameraModel, ConvexPolygon, Pose2, VisibilityRegion, normalize_angle, \
    points_visible, visibility_region
from .physics import GripperParams, ShelfState

BOUNDARY_SAMPLES = 32
VISIBLE_FRACTION = 0.5  # an object is reported when at least this share of
                        # its sampled boundary is visible


@dataclass(frozen=True)
class SemanticPalette:
    """Color coding of the abstract observation; versioned for checkpoints."""

    target: tuple = (0, 255, 0)
    clutter: tuple = (255, 0, 0)
    occluded: tuple = (255, 255, 255)
    observable: tuple = (128, 128, 128)
    shelf_edge: tuple = (0, 0, 0)
    walls: tuple = (139, 69, 19)
    gripper: tuple = (0, 0, 255)
    version: str = "1"

    def __post_init__(self):
        colors = [self.target, self.clutter, self.occluded, self.observable,
                  self.shelf_edge, self.walls, self.gripper]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")


PALETTE = SemanticPalette()


@dataclass(frozen=True)
class RasterSpec:
    """Robot-centric pixel grid: gripper at the anchor pixel, heading up."""

    size: int = 64
    resolution: float = 0.01  # meters per pixel
    anchor_col: int = 32
    anchor_row: int = 52

    def pixel_centers_rc(self) -> np.ndarray:
        """(size*size, 2) robot-frame coordinates of all pixel centers."""
        cols, rows = np.meshgrid(np.arange(self.size), np.arange(self.size))
        x = (cols.ravel() + 0.5 - self.anchor_col) * self.resolution
        y = (self.anchor_row - (rows.ravel() + 0.5)) * self.resolution
        return np.stack([x, y], axis=1)

    def rc_to_pixfloat(self, rc: np.ndarray) -> np.ndarray:
        """Robot-frame meters to continuous (col, row) pixel coordinates."""
        rc = np.atleast_2d(np.asarray(rc, dtype=float))
        col = self.anchor_col + rc[:, 0] / self.resolution
        row = self.anchor_row - rc[:, 1] / self.resolution
        return np.stack([col, row], axis=1)

    def pixel_center_rc(self, row: int, col: int) -> np.ndarray:
        return np.array([(col + 0.5 - self.anchor_col) * self.resolution,
                         (self.anchor_row - (row + 0.5)) * self.resolution])


RASTER = RasterSpec()


def to_robot_centric(value, gripper_pose: Pose2):
    """Express a world point or Pose2 in the robot frame (ahead = +y, right = +x)."""
    a = math.pi / 2 - gripper_pose.theta
    c, s = math.cos(a), math.sin(a)
    rot = np.array([[c, -s], [s, c]])
    if isinstance(value, Pose2):
        p = rot @ (value.position - gripper_pose.position)
        return Pose2(p[0], p[1], normalize_angle(value.theta + a))
    pts = np.asarray(value, dtype=float)
    return (pts - gripper_pose.position) @ rot.T


def from_robot_centric(value, gripper_pose: Pose2):
    """Inverse of to_robot_centric."""
    a = gripper_pose.theta - math.pi / 2
    c, s = math.cos(a), math.sin(a)
    rot = np.array([[c, -s], [s, c]])
    if isinstance(value, Pose2):
        p = rot @ value.position + gripper_pose.position
        return Pose2(p[0], p[1], normalize_angle(value.theta + a))
    pts = np.asarray(value, dtype=float)
    return pts @ rot.T + gripper_pose.position


def world_to_pixel(points: np.ndarray, gripper_pose: Pose2, spec: RasterSpec = RASTER) -> np.ndarray:
    """World points to continuous (col, row) raster coordinates."""
    return spec.rc_to_pixfloat(to_robot_centric(points, gripper_pose))


def pixel_to_world(row: int, col: int, gripper_pose: Pose2, spec: RasterSpec = RASTER) -> np.ndarray:
    """World coordinates of a raster pixel's center."""
    return from_robot_centric(spec.pixel_center_rc(row, col), gripper_pose)


class VisibleObject(NamedTuple):
    uid: int
    type_id: int
    pose: Pose2
    shape: ConvexPolygon


@dataclass
class Observation:
    """One partial observation: visible objects plus occlusion geometry.

    The raster, the per-pixel occlusion mask, and the exact occluded region
    are derived lazily from the geometric fields and cached; all are pure
    functions of the captured scene so repeated access is deterministic.
    """

    gripper_pose: Pose2
    gripper_aperture: float
    grasped_object: Optional[int]
    visible_objects: list
    camera: CameraModel
    shelf: "object"
    palette: SemanticPalette = PALETTE
    raster_spec: RasterSpec = RASTER
    target_uid: int = 0
    _occluders: list = field(default_factory=list, repr=False)
    _gripper_params: GripperParams = field(default_factory=GripperParams, repr=False)
    _raster: Optional[np.ndarray] = field(default=None, repr=False)
    _occluded_mask: Optional[np.ndarray] = field(default=None, repr=False)
    _region: Optional[VisibilityRegion] = field(default=None, repr=False)

    @property
    def camera_pose(self) -> Pose2:
        return self.camera.world_pose(self.gripper_pose)

    def visible_uids(self) -> list:
        return [v.uid for v in self.visible_objects]

    def find_visible(self, type_id: int) -> Optional[VisibleObject]:
        for v in self.visible_objects:
            if v.type_id == type_id:
                return v
        return None

    def occluded_mask(self) -> np.ndarray:
        """Boolean (size, size) grid: True where the pixel center is an
        occluded workspace point."""
        if self._occluded_mask is None:
            spec = self.raster_spec
            centers = from_robot_centric(spec.pixel_centers_rc(), self.gripper_pose)
            xmin, ymin, xmax, ymax = self.shelf.workspace
            in_ws = ((centers[:, 0] >= xmin) & (centers[:, 0] <= xmax)
                     & (centers[:, 1] >= ymin) & (centers[:, 1] <= ymax))
            vis = points_visible(self.camera_pose, self.camera.fov_half_angle,
                                 self.camera.max_range, self._occluders, centers)
            self._occluded_mask = (in_ws & ~vis).reshape(spec.size, spec.size)
        return self._occluded_mask

    def observable_mask(self) -> np.ndarray:
        spec = self.raster_spec
        centers = from_robot_centric(spec.pixel_centers_rc(), self.gripper_pose)
        xmin, ymin, xmax, ymax = self.shelf.workspace
        in_ws = ((centers[:, 0] >= xmin) & (centers[:, 0] <= xmax)
                 & (centers[:, 1] >= ymin) & (centers[:, 1] <= ymax)).reshape(spec.size, spec.size)
        return in_ws & ~self.occluded_mask()

    @property
    def occluded_region(self) -> VisibilityRegion:
        """Exact workspace decomposition (computed on demand)."""
        if self._region is None:
            self._region = visibility_region(self.camera, self.gripper_pose,
                                             self._occluders, self.shelf.workspace)
        return self._region

    def raster(self) -> np.ndarray:
        """(size, size, 3) uint8 semantic image in the robot-centric frame."""
        if self._raster is None:
            self._raster = self._render_raster()
        return self._raster

    def raster_bytes(self) -> bytes:
        return self.raster().tobytes()

    def footprint_mask(self, shape: ConvexPolygon, pose: Pose2) -> np.ndarray:
        """Boolean pixel mask of a polygon footprint, same painter as the raster."""
        spec = self.raster_spec
        img = Image.new("L", (spec.size, spec.size), 0)
        draw = ImageDraw.Draw(img)
        pix = world_to_pixel(pose.apply(shape.vertices), self.gripper_pose, spec)
        draw.polygon([tuple(p) for p in pix], fill=1)
        return np.asarray(img, dtype=bool)

    def _render_raster(self) -> np.ndarray:
        spec = self.raster_spec
        pal = self.palette
        img = np.empty((spec.size, spec.size, 3), dtype=np.uint8)
        img[:, :] = pal.observable
        img[self.occluded_mask()] = pal.occluded

        pil = Image.fromarray(img)
        draw = ImageDraw.Draw(pil)

        def paint(world_vertices, color):
            pix = world_to_pixel(world_vertices, self.gripper_pose, spec)
            draw.polygon([tuple(p) for p in pix], fill=color)

        for v in self.visible_objects:
            color = pal.target if v.uid == self.target_uid else pal.clutter
            paint(v.pose.apply(v.shape.vertices), color)
        for wall in self.shelf.wall_polygons():
            paint(wall, pal.walls)
        edge = world_to_pixel(np.array([[0.0, 0.0], [self.shelf.width, 0.0]]),
                              self.gripper_pose, spec)
        draw.line([tuple(edge[0]), tuple(edge[1])], fill=pal.shelf_edge, width=1)
        for part in self._gripper_params.body_polygons(self.gripper_aperture):
            paint(self.gripper_pose.apply(part), pal.gripper)
        return np.asarray(pil, dtype=np.uint8)


def render_observation(state: ShelfState, camera: CameraModel,
                       palette: SemanticPalette = PALETTE,
                       raster_spec: RasterSpec = RASTER,
                       gripper_params: GripperParams = GripperParams()) -> Observation:
    """Observe a shelf state from the gripper-mounted camera.

    An object is reported visible when at least half of its sampled boundary
    points (excluding self-occlusion) can be seen; walls and all active
    objects act as occluders.
    """
    cam_pose = camera.world_pose(state.gripper.pose)
    active = state.active_objects()
    object_polys = {o.uid: o.world_vertices() for o in active}
    walls = state.shelf.wall_polygons()

    visible = []
    for o in active:
        others = [p for uid, p in object_polys.items() if uid != o.uid] + walls
        pts = o.pose.apply(o.shape.boundary_points(BOUNDARY_SAMPLES))
        seen = points_visible(cam_pose, camera.fov_half_angle, camera.max_range, others, pts)
        if seen.sum() >= VISIBLE_FRACTION * BOUNDARY_SAMPLES:
            visible.append(VisibleObject(o.uid, o.type_id, o.pose, o.shape))

    occluders = list(object_polys.values()) + walls
    return Observation(
        gripper_pose=state.gripper.pose,
        gripper_aperture=state.gripper.aperture,
        grasped_object=state.gripper.grasped_object,
        visible_objects=visible,
        camera=camera,
        shelf=state.shelf,
        palette=palette,
        raster_spec=raster_spec,
        target_uid=state.target_uid,
        _occluders=occluders,
        _gripper_params=gripper_params,
    )

"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np
import pytest

from shelf_search.geometry import ConvexPolygon, Pose2


def make_square(side: float = 1.0) -> ConvexPolygon:
    h = side / 2.0
    return ConvexPolygon(np.array([[-h, -h], [h, -h], [h, h], [-h, h]]))


def random_convex(rng: np.random.Generator, radius: float = 0.04, n: int = 6) -> ConvexPolygon:
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    while np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))) < 0.2:
        angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    r = rng.uniform(0.5, 1.0, n) * radius
    pts = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
    return ConvexPolygon.from_points(pts)


def random_scene(rng: np.random.Generator, n_occluders: int,
                 workspace=(0.0, 0.0, 0.5, 0.35)):
    """Camera pose inside the workspace plus non-degenerate convex occluders."""
    xmin, ymin, xmax, ymax = workspace
    cam = Pose2(rng.uniform(xmin + 0.02, xmax - 0.02),
                rng.uniform(ymin + 0.02, ymax - 0.02),
                rng.uniform(-math.pi, math.pi))
    occluders = []
    for _ in range(n_occluders):
        poly = random_convex(rng, radius=rng.uniform(0.02, 0.06))
        center = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
        world = poly.vertices + center
        # keep the camera outside every occluder so scenes stay well posed
        if np.linalg.norm(center - cam.position) < 0.09:
            continue
        occluders.append(world)
    return cam, occluders


class RayCastOracle:
    """Visibility oracle: a depth profile sampled at fixed angular resolution.

    Rays are cast from the camera at bin-center angles against every occluder
    edge; a point is visible when it is inside the FOV and range and not
    deeper than the profile at its angle bin.
    """

    def __init__(self, camera_pose: Pose2, fov_half_angle: float, max_range: float,
                 occluders, resolution_deg: float = 0.1):
        self.cam = camera_pose.position
        self.heading = camera_pose.theta
        self.fov = fov_half_angle
        self.max_range = max_range
        self.n = int(round(360.0 / resolution_deg))
        centers = (np.arange(self.n) + 0.5) * 2 * math.pi / self.n - math.pi
        self.bin_angles = centers
        u = np.stack([np.cos(centers), np.sin(centers)], axis=1)
        depth = np.full(self.n, np.inf)
        for occ in occluders:
            v = np.asarray(occ, dtype=float)
            for i in range(len(v)):
                p1 = v[i]
                p2 = v[(i + 1) % len(v)]
                seg = p2 - p1
                w = p1 - self.cam
                denom = u[:, 0] * seg[1] - u[:, 1] * seg[0]
                ok = np.abs(denom) > 1e-14
                t = np.where(ok, (w[0] * seg[1] - w[1] * seg[0]) / np.where(ok, denom, 1.0), np.inf)
                s = np.where(ok, (w[0] * u[:, 1] - w[1] * u[:, 0]) / np.where(ok, denom, 1.0), -1.0)
                hit = ok & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
                depth = np.where(hit, np.minimum(depth, t), depth)
        self.depth = depth

    def _bins(self, angles: np.ndarray) -> np.ndarray:
        idx = np.floor((angles + math.pi) / (2 * math.pi) * self.n).astype(int)
        return np.clip(idx, 0, self.n - 1)

    def visible(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = pts - self.cam
        dist = np.hypot(d[:, 0], d[:, 1])
        ang = np.arctan2(d[:, 1], d[:, 0])
        rel = ang - self.heading
        in_fov = np.abs(np.arctan2(np.sin(rel), np.cos(rel))) <= self.fov + 1e-12
        return in_fov & (dist <= self.max_range) & (dist <= self.depth[self._bins(ang)])

    def visible_area_polar(self, workspace) -> float:
        """Observable workspace area by polar integration (camera inside)."""
        xmin, ymin, xmax, ymax = workspace
        rect = [np.array([[xmin, ymin], [xmax, ymin]]), np.array([[xmax, ymin], [xmax, ymax]]),
                np.array([[xmax, ymax], [xmin, ymax]]), np.array([[xmin, ymax], [xmin, ymin]])]
        u = np.stack([np.cos(self.bin_angles), np.sin(self.bin_angles)], axis=1)
        d_rect = np.full(self.n, 0.0)
        for seg_pts in rect:
            p1, p2 = seg_pts
            seg = p2 - p1
            w = p1 - self.cam
            denom = u[:, 0] * seg[1] - u[:, 1] * seg[0]
            ok = np.abs(denom) > 1e-14
            t = np.where(ok, (w[0] * seg[1] - w[1] * seg[0]) / np.where(ok, denom, 1.0), -1.0)
            s = np.where(ok, (w[0] * u[:, 1] - w[1] * u[:, 0]) / np.where(ok, denom, 1.0), -1.0)
            hit = ok & (t > 0) & (s >= 0.0) & (s <= 1.0)
            d_rect = np.where(hit, np.maximum(d_rect, t), d_rect)
        rel = self.bin_angles - self.heading
        in_fov = np.abs(np.arctan2(np.sin(rel), np.cos(rel))) <= self.fov
        d_eff = np.minimum(np.minimum(self.depth, d_rect), self.max_range)
        d_eff = np.where(in_fov, d_eff, 0.0)
        return float(np.sum(0.5 * d_eff ** 2 * (2 * math.pi / self.n)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

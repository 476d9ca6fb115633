"""Shared geometric types and pure projection math.

Conventions (used everywhere, never re-derived locally):
  World frame: right-handed, z up, ego at the origin.
  BEV grid: rows index x, columns index y; half-open cells that include
  their lower edge and exclude their upper edge.
  Camera frame: x right, y down, z forward (standard computer vision).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ATTRIBUTE_SPEED_THRESHOLD = 0.2  # m/s; above this a box counts as "moving"


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class Box3D:
    """An upright 3D bounding box with 9 regression parameters plus class.

    center: (x, y, z) meters; size: (l, w, h) meters; yaw: radians;
    velocity: (vx, vy) m/s. The attribute (moving/static) is derived from
    the velocity magnitude, never stored independently.
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray
    class_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if not np.all(self.size > 0):
            raise ValueError(f"box size must be strictly positive, got {self.size}")
        self.yaw = float(wrap_angle(self.yaw))

    @property
    def attribute(self) -> int:
        """1 if moving (speed above threshold), else 0."""
        return int(np.linalg.norm(self.velocity) > ATTRIBUTE_SPEED_THRESHOLD)

    def bev_corners(self) -> np.ndarray:
        """(4, 2) footprint corners in world xy, counter-clockwise."""
        l, w = self.size[0], self.size[1]
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def as_array(self) -> np.ndarray:
        """Flatten to (x, y, z, l, w, h, vx, vy, yaw, class_id)."""
        return np.concatenate(
            [self.center, self.size, self.velocity, [self.yaw, self.class_id]]
        )

    @staticmethod
    def from_array(a) -> "Box3D":
        a = np.asarray(a, dtype=np.float64)
        return Box3D(
            center=a[0:3], size=a[3:6], velocity=a[6:8], yaw=float(a[8]),
            class_id=int(round(a[9])),
        )


@dataclass
class CameraModel:
    """Pinhole camera: 3x3 intrinsics and a rigid world-to-camera transform."""

    intrinsics: np.ndarray  # 3x3, [[fx,0,cx],[0,fy,cy],[0,0,1]]
    rotation: np.ndarray    # 3x3 world->camera, orthonormal, det +1
    translation: np.ndarray # camera position in world coordinates, meters
    image_size: tuple       # (H, W) pixels

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (max error {err:.2e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be proper (det +1)")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) world points into the camera frame."""
        return (np.atleast_2d(points) - self.translation) @ self.rotation.T


def make_camera(yaw: float, position, fx: float, fy: float,
                image_size: tuple) -> CameraModel:
    """Level camera looking along world yaw direction, principal point centered."""
    h, w = image_size
    c, s = math.cos(yaw), math.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    rot = np.stack([right, down, forward])
    intr = np.array([[fx, 0.0, w / 2.0], [0.0, fy, h / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(intr, rot, np.asarray(position, dtype=np.float64), (h, w))


def project_to_camera(points: np.ndarray, cam: CameraModel):
    """Project (N, 3) world points through a pinhole camera.

    Returns (u, v, depth, visible) arrays; visible means depth > 0 and the
    pixel lies inside the image bounds.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc = cam.world_to_cam(pts)
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.intrinsics[0, 0] * pc[:, 0] / depth + cam.intrinsics[0, 2]
        v = cam.intrinsics[1, 1] * pc[:, 1] / depth + cam.intrinsics[1, 2]
    h, w = cam.image_size
    visible = (depth > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    visible &= np.isfinite(u) & np.isfinite(v)
    return u, v, depth, visible


def unproject_from_camera(u, v, depth, cam: CameraModel) -> np.ndarray:
    """Inverse of project_to_camera at a known depth; returns (N, 3) world points."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    x = (u - cam.intrinsics[0, 2]) / cam.intrinsics[0, 0] * depth
    y = (v - cam.intrinsics[1, 2]) / cam.intrinsics[1, 1] * depth
    pc = np.stack([x, y, depth], axis=-1)
    return pc @ cam.rotation + cam.translation


@dataclass
class BEVGridSpec:
    """Uniform BEV grid; optional z binning turns it into a 3D voxel grid."""

    x_range: tuple = (-8.0, 8.0)
    y_range: tuple = (-8.0, 8.0)
    cells: tuple = (32, 32)   # (rows over x, cols over y)
    z_range: tuple = (0.0, 4.0)
    z_bins: int = 8

    def __post_init__(self):
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError("grid ranges must be nonempty")

    @property
    def cell_size(self) -> tuple:
        return (
            (self.x_range[1] - self.x_range[0]) / self.cells[0],
            (self.y_range[1] - self.y_range[0]) / self.cells[1],
        )

    @property
    def z_cell(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.z_bins


def world_to_bev_cell(p, grid: BEVGridSpec):
    """Map world xy point(s) to (row, col) cell indices.

    Half-open binning: a cell includes its lower edge and excludes its upper
    edge, so a point exactly at the max range is out of range. Returns int
    arrays with -1 marking out-of-range points.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    sx, sy = grid.cell_size
    row = np.floor((p[:, 0] - grid.x_range[0]) / sx).astype(np.int64)
    col = np.floor((p[:, 1] - grid.y_range[0]) / sy).astype(np.int64)
    ok = (row >= 0) & (row < grid.cells[0]) & (col >= 0) & (col < grid.cells[1])
    row = np.where(ok, row, -1)
    col = np.where(ok, col, -1)
    return row, col


@dataclass
class PointCloud:
    """P x 5 array of returns: x, y, z (m), intensity in [0,1], ring index."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 5)
        if not np.all(np.isfinite(self.points[:, :3])):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

"""Procedural generation of labeled toy scenes.

A scene is a handful of upright boxes (cars, pedestrians, barriers) scattered
on a flat 16 m x 16 m world around the ego origin, observed by a 4-camera rig
tiling 360 degrees. Everything is a pure function of (seed, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geom import BEVGridSpec, Box3D, CameraModel, make_camera

CLASS_NAMES = ("car", "pedestrian", "barrier")

# Per-class priors: (l_range, w_range, h_range, speed_range).
CLASS_PRIORS = {
    0: ((3.5, 4.8), (1.7, 2.0), (1.4, 1.7), (0.0, 6.0)),   # car
    1: ((0.5, 0.8), (0.5, 0.8), (1.6, 1.8), (0.0, 1.8)),   # pedestrian
    2: ((1.5, 2.5), (0.3, 0.5), (0.9, 1.1), (0.0, 0.0)),   # barrier
}

# Fixed display colors per class (RGB in [0,1]) for the shaded renderer.
CLASS_COLORS = np.array([
    [0.9, 0.25, 0.2],   # car: red
    [0.2, 0.55, 0.9],   # pedestrian: blue
    [0.35, 0.8, 0.3],   # barrier: green
])


@dataclass
class WorldConfig:
    """World extent, sensor rig, and sampling parameters for scene generation."""

    grid: BEVGridSpec = field(default_factory=BEVGridSpec)
    n_cameras: int = 4
    image_size: tuple = (32, 64)       # (H, W)
    fov_deg: float = 90.0              # horizontal field of view per camera
    camera_height: float = 1.2
    n_boxes_min: int = 1
    n_boxes_max: int = 6
    min_center_radius: float = 2.0     # keep boxes off the sensor rig
    max_center_radius: float = 7.2
    lidar_points: int = 1024
    lidar_height: float = 1.8
    lidar_object_fraction: float = 0.6
    lidar_sigma: float = 0.02
    radar_fraction: float = 0.05
    radar_sigma: float = 0.3
    depth_bins: int = 8
    depth_range: tuple = (1.0, 9.0)
    pv_shape: tuple = (8, 16)

    @property
    def n_classes(self) -> int:
        return len(CLASS_NAMES)


def make_rig(config: WorldConfig) -> list:
    """Cameras at the ego center, evenly tiling 360 degrees in yaw."""
    h, w = config.image_size
    fx = w / (2.0 * math.tan(math.radians(config.fov_deg) / 2.0))
    rig = []
    for i in range(config.n_cameras):
        yaw = 2.0 * math.pi * i / config.n_cameras
        rig.append(make_camera(yaw, (0.0, 0.0, config.camera_height), fx, fx,
                               (h, w)))
    return rig


@dataclass
class Scene:
    boxes: list
    rig: list
    seed: int
    grid: BEVGridSpec


def _project_polygon(corners: np.ndarray, axis: np.ndarray):
    d = corners @ axis
    return d.min(), d.max()


def footprints_overlap(a: Box3D, b: Box3D) -> bool:
    """Separating-axis test between two BEV footprint rectangles."""
    ca, cb = a.bev_corners(), b.bev_corners()
    for corners in (ca, cb):
        for i in range(2):
            edge = corners[(i + 1) % 4] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            axis /= np.linalg.norm(axis)
            amin, amax = _project_polygon(ca, axis)
            bmin, bmax = _project_polygon(cb, axis)
            if amax <= bmin or bmax <= amin:
                return False
    return True


def _sample_box(rng: np.random.Generator, config: WorldConfig) -> Box3D:
    class_id = int(rng.integers(0, len(CLASS_NAMES)))
    lr, wr, hr, sr = CLASS_PRIORS[class_id]
    size = np.array([rng.uniform(*lr), rng.uniform(*wr), rng.uniform(*hr)])
    radius = rng.uniform(config.min_center_radius, config.max_center_radius)
    angle = rng.uniform(-math.pi, math.pi)
    center = np.array([radius * math.cos(angle), radius * math.sin(angle),
                       size[2] / 2.0])
    yaw = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(*sr)
    if class_id == 0:  # cars move along their heading
        vel = speed * np.array([math.cos(yaw), math.sin(yaw)])
    else:
        phi = rng.uniform(-math.pi, math.pi)
        vel = speed * np.array([math.cos(phi), math.sin(phi)])
    return Box3D(center=center, size=size, yaw=yaw, velocity=vel,
                 class_id=class_id)


def generate_scene(seed: int, config: WorldConfig) -> Scene:
    """Deterministically sample a scene with pairwise non-overlapping boxes.

    Raises RuntimeError when rejection sampling cannot place the requested
    number of boxes within 1000 attempts (overcrowded config).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE2E]))
    n_boxes = int(rng.integers(config.n_boxes_min, config.n_boxes_max + 1)) \
        if config.n_boxes_max > 0 else 0
    boxes = []
    attempts = 0
    while len(boxes) < n_boxes:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError(
                f"could not place {n_boxes} boxes in 1000 attempts; "
                "config is overcrowded"
            )
        cand = _sample_box(rng, config)
        x, y = cand.center[:2]
        if not (config.grid.x_range[0] <= x < config.grid.x_range[1]
                and config.grid.y_range[0] <= y < config.grid.y_range[1]):
            continue
        if any(footprints_overlap(cand, b) for b in boxes):
            continue
        boxes.append(cand)
    return Scene(boxes=boxes, rig=make_rig(config), seed=int(seed),
                 grid=config.grid)

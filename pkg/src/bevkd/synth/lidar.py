"""LiDAR and degraded-RADAR point cloud simulation via ray casting."""

from __future__ import annotations

import math

import numpy as np

from ..geom import PointCloud
from .scene import Scene, WorldConfig

# Intensity is class-correlated so a point-cloud model can tell classes apart.
CLASS_INTENSITY = {0: 0.8, 1: 0.5, 2: 0.3}
GROUND_INTENSITY = 0.1
N_RINGS = 16


def _box_frame(box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])  # box->world
    return rot


def ray_box_intersect(origin: np.ndarray, dirs: np.ndarray, box) -> np.ndarray:
    """Nearest entry distance t per ray for one box (slab method).

    origin: (3,), dirs: (R, 3) not necessarily normalized. Returns (R,) with
    inf where a ray misses the box; hits behind the origin are misses.
    """
    rot = _box_frame(box)
    o = (origin - box.center) @ rot  # into box frame (rot is box->world)
    d = dirs @ rot
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # Degenerate axes (d == 0): ray parallel to slab; inside iff |o| <= half.
    parallel = d == 0.0
    inside = np.abs(o) <= half
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_exit > 0)
    t = np.where(t_enter > 0, t_enter, t_exit)  # origin inside box: exit hit
    return np.where(hit, t, np.inf)


def _nearest_hits(origin: np.ndarray, dirs: np.ndarray, boxes: list):
    """Per-ray nearest hit over all boxes: (t, box_index) with -1 for miss."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        t = ray_box_intersect(origin, dirs, box)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i


def _sample_surface_points(rng, box, n):
    """Uniform points on the box surface, area-weighted over the 6 faces."""
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    half = box.size / 2.0
    signs = np.where(face % 2 == 0, 1.0, -1.0)
    axis = face // 2  # 0: +-x, 1: +-y, 2: +-z faces
    for a in range(3):
        m = axis == a
        o1, o2 = [i for i in range(3) if i != a]
        pts[m, a] = signs[m] * half[a]
        pts[m, o1] = u[m] * box.size[o1]
        pts[m, o2] = v[m] * box.size[o2]
    rot = _box_frame(box)
    return pts @ rot.T + box.center


def _ring_index(origin, pts):
    rel = pts - origin
    rxy = np.linalg.norm(rel[:, :2], axis=1)
    elev = np.arctan2(rel[:, 2], rxy)  # in (-pi/2, pi/2)
    ring = np.floor((elev + np.pi / 2) / np.pi * N_RINGS).astype(np.int64)
    return np.clip(ring, 0, N_RINGS - 1)


def simulate_lidar(scene: Scene, config: WorldConfig,
                   sigma: float | None = None) -> PointCloud:
    """Simulate exactly `config.lidar_points` returns.

    A configured fraction targets visible box surfaces (ray cast from the
    sensor, so occluded surfaces never appear); the rest hits the ground
    plane z=0. Gaussian range noise is applied along each ray.
    """
    if sigma is None:
        sigma = config.lidar_sigma
    rng = np.random.default_rng(
        np.random.SeedSequence([scene.seed, 0x11DA2]))
    p_total = config.lidar_points
    origin = np.array([0.0, 0.0, config.lidar_height])
    n_obj = int(round(p_total * config.lidar_object_fraction)) if scene.boxes else 0
    n_ground = p_total - n_obj

    rows = []
    if n_obj > 0:
        # Aim rays at random surface points; keep the nearest hit per ray.
        n_boxes = len(scene.boxes)
        box_pick = rng.integers(0, n_boxes, size=n_obj)
        targets = np.empty((n_obj, 3))
        for i, box in enumerate(scene.boxes):
            m = box_pick == i
            if m.any():
                targets[m] = _sample_surface_points(rng, box, int(m.sum()))
        dirs = targets - origin
        t, hit_i = _nearest_hits(origin, dirs, scene.boxes)
        t = np.where(np.isfinite(t), t, 1.0)  # fallback: the aimed point itself
        hit_i = np.where(hit_i >= 0, hit_i, box_pick)
        noise = rng.normal(0.0, sigma, size=n_obj)
        dn = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = origin + t[:, None] * dirs + noise[:, None] * dn
        cls = np.array([scene.boxes[i].class_id for i in hit_i])
        inten = np.array([CLASS_INTENSITY[c] for c in cls])
        ring = _ring_index(origin, pts)
        rows.append(np.column_stack([pts, inten, ring]))

    if n_ground > 0:
        gx = rng.uniform(scene.grid.x_range[0], scene.grid.x_range[1], n_ground)
        gy = rng.uniform(scene.grid.y_range[0], scene.grid.y_range[1], n_ground)
        gpts = np.column_stack([gx, gy, np.zeros(n_ground)])
        dirs = gpts - origin
        dn = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        gpts = gpts + rng.normal(0.0, sigma, size=n_ground)[:, None] * dn
        ring = _ring_index(origin, gpts)
        rows.append(np.column_stack(
            [gpts, np.full(n_ground, GROUND_INTENSITY), ring]))

    points = np.concatenate(rows, axis=0) if rows else np.zeros((0, 5))
    return PointCloud(points)


def simulate_radar(scene: Scene, config: WorldConfig) -> PointCloud:
    """Degrade the LiDAR simulation into a sparse, noisy, elevation-free cloud."""
    lidar = simulate_lidar(scene, config)
    rng = np.random.default_rng(
        np.random.SeedSequence([scene.seed, 0x2ADA2]))
    n = int(math.floor(len(lidar) * config.radar_fraction))
    idx = rng.choice(len(lidar), size=n, replace=False) if n > 0 else []
    pts = lidar.points[idx].copy()
    if n > 0:
        pts[:, 0] += rng.normal(0.0, config.radar_sigma, n)
        pts[:, 1] += rng.normal(0.0, config.radar_sigma, n)
        pts[:, 2] = 0.0
        pts[:, 4] = 0.0
    return PointCloud(pts)

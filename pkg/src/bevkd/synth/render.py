"""Multi-camera rendering of class-colored, shaded box silhouettes.

Each pixel is ray cast against every box; the nearest hit wins (exact
z-buffering). Per-object instance masks, tight 2D boxes, and the depth map
all derive from the same nearest-hit assignment, so they are consistent by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import CameraModel
from .lidar import _box_frame
from .scene import CLASS_COLORS, Scene

_AMBIENT = 0.35  # shading floor so back faces stay visible


@dataclass
class CameraFrameGT:
    """Rendered image plus per-object ground truth for one camera."""

    image: np.ndarray            # (H, W, 3) in [0, 1]
    depth_map: np.ndarray        # (H, W) meters, 0 where no surface
    instance_ids: np.ndarray     # (H, W) scene box index, -1 background
    masks: dict                  # box index -> (H, W) bool mask
    boxes2d: dict                # box index -> (cx, cy, w, h, class_id)


def _intersect_with_normals(origin, dirs, box):
    """Slab intersection returning (t, world normal) per ray; inf on miss."""
    rot = _box_frame(box)
    o = (origin - box.center) @ rot
    d = dirs @ rot
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = d == 0.0
    inside = np.abs(o) <= half
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    axis = tmin.argmax(axis=-1)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_enter > 0)  # camera outside the box
    t = np.where(hit, t_enter, np.inf)
    # Normal in box frame: +-e_axis against the ray direction.
    n_local = np.zeros_like(dirs)
    rows = np.arange(dirs.shape[0])
    n_local[rows, axis] = -np.sign(d[rows, axis])
    normal = n_local @ rot.T
    return t, normal


def _render_one(cam: CameraModel, scene: Scene):
    h, w = cam.image_size
    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs_cam = np.stack(
        [(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    dirs = dirs_cam @ cam.rotation  # rows of rotation are camera axes
    origin = cam.translation

    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_i = np.full(n_rays, -1, dtype=np.int64)
    best_n = np.zeros((n_rays, 3))
    for i, box in enumerate(scene.boxes):
        t, normal = _intersect_with_normals(origin, dirs, box)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
        best_n = np.where(closer[:, None], normal, best_n)

    hit = best_i >= 0
    # dirs_cam has unit z, so t equals camera-frame depth directly.
    depth = np.where(hit, best_t, 0.0).reshape(h, w)
    ids = best_i.reshape(h, w)

    image = np.zeros((h, w, 3))
    if hit.any():
        dn = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        shade = _AMBIENT + (1 - _AMBIENT) * np.abs(np.sum(dn * best_n, axis=1))
        cls = np.array([scene.boxes[i].class_id if i >= 0 else 0
                        for i in best_i])
        colors = CLASS_COLORS[cls] * shade[:, None]
        image.reshape(-1, 3)[hit] = colors[hit]

    masks, boxes2d = {}, {}
    for i, box in enumerate(scene.boxes):
        m = ids == i
        if not m.any():
            continue
        rows = np.nonzero(m.any(axis=1))[0]
        cols = np.nonzero(m.any(axis=0))[0]
        bw = cols[-1] - cols[0] + 1.0
        bh = rows[-1] - rows[0] + 1.0
        bcx = cols[0] + bw / 2.0
        bcy = rows[0] + bh / 2.0
        masks[i] = m
        boxes2d[i] = np.array([bcx, bcy, bw, bh, box.class_id])
    return CameraFrameGT(image=np.clip(image, 0.0, 1.0), depth_map=depth,
                         instance_ids=ids, masks=masks, boxes2d=boxes2d)


def render_cameras(scene: Scene) -> list:
    """Render every camera of the scene rig; returns one CameraFrameGT each."""
    return [_render_one(cam, scene) for cam in scene.rig]

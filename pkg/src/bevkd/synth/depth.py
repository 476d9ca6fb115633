"""Depth ground truth: projected point-cloud returns binned per PV pixel."""

from __future__ import annotations

import numpy as np

from ..geom import CameraModel, PointCloud, project_to_camera


def project_depth_gt(pc: PointCloud, cam: CameraModel, pv_shape: tuple,
                     depth_bins: int, depth_range: tuple) -> np.ndarray:
    """One-hot depth targets at PV-feature resolution.

    Each point projects into the camera; image coordinates are downscaled to
    the PV feature grid. Per PV pixel the nearest in-range point selects the
    one-hot bin; pixels with no in-range hit stay all-zero. Bins are uniform
    over [d_min, d_max), half-open, so d_max itself is out of range.

    Returns (H_pv, W_pv, D) float array.
    """
    h_pv, w_pv = pv_shape
    d_min, d_max = depth_range
    bin_width = (d_max - d_min) / depth_bins
    out = np.zeros((h_pv, w_pv, depth_bins))
    if len(pc) == 0:
        return out
    u, v, depth, visible = project_to_camera(pc.xyz, cam)
    in_range = visible & (depth >= d_min) & (depth < d_max)
    if not in_range.any():
        return out
    h_img, w_img = cam.image_size
    su, sv = w_img / w_pv, h_img / h_pv
    pu = np.floor(u[in_range] / su).astype(np.int64)
    pv = np.floor(v[in_range] / sv).astype(np.int64)
    pu = np.clip(pu, 0, w_pv - 1)
    pv = np.clip(pv, 0, h_pv - 1)
    d = depth[in_range]

    nearest = np.full((h_pv, w_pv), np.inf)
    np.minimum.at(nearest, (pv, pu), d)
    hit = np.isfinite(nearest)
    bins = np.floor((nearest[hit] - d_min) / bin_width).astype(np.int64)
    rows, cols = np.nonzero(hit)
    out[rows, cols, bins] = 1.0
    return out


def depth_gt_for_rig(pc: PointCloud, rig: list, pv_shape: tuple,
                     depth_bins: int, depth_range: tuple) -> np.ndarray:
    """Stack per-camera depth targets: (N_cam, H_pv, W_pv, D)."""
    return np.stack([
        project_depth_gt(pc, cam, pv_shape, depth_bins, depth_range)
        for cam in rig
    ])

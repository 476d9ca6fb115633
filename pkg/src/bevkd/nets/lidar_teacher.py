"""Point-cloud 3D detector: the frozen teacher, reused as the RADAR student.

Pipeline: dense voxelization -> shared per-z-slice 2D convs -> channel-stack
BEV projection -> BEV encoder-decoder -> dense detection head. Every
intermediate tensor the distillation losses consume is exposed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..geom import BEVGridSpec, PointCloud, world_to_bev_cell
from .blocks import LEAKY_SLOPE, BevDecoder, BEVEncoderDecoder, CenterPointHead

VOXEL_CHANNELS = 4  # count, mean intensity, mean z-offset, occupancy
C3D = 4             # per-slice feature channels after the slice convs


def voxelize(pc: PointCloud, grid: BEVGridSpec) -> np.ndarray:
    """Dense per-voxel statistics over the 3D grid.

    Returns (D, C, H, W) with channels: point count normalized by the max
    count, mean intensity, mean z-offset from the voxel center (meters),
    occupancy flag. Empty voxels are all zero.
    """
    d, (h, w) = grid.z_bins, grid.cells
    out = np.zeros((d, VOXEL_CHANNELS, h, w))
    if len(pc) == 0:
        return out
    pts = pc.points
    row, col = world_to_bev_cell(pts[:, :2], grid)
    zbin = np.floor((pts[:, 2] - grid.z_range[0]) / grid.z_cell).astype(np.int64)
    ok = (row >= 0) & (zbin >= 0) & (zbin < d)
    row, col, zbin = row[ok], col[ok], zbin[ok]
    pts = pts[ok]
    if pts.shape[0] == 0:
        return out
    z_center = grid.z_range[0] + (zbin + 0.5) * grid.z_cell

    count = np.zeros((d, h, w))
    np.add.at(count, (zbin, row, col), 1.0)
    i_sum = np.zeros((d, h, w))
    np.add.at(i_sum, (zbin, row, col), pts[:, 3])
    z_sum = np.zeros((d, h, w))
    np.add.at(z_sum, (zbin, row, col), pts[:, 2] - z_center)

    occ = count > 0
    safe = np.maximum(count, 1.0)
    out[:, 0] = count / count.max()
    out[:, 1] = np.where(occ, i_sum / safe, 0.0)
    out[:, 2] = np.where(occ, z_sum / safe, 0.0)
    out[:, 3] = occ.astype(np.float64)
    return out


def bev_project(f3d: torch.Tensor) -> torch.Tensor:
    """Stack the z slices of a (D, C, H, W) volume along channels: no
    arithmetic, a pure reshape to (D*C, H, W)."""
    d, c, h, w = f3d.shape
    return f3d.reshape(d * c, h, w)


def bev_unproject(f_bev: torch.Tensor, z_bins: int) -> torch.Tensor:
    """Inverse of bev_project."""
    dc, h, w = f_bev.shape
    return f_bev.reshape(z_bins, dc // z_bins, h, w)


def mean_activation(f3d: torch.Tensor) -> torch.Tensor:
    """Per-cell mean absolute activation over (z, channel), max-normalized.

    All-zero input maps to an all-zero output; otherwise the grid maximum is
    exactly 1.
    """
    m = f3d.abs().mean(dim=(0, 1))
    peak = m.max()
    if peak > 0:
        m = m / peak
    return m


@dataclass
class TeacherOutputs:
    f3d: torch.Tensor      # (D, C3D, H, W)
    f_bev: torch.Tensor    # (D*C3D, H, W)
    f_ref: torch.Tensor    # (C_REF, H, W)
    cls: torch.Tensor      # (|S|, H, W) in (0, 1)
    reg: torch.Tensor      # (9, H, W)
    h_tilde: torch.Tensor  # (H, W) in [0, 1]


class PointCloudDetector(nn.Module):
    """CenterPoint-style detector over voxelized point clouds.

    `with_bev_decoder` attaches the small activation-map decoder needed when
    this architecture is trained as a distillation student.
    """

    def __init__(self, grid: BEVGridSpec, n_classes: int, c_ref: int = 32,
                 with_bev_decoder: bool = False):
        super().__init__()
        self.grid = grid
        c_bev = grid.z_bins * C3D
        self.slice_conv = nn.Sequential(
            nn.Conv2d(VOXEL_CHANNELS, 16, 3, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(16, C3D, 3, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.encdec = BEVEncoderDecoder(c_bev, c_ref)
        self.head = CenterPointHead(c_ref, n_classes)
        self.bev_decoder = BevDecoder(c_bev) if with_bev_decoder else None

    def forward(self, pc: PointCloud) -> TeacherOutputs:
        dtype = next(self.parameters()).dtype
        vox = torch.as_tensor(voxelize(pc, self.grid), dtype=dtype)
        f3d = self.slice_conv(vox)          # z slices ride the batch dim
        f_bev = bev_project(f3d)
        f_ref = self.encdec(f_bev)
        cls, reg = self.head(f_ref)
        if self.bev_decoder is not None:
            h = self.bev_decoder(f_bev)
        else:
            h = mean_activation(f3d)
        return TeacherOutputs(f3d=f3d, f_bev=f_bev, f_ref=f_ref, cls=cls,
                              reg=reg, h_tilde=h)

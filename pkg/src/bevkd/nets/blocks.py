"""Differentiable building blocks shared by every network.

All modules use NCHW tensor layout. Gradients come from autograd; the test
suite holds every block to a central finite-difference contract at float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..geom import BEVGridSpec, unproject_from_camera, world_to_bev_cell

LEAKY_SLOPE = 0.1
CLS_BIAS_PRIOR = -2.19  # logistic(-2.19) ~ 0.1, focal-loss-friendly start


@dataclass
class LayerSpec:
    cin: int
    cout: int
    kernel: int = 3
    stride: int = 1
    nonlinearity: bool = True
    norm: bool = False


@dataclass
class ConvStackSpec:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.cout != b.cin:
                raise ValueError(
                    f"channel counts do not chain: {a.cout} -> {b.cin}")
        for l in self.layers:
            if l.stride < 1:
                raise ValueError("strides must be >= 1")


class ConvStack(nn.Module):
    """Plain 2D conv stack with leaky-rectified nonlinearities."""

    def __init__(self, spec: ConvStackSpec):
        super().__init__()
        self.spec = spec
        mods = []
        for l in spec.layers:
            mods.append(nn.Conv2d(l.cin, l.cout, l.kernel, stride=l.stride,
                                  padding=l.kernel // 2))
            if l.norm:
                mods.append(nn.GroupNorm(1, l.cout))
            if l.nonlinearity:
                mods.append(nn.LeakyReLU(LEAKY_SLOPE))
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


def init_module(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Orthogonal conv/linear weights, zero biases, deterministic under seed."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            flat = w.reshape(w.shape[0], -1) if w.dim() > 2 else w
            with torch.no_grad():
                nn.init.orthogonal_(flat, generator=generator)
                m.weight.copy_(flat.reshape(w.shape))
                if m.bias is not None:
                    m.bias.zero_()
    return module


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_grl):
        ctx.lambda_grl = lambda_grl
        return x  # exact identity, no copy

    @staticmethod
    def backward(ctx, grad):
        return grad * (-ctx.lambda_grl), None


def gradient_reversal(x: torch.Tensor, lambda_grl: float) -> torch.Tensor:
    """Identity forward; backward multiplies the gradient by -lambda_grl."""
    return _GradReverse.apply(x, float(lambda_grl))


def voxel_pool(cells: torch.Tensor, feats: torch.Tensor,
               grid: BEVGridSpec) -> torch.Tensor:
    """Sum-pool per-point features into a BEV grid.

    cells: (M, 2) int64 (row, col) with -1 marking out-of-range points;
    feats: (M, C). Returns (C, H, W), differentiable w.r.t. feats.
    """
    h, w = grid.cells
    keep = cells[:, 0] >= 0
    idx = cells[keep, 0] * w + cells[keep, 1]
    out = feats.new_zeros(h * w, feats.shape[1])
    out = out.index_add(0, idx, feats[keep])
    return out.reshape(h, w, -1).permute(2, 0, 1)


def points_to_cells(points_xy: np.ndarray, grid: BEVGridSpec) -> torch.Tensor:
    row, col = world_to_bev_cell(points_xy, grid)
    return torch.from_numpy(np.stack([row, col], axis=1))


def lss_geometry(rig: list, pv_shape: tuple, depth_bins: int,
                 depth_range: tuple, grid: BEVGridSpec) -> torch.Tensor:
    """Precompute the BEV cell of every (view, pv-pixel, depth-bin) pseudo-point.

    Pixels are unprojected at bin-center depths through their camera. Returns
    (N_views * H_pv * W_pv * D, 2) int64 cells, -1 where the pseudo-point
    falls outside the grid. Pure geometry, shared by all forward passes.
    """
    h_pv, w_pv = pv_shape
    d_min, d_max = depth_range
    bin_w = (d_max - d_min) / depth_bins
    depths = d_min + (np.arange(depth_bins) + 0.5) * bin_w
    all_cells = []
    for cam in rig:
        h_img, w_img = cam.image_size
        su, sv = w_img / w_pv, h_img / h_pv
        uu, vv = np.meshgrid((np.arange(w_pv) + 0.5) * su,
                             (np.arange(h_pv) + 0.5) * sv)
        u = np.repeat(uu.reshape(-1), depth_bins)
        v = np.repeat(vv.reshape(-1), depth_bins)
        d = np.tile(depths, h_pv * w_pv)
        pts = unproject_from_camera(u, v, d, cam)
        all_cells.append(points_to_cells(pts[:, :2], grid))
    return torch.cat(all_cells, dim=0)


def lss_transform(f_pv: torch.Tensor, d_hat: torch.Tensor, rig: list,
                  grid: BEVGridSpec, depth_range: tuple,
                  cells: torch.Tensor | None = None) -> torch.Tensor:
    """Lift-splat view transform: PV features to a BEV feature map.

    f_pv: (N, C, H_pv, W_pv); d_hat: (N, D, H_pv, W_pv) per-pixel categorical
    depth. Every (pixel, bin) pair contributes its depth-weighted feature at
    the unprojected location; contributions are sum-pooled per BEV cell.
    Differentiable w.r.t. both f_pv and d_hat.
    """
    n, c, h_pv, w_pv = f_pv.shape
    d = d_hat.shape[1]
    if cells is None:
        cells = lss_geometry(rig, (h_pv, w_pv), d, depth_range, grid)
    # (N, H, W, D, C) -> (N*H*W*D, C), matching lss_geometry's ordering.
    feats = d_hat.permute(0, 2, 3, 1).unsqueeze(-1) \
        * f_pv.permute(0, 2, 3, 1).unsqueeze(3)
    return voxel_pool(cells, feats.reshape(-1, c), grid)


class PatchDiscriminator(nn.Module):
    """3-layer strided conv classifier: is each receptive patch LiDAR-like?"""

    def __init__(self, cin: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, width, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(width, 1, 3, stride=1, padding=1),
        )

    def forward(self, f_ref):
        return torch.sigmoid(self.net(f_ref.unsqueeze(0))).squeeze(0).squeeze(0)


class BevDecoder(nn.Module):
    """Two 3x3 convs then a per-cell logistic; predicts an activation map."""

    def __init__(self, cin: int, width: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, width, 3, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(width, 1, 3, padding=1),
        )

    def forward(self, f_bev):
        return torch.sigmoid(self.net(f_bev.unsqueeze(0))).squeeze(0).squeeze(0)


class CenterPointHead(nn.Module):
    """Shared conv trunk with 1x1 class/regression heads over a BEV map.

    Regression channel order: dx, dy (cell-relative center offset), z,
    log l, log w, log h, vx, vy, yaw.
    """

    def __init__(self, cin: int, n_classes: int, width: int = 32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(cin, width, 3, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.cls_head = nn.Conv2d(width, n_classes, 1)
        self.reg_head = nn.Conv2d(width, 9, 1)

    def reset_cls_bias(self):
        with torch.no_grad():
            self.cls_head.bias.fill_(CLS_BIAS_PRIOR)

    def forward(self, f_ref):
        t = self.trunk(f_ref.unsqueeze(0))
        cls = torch.sigmoid(self.cls_head(t)).squeeze(0)
        reg = self.reg_head(t).squeeze(0)
        return cls, reg


class BEVEncoderDecoder(nn.Module):
    """2-level BEV encoder-decoder with a stride-2 bottleneck and skip."""

    def __init__(self, cin: int, cref: int = 32, width: int = 32):
        super().__init__()
        self.enc0 = nn.Sequential(
            nn.Conv2d(cin, width, 3, padding=1), nn.GroupNorm(1, width),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.down = nn.Sequential(
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.GroupNorm(1, width), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(width, width, 3, padding=1),
            nn.GroupNorm(1, width), nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * width, cref, 3, padding=1),
            nn.GroupNorm(1, cref), nn.LeakyReLU(LEAKY_SLOPE),
        )

    def forward(self, f_bev):
        x = f_bev.unsqueeze(0)
        e0 = self.enc0(x)
        e1 = self.down(e0)
        u = self.up(e1)
        return self.fuse(torch.cat([e0, u], dim=1)).squeeze(0)

"""Multi-camera detection student and the instance-segmentation teacher.

Both share the same PV extractor architecture, so instance-segmentation
weights are directly transferable into the student.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..geom import BEVGridSpec
from ..synth.scene import WorldConfig, make_rig
from .blocks import (
    BevDecoder,
    BEVEncoderDecoder,
    CenterPointHead,
    ConvStack,
    ConvStackSpec,
    LayerSpec,
    lss_geometry,
    lss_transform,
)
from .is_head import ROIHead, RoiDetections, RPNHead, select_proposals

C_PV = 16
N_RPN_DEFAULT = 16


def pv_extractor_spec() -> ConvStackSpec:
    """3-layer stride (2, 2, 1) extractor: (3, 32, 64) -> (C_PV, 8, 16)."""
    return ConvStackSpec([
        LayerSpec(3, 16, 3, 2, norm=True),
        LayerSpec(16, 16, 3, 2, norm=True),
        LayerSpec(16, C_PV, 3, 1, norm=True),
    ])


class InstanceHead(nn.Module):
    """RPN + ROI heads over single-view PV features."""

    def __init__(self, n_classes: int, pv_shape: tuple, stride: float,
                 image_size: tuple, n_rpn: int = N_RPN_DEFAULT):
        super().__init__()
        self.pv_shape = pv_shape
        self.stride = stride
        self.image_size = image_size
        self.n_rpn = n_rpn
        self.rpn = RPNHead(C_PV)
        self.roi = ROIHead(C_PV, n_classes, stride, image_size)

    def forward(self, f_pv_view: torch.Tensor):
        a_cls, a_reg = self.rpn(f_pv_view)
        proposals, _ = select_proposals(a_cls, a_reg, self.n_rpn,
                                        self.pv_shape, self.stride,
                                        self.image_size)
        det = self.roi(f_pv_view, proposals)
        return a_cls, a_reg, det


class ISTeacher(nn.Module):
    """Frozen Mask-R-CNN-style teacher: PV extractor plus instance head."""

    def __init__(self, config: WorldConfig, n_rpn: int = N_RPN_DEFAULT):
        super().__init__()
        self.config = config
        stride = config.image_size[0] / config.pv_shape[0]
        self.pv_extractor = ConvStack(pv_extractor_spec())
        self.instance = InstanceHead(config.n_classes, config.pv_shape,
                                     stride, config.image_size, n_rpn)

    def extract(self, image: torch.Tensor) -> torch.Tensor:
        """(3, H, W) image in [0, 1] -> (C_PV, H_pv, W_pv) features."""
        return self.pv_extractor(image.unsqueeze(0)).squeeze(0)

    def forward(self, image: torch.Tensor):
        f = self.extract(image)
        return self.instance(f)


@dataclass
class StudentOutputs:
    f_pv: torch.Tensor    # (N, C_PV, H_pv, W_pv)
    d_hat: torch.Tensor   # (N, D, H_pv, W_pv), per-pixel categorical
    f_bev: torch.Tensor   # (C_PV, H, W)
    f_ref: torch.Tensor   # (C_REF, H, W)
    cls: torch.Tensor     # (|S|, H, W)
    reg: torch.Tensor     # (9, H, W)
    h_hat: torch.Tensor   # (H, W)
    instance: list | None  # per view (a_cls, a_reg, RoiDetections), or None


class CameraStudent(nn.Module):
    """Camera-only detector: PV extraction, depth-weighted lift-splat view
    transform, BEV encoder-decoder, dense detection head, plus the auxiliary
    activation decoder and PV instance head used only by training losses."""

    def __init__(self, config: WorldConfig, c_ref: int = 32,
                 n_rpn: int = N_RPN_DEFAULT):
        super().__init__()
        self.config = config
        self.grid = config.grid
        stride = config.image_size[0] / config.pv_shape[0]
        self.pv_extractor = ConvStack(pv_extractor_spec())
        self.depth_head = nn.Conv2d(C_PV, config.depth_bins, 1)
        self.feat_head = nn.Conv2d(C_PV, C_PV, 1)
        self.encdec = BEVEncoderDecoder(C_PV, c_ref)
        self.head = CenterPointHead(c_ref, config.n_classes)
        self.bev_decoder = BevDecoder(C_PV)
        self.instance = InstanceHead(config.n_classes, config.pv_shape,
                                     stride, config.image_size, n_rpn)
        cells = lss_geometry(make_rig(config), config.pv_shape,
                             config.depth_bins, config.depth_range,
                             config.grid)
        self.register_buffer("lss_cells", cells, persistent=False)

    def forward(self, images: torch.Tensor,
                with_instance: bool = False) -> StudentOutputs:
        """images: (N_cam, 3, H, W) in [0, 1]."""
        f_pv = self.pv_extractor(images)
        d_hat = torch.softmax(self.depth_head(f_pv), dim=1)
        feats = self.feat_head(f_pv)
        f_bev = lss_transform(feats, d_hat, None, self.grid,
                              self.config.depth_range, cells=self.lss_cells)
        f_ref = self.encdec(f_bev)
        cls, reg = self.head(f_ref)
        h_hat = self.bev_decoder(f_bev)
        inst = None
        if with_instance:
            inst = [self.instance(f_pv[i]) for i in range(f_pv.shape[0])]
        return StudentOutputs(f_pv=f_pv, d_hat=d_hat, f_bev=f_bev,
                              f_ref=f_ref, cls=cls, reg=reg, h_hat=h_hat,
                              instance=inst)

    def load_pv_extractor(self, state: dict):
        """Copy shape-compatible PV extractor weights (e.g. from ISTeacher).

        Raises ValueError naming the first mismatched tensor.
        """
        own = self.pv_extractor.state_dict()
        for name, tensor in own.items():
            if name not in state:
                raise ValueError(f"missing tensor in checkpoint: {name}")
            src = state[name]
            if tuple(src.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"shape mismatch for {name}: "
                    f"{tuple(src.shape)} vs {tuple(tensor.shape)}")
        self.pv_extractor.load_state_dict(state)

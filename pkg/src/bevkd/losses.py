"""Training objectives: ground-truth baseline, the four distillation losses,
dense target encoding, and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geom import BEVGridSpec, wrap_angle
from .nets.blocks import gradient_reversal
from .nets.is_head import (
    InstancePseudoLabels,
    RoiDetections,
    assign_anchors,
    encode_deltas,
    match_proposals,
    rpn_fg_probs,
)

# Probability clamp for log terms. Must stay above float32 resolution near
# 1.0 (~6e-8): with a smaller value, clamp(p, EPS, 1 - EPS) leaves p == 1.0
# intact and 0 * log(0) poisons the loss with NaN.
EPS = 1e-7

COMPONENT_NAMES = ("gt", "xod", "xfd", "xat", "xis")


@dataclass
class LossWeights:
    """Scalar weights and thresholds of the total training objective."""

    lambda_gt: float = 1.0
    lambda_xod: float = 1.0
    lambda_xfd: float = 10.0
    lambda_xat: float = 10.0
    lambda_xis: float = 1.0
    alpha_3d: float = 0.6
    alpha_2d: float = 0.2
    lambda_grl: float = 1.0

    def __post_init__(self):
        for name in ("lambda_gt", "lambda_xod", "lambda_xfd", "lambda_xat",
                     "lambda_xis", "lambda_grl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def weight(self, component: str) -> float:
        return getattr(self, f"lambda_{component}")


@dataclass
class DenseTargets:
    heatmap: np.ndarray   # (|S|, H, W), peaks of exactly 1 at center cells
    reg: np.ndarray       # (9, H, W), defined only at center cells
    pos_mask: np.ndarray  # (H, W) bool
    skipped: int = 0      # boxes whose center fell outside the grid


def gaussian_radius(box, cell: float) -> int:
    return max(2, math.ceil(0.5 * max(box.size[0], box.size[1]) / cell))


def render_targets(boxes: list, grid: BEVGridSpec) -> DenseTargets:
    """CenterPoint-style supervision maps.

    Per box: a Gaussian splat (sigma = radius / 3) in its class channel,
    combined across boxes by per-cell max, with an exact peak of 1 at the
    center cell; regression values only at the center cell, channel order
    (dx, dy in cells from the cell's lower corner, z, log l, log w, log h,
    vx, vy, yaw).
    """
    h, w = grid.cells
    n_classes = 3
    heatmap = np.zeros((n_classes, h, w))
    reg = np.zeros((9, h, w))
    pos = np.zeros((h, w), dtype=bool)
    sx, sy = grid.cell_size
    skipped = 0
    for box in boxes:
        fx = (box.center[0] - grid.x_range[0]) / sx
        fy = (box.center[1] - grid.y_range[0]) / sy
        r, c = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= r < h and 0 <= c < w):
            skipped += 1
            continue
        rad = gaussian_radius(box, sx)
        sigma = rad / 3.0
        r0, r1 = max(0, r - rad), min(h, r + rad + 1)
        c0, c1 = max(0, c - rad), min(w, c + rad + 1)
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1),
                             indexing="ij")
        g = np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2.0 * sigma ** 2))
        ch = heatmap[box.class_id]
        ch[r0:r1, c0:c1] = np.maximum(ch[r0:r1, c0:c1], g)
        pos[r, c] = True
        reg[:, r, c] = [
            fx - r, fy - c, box.center[2],
            math.log(box.size[0]), math.log(box.size[1]),
            math.log(box.size[2]),
            box.velocity[0], box.velocity[1], box.yaw,
        ]
    return DenseTargets(heatmap=heatmap, reg=reg, pos_mask=pos,
                        skipped=skipped)


def gaussian_focal(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced focal loss over [0,1] maps, mean over all cells.

    target == 1 cells are positives; everything else is a soft negative
    downweighted by (1 - target)^4.
    """
    p = pred.clamp(EPS, 1.0 - EPS)
    pos = (target == 1.0).to(p.dtype)
    pos_term = (1.0 - p) ** 2 * (-torch.log(p))
    neg_term = (1.0 - target) ** 4 * p ** 2 * (-torch.log(1.0 - p))
    return (pos * pos_term + (1.0 - pos) * neg_term).mean()


def depth_loss(d_hat: torch.Tensor, d_gt: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy over pixels carrying depth GT.

    d_hat: (N, D, H, W) normalized; d_gt: (N, D, H, W) one-hot with all-zero
    rows where no point projected. Returns 0 when no pixel is supervised.
    """
    has_gt = d_gt.sum(dim=1) > 0
    if not bool(has_gt.any()):
        return d_hat.sum() * 0.0
    ce = -(d_gt * torch.log(d_hat.clamp(EPS, 1.0))).sum(dim=1)
    return ce[has_gt].mean()


def _reg_diff(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-channel regression residual; the yaw channel (8) wraps."""
    diff = pred - target
    yaw = torch.atan2(torch.sin(diff[8]), torch.cos(diff[8]))
    return torch.cat([diff[:8], yaw.unsqueeze(0)], dim=0)


def centerpoint_loss(cls: torch.Tensor, reg: torch.Tensor,
                     targets: DenseTargets) -> torch.Tensor:
    """Gaussian focal on the class heatmaps plus sparse L1 regression at the
    center cells (yaw wrapped), normalized by max(1, #positives)."""
    heat = torch.as_tensor(targets.heatmap, dtype=cls.dtype)
    focal = gaussian_focal(cls, heat)
    pos = torch.as_tensor(targets.pos_mask)
    n_pos = int(targets.pos_mask.sum())
    if n_pos == 0:
        return focal
    t_reg = torch.as_tensor(targets.reg, dtype=reg.dtype)
    diff = _reg_diff(reg, t_reg).abs()
    reg_term = diff[:, pos].sum() / max(1, n_pos)
    return focal + reg_term


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def threshold_soft_targets(t_cls: torch.Tensor,
                           alpha_3d: float) -> torch.Tensor:
    """Promote teacher probabilities strictly above alpha to exactly 1;
    everything else stays a soft target. Idempotent."""
    return torch.where(t_cls > alpha_3d, torch.ones_like(t_cls), t_cls)


def xod_loss(s_cls: torch.Tensor, s_reg: torch.Tensor, t_cls: torch.Tensor,
             t_reg: torch.Tensor, alpha_3d: float,
             weighted: bool = True) -> torch.Tensor:
    """Output-stage distillation: focal on thresholded teacher heatmaps and
    dense confidence-weighted smooth-L1 regression (sum over the 9 channels,
    mean over cells). Teacher tensors are treated as constants."""
    t_cls = t_cls.detach()
    t_reg = t_reg.detach()
    cls_term = gaussian_focal(s_cls, threshold_soft_targets(t_cls, alpha_3d))
    per_cell = smooth_l1(_reg_diff(s_reg, t_reg)).sum(dim=0)
    if weighted:
        w = t_cls.mean(dim=0)
        reg_term = (w * per_cell).mean()
    else:
        reg_term = per_cell.mean()
    return cls_term + reg_term


def xfd_loss(h_hat: torch.Tensor, h_tilde: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between predicted and teacher activation maps."""
    return (h_hat - h_tilde.detach()).abs().mean()


def _bce(p: torch.Tensor, label: float) -> torch.Tensor:
    p = p.clamp(EPS, 1.0 - EPS)
    if label == 1.0:
        return -torch.log(p)
    return -torch.log(1.0 - p)


def xat_loss(discriminator, student_f_ref: torch.Tensor,
             teacher_f_ref: torch.Tensor, lambda_grl: float) -> torch.Tensor:
    """Adversarial modality alignment.

    The discriminator learns to label teacher patches 1 and camera patches 0;
    the student branch passes through gradient reversal, so minimizing this
    single scalar trains the discriminator while pushing the student toward
    modality-agnostic features.
    """
    s_out = discriminator(gradient_reversal(student_f_ref, lambda_grl))
    t_out = discriminator(teacher_f_ref.detach())
    return 0.5 * (_bce(s_out, 0.0).mean() + _bce(t_out, 1.0).mean())


def rpn_loss(a_cls: torch.Tensor, a_reg: torch.Tensor,
             gt_boxes: np.ndarray, pv_shape: tuple,
             stride: float) -> torch.Tensor:
    """BCE on assigned anchor objectness plus L1 on positive-anchor deltas."""
    labels, targets = assign_anchors(gt_boxes, pv_shape, stride)
    fg = rpn_fg_probs(a_cls).permute(1, 2, 0).reshape(-1)
    h, w = pv_shape
    deltas = a_reg.reshape(-1, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4)
    lab = torch.as_tensor(labels)
    used = lab >= 0
    p = fg[used].clamp(EPS, 1.0 - EPS)
    y = lab[used].to(fg.dtype)
    cls_term = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()
    pos = lab == 1
    if bool(pos.any()):
        t = torch.as_tensor(targets, dtype=fg.dtype)[pos]
        reg_term = (deltas[pos] - t).abs().mean()
    else:
        reg_term = fg.sum() * 0.0
    return cls_term + reg_term


def roi_box_loss(det: RoiDetections,
                 labels: InstancePseudoLabels) -> torch.Tensor:
    """Cross-entropy on matched-proposal classes plus L1 on box deltas;
    unmatched proposals contribute background cross-entropy only."""
    n = len(det)
    if n == 0:
        return det.class_probs.sum() * 0.0
    if len(labels) == 0:
        match = np.full(n, -1)
    else:
        match = match_proposals(det.proposals, labels.boxes)
    cls_targets = np.zeros(n, dtype=np.int64)
    cls_targets[match >= 0] = labels.class_ids[match[match >= 0]] + 1
    probs = det.class_probs.clamp(EPS, 1.0)
    ce = -torch.log(probs[torch.arange(n), torch.as_tensor(cls_targets)])
    loss = ce.mean()
    pos = match >= 0
    if pos.any():
        enc = encode_deltas(det.proposals[pos], labels.boxes[match[pos]])
        t = torch.as_tensor(enc, dtype=det.box_deltas.dtype)
        loss = loss + (det.box_deltas[pos] - t).abs().mean()
    return loss


def roi_mask_loss(det: RoiDetections,
                  labels: InstancePseudoLabels) -> torch.Tensor:
    """BCE between the predicted mask channel of each matched pseudo-label's
    class and the binary pseudo-mask, averaged over matched proposals."""
    if len(det) == 0 or len(labels) == 0:
        return det.mask_probs.sum() * 0.0
    match = match_proposals(det.proposals, labels.boxes)
    pos = np.nonzero(match >= 0)[0]
    if pos.size == 0:
        return det.mask_probs.sum() * 0.0
    terms = []
    for i in pos:
        gt = labels.masks[match[i]]
        p = det.mask_probs[i, labels.class_ids[match[i]]].clamp(
            EPS, 1.0 - EPS)
        m = torch.as_tensor(gt, dtype=p.dtype)
        terms.append(-(m * torch.log(p)
                       + (1.0 - m) * torch.log(1.0 - p)).mean())
    return torch.stack(terms).mean()


def xis_loss(a_cls: torch.Tensor, a_reg: torch.Tensor, det: RoiDetections,
             labels: InstancePseudoLabels, pv_shape: tuple,
             stride: float) -> torch.Tensor:
    """Instance-segmentation distillation for one view: RPN + box + mask."""
    return (rpn_loss(a_cls, a_reg, labels.boxes, pv_shape, stride)
            + roi_box_loss(det, labels)
            + roi_mask_loss(det, labels))


def total_loss(components: dict, weights: LossWeights,
               enabled: set) -> tuple:
    """Weighted sum over the enabled components only.

    Returns (total tensor, report dict of unweighted floats per component).
    """
    unknown = set(enabled) - set(COMPONENT_NAMES)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    total = None
    report = {}
    for name in COMPONENT_NAMES:
        if name not in enabled:
            continue
        value = components[name]
        report[name] = float(value.detach())
        term = weights.weight(name) * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss component enabled")
    return total, report

"""Region-proposal and ROI machinery for instance segmentation.

One architecture serves both the frozen teacher and the student's PV instance
head: a single-scale RPN with K=3 square anchors, greedy NMS proposal
selection, bilinear crop-resize ROI heads with a 28x28 mask branch, and the
score-thresholded pseudo-label rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .blocks import LEAKY_SLOPE

ANCHOR_SCALES = (4.0, 8.0, 16.0)  # square anchor side lengths, image pixels
K = len(ANCHOR_SCALES)
NMS_IOU = 0.7
MASK_SIZE = 28
BOX_CROP = 7
MASK_CROP = 14


def anchor_grid(pv_shape: tuple, stride: float) -> np.ndarray:
    """(H_pv, W_pv, K, 4) anchors as (cx, cy, w, h) in image pixels."""
    h, w = pv_shape
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride,
                         (np.arange(w) + 0.5) * stride, indexing="ij")
    anchors = np.zeros((h, w, K, 4))
    for k, s in enumerate(ANCHOR_SCALES):
        anchors[:, :, k, 0] = cx
        anchors[:, :, k, 1] = cy
        anchors[:, :, k, 2] = s
        anchors[:, :, k, 3] = s
    return anchors


MAX_LOG_DELTA = 4.0  # exp() clamp so runaway regressors can't emit inf boxes


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Standard anchor-relative decoding of (dx, dy, dw, dh)."""
    out = np.empty_like(anchors)
    out[..., 0] = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    out[..., 1] = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    dw = np.clip(deltas[..., 2], -MAX_LOG_DELTA, MAX_LOG_DELTA)
    dh = np.clip(deltas[..., 3], -MAX_LOG_DELTA, MAX_LOG_DELTA)
    out[..., 2] = anchors[..., 2] * np.exp(dw)
    out[..., 3] = anchors[..., 3] * np.exp(dh)
    return out


def encode_deltas(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    out = np.empty_like(boxes, dtype=np.float64)
    out[..., 0] = (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(boxes[..., 2] / anchors[..., 2])
    out[..., 3] = np.log(boxes[..., 3] / anchors[..., 3])
    return out


def clip_box(boxes: np.ndarray, image_size: tuple) -> np.ndarray:
    """Clip (cx, cy, w, h) boxes to image bounds, keeping a minimum 1px side."""
    h, w = image_size
    x1 = np.clip(boxes[..., 0] - boxes[..., 2] / 2, 0, w - 1)
    y1 = np.clip(boxes[..., 1] - boxes[..., 3] / 2, 0, h - 1)
    x2 = np.clip(boxes[..., 0] + boxes[..., 2] / 2, 1, w)
    y2 = np.clip(boxes[..., 1] + boxes[..., 3] / 2, 1, h)
    x2 = np.maximum(x2, x1 + 1.0)
    y2 = np.maximum(y2, y1 + 1.0)
    out = np.empty_like(boxes)
    out[..., 0] = (x1 + x2) / 2
    out[..., 1] = (y1 + y2) / 2
    out[..., 2] = x2 - x1
    out[..., 3] = y2 - y1
    return out


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes in (cx, cy, w, h)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    ix = np.maximum(
        0.0, np.minimum(ax2[:, None], bx2) - np.maximum(ax1[:, None], bx1))
    iy = np.maximum(
        0.0, np.minimum(ay2[:, None], by2) - np.maximum(ay1[:, None], by1))
    inter = ix * iy
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / union, 0.0)


class RPNHead(nn.Module):
    """Shared 3x3 trunk with 1x1 heads for 2K scores and 4K anchor deltas."""

    def __init__(self, cin: int, width: int = 16):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(cin, width, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))
        self.cls_head = nn.Conv2d(width, 2 * K, 1)
        self.reg_head = nn.Conv2d(width, 4 * K, 1)

    def forward(self, f_pv_view):
        t = self.trunk(f_pv_view.unsqueeze(0))
        return self.cls_head(t).squeeze(0), self.reg_head(t).squeeze(0)


def rpn_fg_probs(a_cls: torch.Tensor) -> torch.Tensor:
    """Per-anchor foreground probability from the 2K score channels.

    Channel layout: anchor k occupies channels (2k, 2k+1) = (fg, bg) logits.
    Returns (K, H, W).
    """
    h, w = a_cls.shape[-2:]
    pairs = a_cls.reshape(K, 2, h, w)
    return torch.softmax(pairs, dim=1)[:, 0]


def select_proposals(a_cls: torch.Tensor, a_reg: torch.Tensor, n_rpn: int,
                     pv_shape: tuple, stride: float,
                     image_size: tuple) -> tuple:
    """Decode, clip, NMS (IoU 0.7) and keep the top-n proposals.

    Ties break deterministically by (score desc, row, col, anchor index).
    Returns (boxes4 (n, 4) ndarray, fg scores (n,) ndarray).
    """
    if n_rpn < 1:
        raise ValueError("n_rpn must be >= 1")
    h, w = pv_shape
    scores = rpn_fg_probs(a_cls).detach().cpu().numpy()          # (K, H, W)
    deltas = a_reg.detach().cpu().numpy().reshape(K, 4, h, w)
    anchors = anchor_grid(pv_shape, stride)                       # (H, W, K, 4)
    deltas = np.transpose(deltas, (2, 3, 0, 1))                   # (H, W, K, 4)
    boxes = clip_box(decode_deltas(anchors, deltas), image_size)

    rr, cc, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(K),
                             indexing="ij")
    flat_scores = np.transpose(scores, (1, 2, 0)).reshape(-1)
    order = np.lexsort(
        (kk.reshape(-1), cc.reshape(-1), rr.reshape(-1), -flat_scores))
    boxes = boxes.reshape(-1, 4)[order]
    flat_scores = flat_scores[order]

    keep = []
    for i in range(boxes.shape[0]):
        if len(keep) == n_rpn:
            break
        if keep and box_iou(boxes[i:i + 1], boxes[keep]).max() > NMS_IOU:
            continue
        keep.append(i)
    return boxes[keep], flat_scores[keep]


def crop_resize_batch(feat: torch.Tensor, boxes: np.ndarray, out_hw: tuple,
                      feat_stride: float) -> torch.Tensor:
    """Bilinear crops of (n, 4) image-coordinate boxes from a (C, H, W) map.

    Samples out_hw cell centers spread uniformly over each box; returns
    (n, C, oh, ow). Feature pixel (i, j) holds the value at continuous
    position (j + 0.5, i + 0.5); samples are clamped to the map border.
    """
    c, fh, fw = feat.shape
    oh, ow = out_hw
    b = torch.as_tensor(np.asarray(boxes, dtype=np.float64) / feat_stride,
                        dtype=torch.float64)
    cx, cy, bw, bh = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    x0, y0 = cx - bw / 2, cy - bh / 2
    jj = torch.arange(ow, dtype=torch.float64) + 0.5
    ii = torch.arange(oh, dtype=torch.float64) + 0.5
    # Sample positions in float64, cast once (matches the scalar reference).
    gx = (x0[:, None] + jj * bw[:, None] / ow - 0.5).to(feat.dtype)  # (n, ow)
    gy = (y0[:, None] + ii * bh[:, None] / oh - 0.5).to(feat.dtype)  # (n, oh)
    x_lo = gx.floor().long().clamp(0, fw - 1)
    y_lo = gy.floor().long().clamp(0, fh - 1)
    x_hi = (x_lo + 1).clamp(0, fw - 1)
    y_hi = (y_lo + 1).clamp(0, fh - 1)
    wx = (gx - gx.floor()).clamp(0.0, 1.0)
    wy = (gy - gy.floor()).clamp(0.0, 1.0)
    # Outside the border, gx.floor() can leave [0, fw-1]; clamp weights so
    # the sample degenerates to the nearest border texel.
    wx = torch.where(gx < 0, torch.zeros_like(wx), wx)
    wx = torch.where(gx > fw - 1, torch.ones_like(wx), wx)
    wy = torch.where(gy < 0, torch.zeros_like(wy), wy)
    wy = torch.where(gy > fh - 1, torch.ones_like(wy), wy)

    ygrid = y_lo[:, :, None].expand(-1, -1, ow)         # (n, oh, ow)
    ygrid_h = y_hi[:, :, None].expand(-1, -1, ow)
    xgrid = x_lo[:, None, :].expand(-1, oh, -1)
    xgrid_h = x_hi[:, None, :].expand(-1, oh, -1)
    f_ll = feat[:, ygrid, xgrid]                        # (C, n, oh, ow)
    f_lh = feat[:, ygrid, xgrid_h]
    f_hl = feat[:, ygrid_h, xgrid]
    f_hh = feat[:, ygrid_h, xgrid_h]
    wx = wx[None, :, None, :]
    wy = wy[None, :, :, None]
    top = f_ll * (1 - wx) + f_lh * wx
    bot = f_hl * (1 - wx) + f_hh * wx
    return (top * (1 - wy) + bot * wy).permute(1, 0, 2, 3)


def crop_resize(feat: torch.Tensor, box4: np.ndarray, out_hw: tuple,
                feat_stride: float) -> torch.Tensor:
    """Bilinear crop of a single image-coordinate box; returns (C, oh, ow)."""
    return crop_resize_batch(feat, np.asarray(box4, dtype=np.float64)[None],
                             out_hw, feat_stride)[0]


@dataclass
class RoiDetections:
    """Refined per-proposal outputs; class channel 0 is background."""

    proposals: np.ndarray        # (n, 4) input proposal boxes
    class_probs: torch.Tensor    # (n, n_classes + 1), rows sum to 1
    boxes: np.ndarray            # (n, 4) refined absolute boxes, clipped
    box_deltas: torch.Tensor     # (n, 4) raw proposal-relative deltas
    mask_probs: torch.Tensor     # (n, n_classes, MASK_SIZE, MASK_SIZE)

    def __len__(self):
        return self.proposals.shape[0]


@dataclass
class InstancePseudoLabels:
    boxes: np.ndarray      # (m, 4) (cx, cy, w, h) pixels, clipped
    class_ids: np.ndarray  # (m,) in the IS class set
    scores: np.ndarray     # (m,) all strictly above the threshold
    masks: np.ndarray      # (m, MASK_SIZE, MASK_SIZE) binary

    def __len__(self):
        return self.boxes.shape[0]


class ROIHead(nn.Module):
    """Crop-resize box/mask branches over selected proposals."""

    def __init__(self, cin: int, n_classes: int, stride: float,
                 image_size: tuple, width: int = 16):
        super().__init__()
        self.n_classes = n_classes
        self.stride = stride
        self.image_size = image_size
        self.box_conv = nn.Sequential(
            nn.Conv2d(cin, width, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))
        self.box_fc = nn.Linear(width * BOX_CROP * BOX_CROP, width)
        self.cls_fc = nn.Linear(width, n_classes + 1)
        self.reg_fc = nn.Linear(width, 4)
        self.mask_conv = nn.Sequential(
            nn.Conv2d(cin, width, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))
        self.mask_up = nn.ConvTranspose2d(width, width, 2, stride=2)
        self.mask_out = nn.Conv2d(width, n_classes, 1)

    def forward(self, f_pv_view: torch.Tensor,
                proposals: np.ndarray) -> RoiDetections:
        n = proposals.shape[0]
        dtype = f_pv_view.dtype
        if n == 0:
            return RoiDetections(
                proposals=proposals.reshape(0, 4),
                class_probs=torch.zeros((0, self.n_classes + 1), dtype=dtype),
                boxes=np.zeros((0, 4)),
                box_deltas=torch.zeros((0, 4), dtype=dtype),
                mask_probs=torch.zeros(
                    (0, self.n_classes, MASK_SIZE, MASK_SIZE), dtype=dtype))
        box_crops = crop_resize_batch(
            f_pv_view, proposals, (BOX_CROP, BOX_CROP), self.stride)
        mask_crops = crop_resize_batch(
            f_pv_view, proposals, (MASK_CROP, MASK_CROP), self.stride)
        z = self.box_conv(box_crops).reshape(n, -1)
        z = torch.nn.functional.leaky_relu(self.box_fc(z), LEAKY_SLOPE)
        class_probs = torch.softmax(self.cls_fc(z), dim=1)
        deltas = self.reg_fc(z)
        boxes = clip_box(
            decode_deltas(proposals, deltas.detach().cpu().numpy()),
            self.image_size)
        m = self.mask_conv(mask_crops)
        m = torch.nn.functional.leaky_relu(self.mask_up(m), LEAKY_SLOPE)
        mask_probs = torch.sigmoid(self.mask_out(m))
        return RoiDetections(proposals=proposals, class_probs=class_probs,
                             boxes=boxes, box_deltas=deltas,
                             mask_probs=mask_probs)


def generate_pseudo_labels(det: RoiDetections,
                           alpha_2d: float) -> InstancePseudoLabels:
    """Keep detections whose best foreground probability strictly exceeds
    alpha_2d; the argmax class selects the mask channel, binarized at 0.5."""
    if len(det) == 0:
        return InstancePseudoLabels(np.zeros((0, 4)), np.zeros(0, np.int64),
                                    np.zeros(0),
                                    np.zeros((0, MASK_SIZE, MASK_SIZE)))
    fg = det.class_probs.detach().cpu().numpy()[:, 1:]
    scores = fg.max(axis=1)
    classes = fg.argmax(axis=1)
    keep = scores > alpha_2d
    masks = det.mask_probs.detach().cpu().numpy()
    masks = masks[np.arange(len(det)), classes] > 0.5
    return InstancePseudoLabels(
        boxes=det.boxes[keep],
        class_ids=classes[keep].astype(np.int64),
        scores=scores[keep],
        masks=masks[keep])


def suppress_duplicate_detections(det: RoiDetections,
                                  iou_thresh: float = 0.5) -> RoiDetections:
    """Per-class greedy NMS over refined boxes.

    Proposals refined by the ROI head routinely collapse onto the same
    object, so inference-time consumers (pseudo-label generation, 2D
    evaluation) dedupe at IoU 0.5 first. Score order with index tie-break
    keeps the result deterministic.
    """
    n = len(det)
    if n == 0:
        return det
    fg = det.class_probs.detach().cpu().numpy()[:, 1:]
    scores = fg.max(axis=1)
    classes = fg.argmax(axis=1)
    order = np.lexsort((np.arange(n), -scores))
    keep = []
    for i in order:
        same = [j for j in keep if classes[j] == classes[i]]
        if same and box_iou(det.boxes[i:i + 1],
                            det.boxes[same]).max() > iou_thresh:
            continue
        keep.append(int(i))
    keep = sorted(keep)
    return RoiDetections(proposals=det.proposals[keep],
                         class_probs=det.class_probs[keep],
                         boxes=det.boxes[keep],
                         box_deltas=det.box_deltas[keep],
                         mask_probs=det.mask_probs[keep])


def assign_anchors(gt_boxes: np.ndarray, pv_shape: tuple, stride: float,
                   pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Faster-R-CNN anchor assignment against (M, 4) ground-truth boxes.

    Returns (labels (H*W*K,) with 1 pos / 0 neg / -1 ignore, and (H*W*K, 4)
    encoded regression targets, nonzero only at positives). With no GT all
    anchors are negative.
    """
    anchors = anchor_grid(pv_shape, stride).reshape(-1, 4)
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4))
    if gt_boxes.shape[0] == 0:
        return labels, targets
    iou = box_iou(anchors, gt_boxes)            # (n, M)
    best_gt = iou.argmax(axis=1)
    best_iou = iou.max(axis=1)
    labels[:] = -1
    labels[best_iou < neg_iou] = 0
    labels[best_iou > pos_iou] = 1
    labels[iou.argmax(axis=0)] = 1              # best anchor per GT
    pos = labels == 1
    targets[pos] = encode_deltas(anchors[pos], gt_boxes[best_gt[pos]])
    return labels, targets


def match_proposals(proposals: np.ndarray, gt_boxes: np.ndarray,
                    match_iou: float = 0.5) -> np.ndarray:
    """Per proposal: index of the best GT with IoU > 0.5, else -1."""
    n = proposals.shape[0]
    if n == 0 or gt_boxes.shape[0] == 0:
        return np.full(n, -1, dtype=np.int64)
    iou = box_iou(proposals, gt_boxes)
    best = iou.argmax(axis=1)
    return np.where(iou.max(axis=1) > match_iou, best, -1)

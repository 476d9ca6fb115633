"""Box decoding and the nuScenes-style metric suite (mAP, TP metrics, NDS)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geom import BEVGridSpec, Box3D, wrap_angle

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)   # meters, BEV center distance
TP_MATCH_THRESHOLD = 2.0                 # meters, for the five TP metrics
MIN_RECALL = 0.1
MIN_PRECISION = 0.1


@dataclass
class Detection:
    box: Box3D
    score: float


def decode_boxes(cls, reg, grid: BEVGridSpec, score_thresh: float = 0.1,
                 max_det: int = 32) -> list:
    """Invert the dense target encoding back into discrete detections.

    Per class, 3x3 local maxima of the heatmap above score_thresh become
    peaks; the top max_det peaks overall are decoded from the regression
    channels (cell + offsets, exp of log sizes, raw velocities, wrapped yaw).
    """
    cls = np.asarray(cls.detach() if isinstance(cls, torch.Tensor) else cls,
                     dtype=np.float64)
    reg = np.asarray(reg.detach() if isinstance(reg, torch.Tensor) else reg,
                     dtype=np.float64)
    s, h, w = cls.shape
    padded = np.pad(cls, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = np.stack([
        padded[:, 1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        for dr in (-1, 0, 1) for dc in (-1, 0, 1)
    ])
    local_max = cls >= windows.max(axis=0)
    peaks = np.nonzero(local_max & (cls > score_thresh))
    scores = cls[peaks]
    order = np.argsort(-scores)[:max_det]
    sx, sy = grid.cell_size
    out = []
    for idx in order:
        k, r, c = peaks[0][idx], peaks[1][idx], peaks[2][idx]
        v = reg[:, r, c]
        center = np.array([
            grid.x_range[0] + (r + v[0]) * sx,
            grid.y_range[0] + (c + v[1]) * sy,
            v[2],
        ])
        box = Box3D(center=center, size=np.exp(v[3:6]), velocity=v[6:8],
                    yaw=float(wrap_angle(v[8])), class_id=int(k))
        out.append(Detection(box=box, score=float(scores[idx])))
    return out


def _bev_dist(a: Box3D, b: Box3D) -> float:
    return float(np.linalg.norm(a.center[:2] - b.center[:2]))


def match_detections(dets: list, gts: list, d_thresh: float):
    """Greedy single-class matching: detections in descending score order
    claim the nearest unclaimed GT within d_thresh. Returns (tp_pairs as
    (det, gt) tuples, fp detections, fn ground truths)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    claimed = [False] * len(gts)
    tp, fp = [], []
    for i in order:
        det = dets[i]
        best_j, best_d = -1, d_thresh
        for j, gt in enumerate(gts):
            if claimed[j]:
                continue
            d = _bev_dist(det.box, gt)
            if d < best_d:
                best_d, best_j = d, j
        if best_j >= 0:
            claimed[best_j] = True
            tp.append((det, gts[best_j]))
        else:
            fp.append(det)
    fn = [gt for j, gt in enumerate(gts) if not claimed[j]]
    return tp, fp, fn


def _tp_flags(dets: list, gts: list, d_thresh: float):
    """(score, is_tp) per detection in this scene, via greedy matching."""
    tp, fp, _ = match_detections(dets, gts, d_thresh)
    flags = [(d.score, 1) for d, _ in tp] + [(d.score, 0) for d in fp]
    return flags


def average_precision(scene_pairs: list, d_thresh: float):
    """AP for one class over a list of (detections, ground_truths) scenes.

    nuScenes-style normalized area over recall in [0.1, 1] with precision
    below 0.1 clamped to 0. Returns None when there is no ground truth.
    """
    n_gt = sum(len(g) for _, g in scene_pairs)
    if n_gt == 0:
        return None
    flags = []
    for dets, gts in scene_pairs:
        flags.extend(_tp_flags(dets, gts, d_thresh))
    if not flags:
        return 0.0
    flags.sort(key=lambda t: -t[0])
    tps = np.cumsum([f for _, f in flags])
    precision = tps / (np.arange(len(flags)) + 1)
    recall = tps / n_gt
    ap_terms = []
    for r in np.linspace(MIN_RECALL, 1.0, 91):
        reachable = recall >= r - 1e-12
        p = precision[reachable].max() if reachable.any() else 0.0
        ap_terms.append(p if p >= MIN_PRECISION else 0.0)
    return float(np.mean(ap_terms))


def tp_metrics(pairs: list) -> dict:
    """The five true-positive error metrics over matched (det, gt) pairs.

    Convention: each metric is 1 when there are no matched pairs at all.
    """
    if not pairs:
        return {"mATE": 1.0, "mASE": 1.0, "mAOE": 1.0, "mAVE": 1.0,
                "mAAE": 1.0}
    ate, ase, aoe, ave, aae = [], [], [], [], []
    for det, gt in pairs:
        b = det.box
        ate.append(_bev_dist(b, gt))
        inter = float(np.prod(np.minimum(b.size, gt.size)))
        union = float(np.prod(b.size) + np.prod(gt.size) - inter)
        ase.append(1.0 - inter / union)
        aoe.append(abs(float(wrap_angle(b.yaw - gt.yaw))))
        ave.append(float(np.linalg.norm(b.velocity - gt.velocity)))
        aae.append(0.0 if b.attribute == gt.attribute else 1.0)
    return {"mATE": float(np.mean(ate)), "mASE": float(np.mean(ase)),
            "mAOE": float(np.mean(aoe)), "mAVE": float(np.mean(ave)),
            "mAAE": float(np.mean(aae))}


def nds(map_value: float, tp: dict) -> float:
    """Composite detection score: (5 mAP + sum of 1 - min(1, TP)) / 10."""
    acc = 5.0 * map_value
    for key in ("mATE", "mASE", "mAOE", "mAVE", "mAAE"):
        acc += 1.0 - min(1.0, tp[key])
    return acc / 10.0


@dataclass
class MetricsReport:
    ap: dict                 # (class_id, d_thresh) -> AP or None
    mAP: float
    tp: dict                 # the five TP metrics
    NDS: float
    counts: dict             # class_id -> (TP, FP, FN) at the TP threshold

    def row(self) -> dict:
        """Flat row in the fixed CSV column order."""
        return {
            "mAP": self.mAP, "mATE": self.tp["mATE"],
            "mASE": self.tp["mASE"], "mAOE": self.tp["mAOE"],
            "mAVE": self.tp["mAVE"], "mAAE": self.tp["mAAE"],
            "NDS": self.NDS,
        }


def evaluate_detections(scenes: list, n_classes: int = 3) -> MetricsReport:
    """Full metric suite over a list of (detections, gt_boxes) scenes.

    Matching is per scene and per class; AP additionally per distance
    threshold. Classes without any ground truth are excluded from the mean.
    """
    ap = {}
    counts = {}
    all_pairs = []
    for class_id in range(n_classes):
        per_scene = [
            ([d for d in dets if d.box.class_id == class_id],
             [g for g in gts if g.class_id == class_id])
            for dets, gts in scenes
        ]
        for d_thresh in DIST_THRESHOLDS:
            ap[(class_id, d_thresh)] = average_precision(per_scene, d_thresh)
        n_tp = n_fp = n_fn = 0
        for dets, gts in per_scene:
            tp, fp, fn = match_detections(dets, gts, TP_MATCH_THRESHOLD)
            all_pairs.extend(tp)
            n_tp += len(tp)
            n_fp += len(fp)
            n_fn += len(fn)
        counts[class_id] = (n_tp, n_fp, n_fn)
    values = [v for v in ap.values() if v is not None]
    map_value = float(np.mean(values)) if values else 0.0
    tp = tp_metrics(all_pairs)
    return MetricsReport(ap=ap, mAP=map_value, tp=tp,
                         NDS=nds(map_value, tp), counts=counts)

"""Staged training: LiDAR teacher, instance-segmentation teacher, student.

Determinism contract: with a fixed (config, seed) and single-threaded torch,
every logged number is reproducible bit-identically. Batch composition and
the learning rate are pure functions of the step index, so resuming from a
checkpoint at step k continues an uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import math
import os

import numpy as np
import torch
from torch import nn

from . import losses as L
from .config import OptimizerConfig, RunConfig, config_hash, dataset_hash
from .data import (
    SceneRecord,
    generate_dataset,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
)
from .metrics import MetricsReport, decode_boxes, evaluate_detections
from .nets.blocks import PatchDiscriminator, init_module
from .nets.camera_student import CameraStudent, ISTeacher
from .nets.is_head import (
    MASK_SIZE,
    InstancePseudoLabels,
    box_iou,
    generate_pseudo_labels,
    select_proposals,
    suppress_duplicate_detections,
)
from .nets.lidar_teacher import PointCloudDetector

CSV_COLUMNS = ("config", "seed", "mAP", "mATE", "mASE", "mAOE", "mAVE",
               "mAAE", "NDS")


def set_deterministic(seed: int):
    torch.set_num_threads(1)
    torch.manual_seed(seed)


def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Batch composition as a pure function of (seed, step)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4, step]))
    return rng.choice(n, size=min(batch, n), replace=False)


def lr_at(opt_cfg: OptimizerConfig, step: int) -> float:
    if not opt_cfg.cosine_decay:
        return opt_cfg.lr
    return opt_cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / opt_cfg.steps))


def make_optimizer(module: nn.Module, opt_cfg: OptimizerConfig):
    # Momentum-free adaptive steps: first-moment averaging disabled.
    return torch.optim.AdamW(module.parameters(), lr=opt_cfg.lr,
                             betas=(0.0, 0.99),
                             weight_decay=opt_cfg.weight_decay)



GRAD_CLIP_NORM = 10.0


def clip_gradients(opt):
    """Global-norm gradient clipping over every parameter the optimizer owns."""
    params = [p for g in opt.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)


def _check_finite(value: torch.Tensor, step: int):
    if not torch.isfinite(value):
        raise RuntimeError(f"training diverged: non-finite loss at step {step}")


# ---------------------------------------------------------------------------
# Dataset plumbing


def ensure_dataset(cfg: RunConfig, root: str) -> tuple:
    """Generate (if needed) and load the train/val splits for this config."""
    digest = dataset_hash(cfg)
    base = os.path.join(root, "data", digest)
    train_dir = os.path.join(base, "train")
    val_dir = os.path.join(base, "val")
    generate_dataset(train_dir, cfg.world, cfg.train_scenes, 0, digest)
    generate_dataset(val_dir, cfg.world, cfg.val_scenes, 1_000_000, digest)
    return load_dataset(train_dir), load_dataset(val_dir)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_pointcloud(model: PointCloudDetector, records: list,
                        source: str = "lidar") -> MetricsReport:
    model.eval()
    pairs = []
    with torch.no_grad():
        for rec in records:
            out = model(getattr(rec, source))
            dets = decode_boxes(out.cls, out.reg, model.grid)
            pairs.append((dets, rec.boxes))
    model.train()
    return evaluate_detections(pairs)


def evaluate_camera(model: CameraStudent, records: list) -> MetricsReport:
    model.eval()
    pairs = []
    with torch.no_grad():
        for rec in records:
            out = model(rec.images)
            dets = decode_boxes(out.cls, out.reg, model.grid)
            pairs.append((dets, rec.boxes))
    model.train()
    return evaluate_detections(pairs)


# ---------------------------------------------------------------------------
# LiDAR teacher


def train_lidar_teacher(cfg: RunConfig, train_recs: list, val_recs: list,
                        out_path: str | None = None):
    set_deterministic(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = PointCloudDetector(cfg.world.grid, cfg.world.n_classes)
    init_module(model, gen)
    model.head.reset_cls_bias()
    opt_cfg = cfg.teacher_optimizer
    opt = make_optimizer(model, opt_cfg)
    targets = [L.render_targets(r.boxes, cfg.world.grid) for r in train_recs]
    for step in range(opt_cfg.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(opt_cfg, step)
        opt.zero_grad()
        idx = batch_indices(cfg.seed, step, len(train_recs),
                            opt_cfg.batch_size)
        total = 0.0
        for i in idx:
            out = model(train_recs[i].lidar)
            total = total + L.centerpoint_loss(out.cls, out.reg, targets[i])
        total = total / len(idx)
        _check_finite(total, step)
        total.backward()
        clip_gradients(opt)
        opt.step()
    report = evaluate_pointcloud(model, val_recs)
    if out_path:
        save_checkpoint(out_path, model,
                        {"seed": cfg.seed, "kind": "lidar_teacher",
                         "config_hash": config_hash(cfg)})
    return model, report


# ---------------------------------------------------------------------------
# Instance segmentation teacher


def mask_to_roi(mask: np.ndarray, box4: np.ndarray) -> np.ndarray:
    """Resample a full-resolution binary mask into the 28x28 box window."""
    h, w = mask.shape
    cx, cy, bw, bh = box4
    out = np.zeros((MASK_SIZE, MASK_SIZE), dtype=bool)
    ys = cy - bh / 2 + (np.arange(MASK_SIZE) + 0.5) * bh / MASK_SIZE
    xs = cx - bw / 2 + (np.arange(MASK_SIZE) + 0.5) * bw / MASK_SIZE
    yi = np.clip(np.floor(ys).astype(int), 0, h - 1)
    xi = np.clip(np.floor(xs).astype(int), 0, w - 1)
    out[:, :] = mask[np.ix_(yi, xi)]
    return out


def paste_mask(mask28: np.ndarray, box4: np.ndarray,
               image_size: tuple) -> np.ndarray:
    """Inverse of mask_to_roi: expand a 28x28 mask into image resolution."""
    h, w = image_size
    cx, cy, bw, bh = box4
    out = np.zeros((h, w), dtype=bool)
    y0, y1 = int(math.floor(cy - bh / 2)), int(math.ceil(cy + bh / 2))
    x0, x1 = int(math.floor(cx - bw / 2)), int(math.ceil(cx + bw / 2))
    for y in range(max(0, y0), min(h, y1)):
        my = int((y + 0.5 - (cy - bh / 2)) / bh * MASK_SIZE)
        if not 0 <= my < MASK_SIZE:
            continue
        for x in range(max(0, x0), min(w, x1)):
            mx = int((x + 0.5 - (cx - bw / 2)) / bw * MASK_SIZE)
            if 0 <= mx < MASK_SIZE:
                out[y, x] = mask28[my, mx]
    return out


def gt_instance_labels(rec: SceneRecord, cam_i: int,
                       image_size: tuple) -> InstancePseudoLabels:
    boxes, classes, masks = rec.instance_gt(cam_i)
    if boxes.shape[0] == 0:
        return InstancePseudoLabels(np.zeros((0, 4)), np.zeros(0, np.int64),
                                    np.zeros(0),
                                    np.zeros((0, MASK_SIZE, MASK_SIZE)))
    rois = np.stack([mask_to_roi(m, b) for m, b in zip(masks, boxes)])
    return InstancePseudoLabels(boxes=boxes, class_ids=classes,
                                scores=np.ones(boxes.shape[0]), masks=rois)


def train_is_teacher(cfg: RunConfig, train_recs: list, val_recs: list,
                     out_path: str | None = None):
    set_deterministic(cfg.seed + 77)
    gen = torch.Generator().manual_seed(cfg.seed + 77)
    model = ISTeacher(cfg.world, n_rpn=cfg.n_rpn)
    init_module(model, gen)
    opt_cfg = cfg.is_teacher_optimizer
    opt = make_optimizer(model, opt_cfg)
    n_cam = cfg.world.n_cameras
    gt_cache = [[gt_instance_labels(r, c, cfg.world.image_size)
                 for c in range(n_cam)] for r in train_recs]
    stride = model.instance.stride
    for step in range(opt_cfg.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(opt_cfg, step)
        opt.zero_grad()
        idx = batch_indices(cfg.seed + 77, step, len(train_recs),
                            opt_cfg.batch_size)
        total = 0.0
        count = 0
        for i in idx:
            rec = train_recs[i]
            for cam_i in range(n_cam):
                labels = gt_cache[i][cam_i]
                f = model.extract(rec.images[cam_i])
                a_cls, a_reg = model.instance.rpn(f)
                loss = L.rpn_loss(a_cls, a_reg, labels.boxes,
                                  cfg.world.pv_shape, stride)
                # Feed GT boxes through the ROI branch alongside the model's
                # own proposals so the box/mask heads see positives early.
                props, _ = select_proposals(a_cls, a_reg, cfg.n_rpn,
                                            cfg.world.pv_shape, stride,
                                            cfg.world.image_size)
                if len(labels):
                    props = np.concatenate([props, labels.boxes], axis=0)
                det = model.instance.roi(f, props)
                loss = loss + L.roi_box_loss(det, labels) \
                    + L.roi_mask_loss(det, labels)
                total = total + loss
                count += 1
        total = total / count
        _check_finite(total, step)
        total.backward()
        clip_gradients(opt)
        opt.step()
    report = evaluate_is_teacher(model, cfg, val_recs)
    if out_path:
        save_checkpoint(out_path, model,
                        {"seed": cfg.seed, "kind": "is_teacher",
                         "config_hash": config_hash(cfg)})
    return model, report


def _ap_2d(flagged: list, n_gt: int) -> float:
    """11-point AP at IoU 0.5 from (score, is_tp) pairs."""
    if n_gt == 0:
        return 0.0
    flagged = sorted(flagged, key=lambda t: -t[0])
    tps = np.cumsum([f for _, f in flagged]) if flagged else np.array([0.0])
    prec = tps / (np.arange(len(flagged)) + 1) if flagged else np.array([0.0])
    rec = tps / n_gt if flagged else np.array([0.0])
    ap = 0.0
    for r in np.linspace(0, 1, 11):
        p = prec[rec >= r].max() if (rec >= r).any() else 0.0
        ap += p / 11
    return float(ap)


def evaluate_is_teacher(model: ISTeacher, cfg: RunConfig,
                        records: list) -> dict:
    """Pseudo-label quality on held-out frames: 2D AP@IoU0.5, mean mask IoU."""
    model.eval()
    flagged, n_gt, mask_ious, n_labels = [], 0, [], 0
    with torch.no_grad():
        for rec in records:
            for cam_i in range(cfg.world.n_cameras):
                gt_boxes, gt_cls, gt_masks = rec.instance_gt(cam_i)
                n_gt += gt_boxes.shape[0]
                _, _, det = model(rec.images[cam_i])
                labels = generate_pseudo_labels(
                    suppress_duplicate_detections(det), model_alpha(cfg))
                n_labels += len(labels)
                claimed = np.zeros(gt_boxes.shape[0], dtype=bool)
                for j in np.argsort(-labels.scores):
                    box = labels.boxes[j]
                    if gt_boxes.shape[0] == 0:
                        flagged.append((labels.scores[j], 0))
                        continue
                    ious = box_iou(box[None], gt_boxes)[0]
                    ious[claimed] = 0.0
                    best = int(ious.argmax())
                    ok = (ious[best] > 0.5
                          and labels.class_ids[j] == gt_cls[best])
                    flagged.append((labels.scores[j], int(ok)))
                    if ok:
                        claimed[best] = True
                        pred = paste_mask(labels.masks[j], box,
                                          cfg.world.image_size)
                        inter = np.logical_and(pred, gt_masks[best]).sum()
                        union = np.logical_or(pred, gt_masks[best]).sum()
                        mask_ious.append(inter / union if union else 0.0)
    model.train()
    return {
        "ap50": _ap_2d(flagged, n_gt),
        "mask_iou": float(np.mean(mask_ious)) if mask_ious else 0.0,
        "n_pseudo_labels": n_labels,
        "n_gt": n_gt,
    }


def model_alpha(cfg: RunConfig) -> float:
    return cfg.weights.alpha_2d


# ---------------------------------------------------------------------------
# Student training


def effective_components(cfg: RunConfig) -> set:
    """'gt' plus every enabled flag, dropping components whose weight is 0,
    so flag-off and zero-weight runs are identical by construction."""
    enabled = set()
    if cfg.weights.lambda_gt > 0:
        enabled.add("gt")
    for flag in cfg.enabled:
        if cfg.weights.weight(flag) > 0:
            enabled.add(flag)
    if not enabled:
        raise ValueError("no loss component has a positive weight")
    return enabled


def precompute_teacher_outputs(teacher: PointCloudDetector, records: list,
                               source: str) -> list:
    teacher.eval()
    outs = []
    with torch.no_grad():
        for rec in records:
            o = teacher(getattr(rec, source))
            outs.append({"cls": o.cls, "reg": o.reg, "h": o.h_tilde,
                         "f_ref": o.f_ref})
    return outs


def precompute_pseudo_labels(ist: ISTeacher, records: list, alpha: float,
                             n_cam: int) -> list:
    ist.eval()
    out = []
    with torch.no_grad():
        for rec in records:
            per_view = []
            for cam_i in range(n_cam):
                _, _, det = ist(rec.images[cam_i])
                per_view.append(generate_pseudo_labels(
                    suppress_duplicate_detections(det), alpha))
            out.append(per_view)
    return out


class StudentBundle(nn.Module):
    """Student plus training-only apparatus (discriminator), so one optimizer
    and one checkpoint cover everything resume needs."""

    def __init__(self, student: nn.Module, discriminator: nn.Module | None):
        super().__init__()
        self.student = student
        self.discriminator = discriminator


def build_student(cfg: RunConfig, is_teacher: ISTeacher | None = None):
    set_deterministic(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    if cfg.modality == "camera":
        student = CameraStudent(cfg.world, n_rpn=cfg.n_rpn)
    else:
        student = PointCloudDetector(cfg.world.grid, cfg.world.n_classes,
                                     with_bev_decoder=True)
    init_module(student, gen)
    student.head.reset_cls_bias()
    if cfg.pretrained_pv:
        if cfg.modality != "camera":
            raise ValueError("pretrained_pv requires a camera student")
        if is_teacher is None:
            raise ValueError("pretrained_pv requires the IS teacher")
        student.load_pv_extractor(is_teacher.pv_extractor.state_dict())
    disc = None
    if "xat" in cfg.enabled and cfg.weights.lambda_xat > 0:
        disc = PatchDiscriminator(32)
        init_module(disc, gen)
    return StudentBundle(student, disc)


def student_step_losses(cfg: RunConfig, bundle: StudentBundle,
                        rec: SceneRecord, targets: L.DenseTargets,
                        teacher_out: dict | None, pseudo: list | None,
                        enabled: set) -> dict:
    student = bundle.student
    comp = {}
    if cfg.modality == "camera":
        out = student(rec.images, with_instance="xis" in enabled)
        if "gt" in enabled:
            comp["gt"] = (L.centerpoint_loss(out.cls, out.reg, targets)
                          + L.depth_loss(out.d_hat, rec.depth_gt))
        h_hat = out.h_hat
    else:
        out = student(rec.radar)
        if "gt" in enabled:
            comp["gt"] = L.centerpoint_loss(out.cls, out.reg, targets)
        h_hat = out.h_tilde  # learned decoder output for radar students
    if "xod" in enabled:
        comp["xod"] = L.xod_loss(out.cls, out.reg, teacher_out["cls"],
                                 teacher_out["reg"], cfg.weights.alpha_3d,
                                 weighted=cfg.xod_weighted)
    if "xfd" in enabled:
        comp["xfd"] = L.xfd_loss(h_hat, teacher_out["h"])
    if "xat" in enabled:
        comp["xat"] = L.xat_loss(bundle.discriminator, out.f_ref,
                                 teacher_out["f_ref"],
                                 cfg.weights.lambda_grl)
    if "xis" in enabled:
        stride = student.instance.stride
        terms = []
        for cam_i, (a_cls, a_reg, det) in enumerate(out.instance):
            terms.append(L.xis_loss(a_cls, a_reg, det, pseudo[cam_i],
                                    cfg.world.pv_shape, stride))
        comp["xis"] = torch.stack(terms).mean()
    return comp


def train_student(cfg: RunConfig, train_recs: list, val_recs: list,
                  teachers: dict, out_dir: str | None = None,
                  resume_from: str | None = None):
    """Train the (camera or radar) student with the configured loss set.

    teachers: {"lidar": PointCloudDetector, "is": ISTeacher} as required by
    the enabled components; missing teachers are a configuration error.
    Returns (bundle, MetricsReport, loss log rows).
    """
    enabled = effective_components(cfg)
    needs_lidar = enabled & {"xod", "xfd", "xat"}
    if needs_lidar and "lidar" not in teachers:
        raise ValueError(
            f"components {sorted(needs_lidar)} need the LiDAR teacher")
    if "xis" in enabled and "is" not in teachers:
        raise ValueError("component xis needs the instance teacher")

    bundle = build_student(cfg, teachers.get("is"))
    opt = make_optimizer(bundle, cfg.optimizer)
    start_step = 0
    if resume_from:
        meta = load_checkpoint(resume_from, bundle, opt)
        start_step = int(meta["step"])

    targets = [L.render_targets(r.boxes, cfg.world.grid) for r in train_recs]
    teacher_outs = None
    if needs_lidar:
        teacher_outs = precompute_teacher_outputs(teachers["lidar"],
                                                  train_recs, "lidar")
    pseudo = None
    if "xis" in enabled:
        pseudo = precompute_pseudo_labels(teachers["is"], train_recs,
                                          cfg.weights.alpha_2d,
                                          cfg.world.n_cameras)

    log_rows = []
    opt_cfg = cfg.optimizer
    for step in range(start_step, opt_cfg.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(opt_cfg, step)
        opt.zero_grad()
        idx = batch_indices(cfg.seed, step, len(train_recs),
                            opt_cfg.batch_size)
        sums = {}
        total = 0.0
        for i in idx:
            comp = student_step_losses(
                cfg, bundle, train_recs[i], targets[i],
                teacher_outs[i] if teacher_outs else None,
                pseudo[i] if pseudo else None, enabled)
            t, rep = L.total_loss(comp, cfg.weights, enabled)
            total = total + t
            for k, v in rep.items():
                sums[k] = sums.get(k, 0.0) + v
        total = total / len(idx)
        _check_finite(total, step)
        total.backward()
        clip_gradients(opt)
        opt.step()
        row = {"step": step,
               **{k: sums.get(k, 0.0) / len(idx) for k in L.COMPONENT_NAMES},
               "total": float(total.detach()), "val_NDS": ""}
        if cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0:
            if cfg.modality == "camera":
                mid = evaluate_camera(bundle.student, val_recs)
            else:
                mid = evaluate_pointcloud(bundle.student, val_recs, "radar")
            row["val_NDS"] = f"{mid.NDS:.6f}"
        log_rows.append(row)

    if cfg.modality == "camera":
        report = evaluate_camera(bundle.student, val_recs)
    else:
        report = evaluate_pointcloud(bundle.student, val_recs, "radar")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "student.npz"), bundle,
                        {"seed": cfg.seed, "step": opt_cfg.steps,
                         "kind": f"{cfg.modality}_student",
                         "config_hash": config_hash(cfg)}, opt)
        write_loss_log(os.path.join(out_dir, "loss_log.csv"), log_rows)
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"),
                          [(cfg.name, cfg.seed, report)])
        write_summary(os.path.join(out_dir, "summary.txt"), cfg, report)
        save_scene_plots(bundle.student, cfg, val_recs[:4], out_dir)
    return bundle, report, log_rows


def save_scene_plots(model, cfg: RunConfig, records: list, out_dir: str):
    """BEV ground-truth-vs-prediction images for a handful of val scenes."""
    from .viz import plot_bev_scene
    model.eval()
    with torch.no_grad():
        for i, rec in enumerate(records):
            if cfg.modality == "camera":
                out = model(rec.images)
            else:
                out = model(rec.radar)
            dets = decode_boxes(out.cls, out.reg, cfg.world.grid)
            plot_bev_scene(rec.boxes, dets, cfg.world.grid,
                           os.path.join(out_dir, f"scene_{i}.png"),
                           title=f"{cfg.name} seed {cfg.seed} scene {i}")
    model.train()


# ---------------------------------------------------------------------------
# Teacher caching and run orchestration


def teacher_cache_dir(cfg: RunConfig, root: str) -> str:
    key = config_hash({
        "dataset": dataset_hash(cfg),
        "teacher_opt": config_hash(cfg.teacher_optimizer),
        "is_opt": config_hash(cfg.is_teacher_optimizer),
        "n_rpn": cfg.n_rpn,
        "seed": cfg.seed,
    })
    return os.path.join(root, "teachers", key)


def ensure_teachers(cfg: RunConfig, train_recs: list, val_recs: list,
                    root: str, need: set) -> dict:
    """Train (or load cached) teachers required by the enabled components."""
    cache = teacher_cache_dir(cfg, root)
    os.makedirs(cache, exist_ok=True)
    teachers = {}
    if need & {"xod", "xfd", "xat"}:
        path = os.path.join(cache, "lidar_teacher.npz")
        model = PointCloudDetector(cfg.world.grid, cfg.world.n_classes)
        if os.path.exists(path):
            load_checkpoint(path, model)
        else:
            model, _ = train_lidar_teacher(cfg, train_recs, val_recs, path)
        model.eval()
        teachers["lidar"] = model
    if "xis" in need or cfg.pretrained_pv:
        path = os.path.join(cache, "is_teacher.npz")
        model = ISTeacher(cfg.world, n_rpn=cfg.n_rpn)
        if os.path.exists(path):
            load_checkpoint(path, model)
        else:
            model, _ = train_is_teacher(cfg, train_recs, val_recs, path)
        model.eval()
        teachers["is"] = model
    return teachers


def run_training(cfg: RunConfig, root: str | None = None):
    """Full pipeline for one config: data, teachers, student, reports."""
    root = root or cfg.out_dir
    train_recs, val_recs = ensure_dataset(cfg, root)
    enabled = effective_components(cfg)
    teachers = ensure_teachers(cfg, train_recs, val_recs, root, enabled)
    run_dir = os.path.join(root, cfg.name, f"seed{cfg.seed}")
    bundle, report, log = train_student(cfg, train_recs, val_recs, teachers,
                                        out_dir=run_dir)
    return bundle, report, log


# ---------------------------------------------------------------------------
# Reports


def write_metrics_csv(path: str, rows: list):
    """rows: list of (config_name, seed, MetricsReport)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for name, seed, report in rows:
            writer.writerow({"config": name, "seed": seed,
                             **{k: f"{v:.6f}"
                                for k, v in report.row().items()}})


def write_loss_log(path: str, rows: list):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_summary(path: str, cfg: RunConfig, report: MetricsReport):
    lines = [
        f"config: {cfg.name}",
        f"seed: {cfg.seed}",
        f"modality: {cfg.modality}",
        f"components: gt + {', '.join(cfg.enabled) if cfg.enabled else '-'}",
        "",
    ]
    for key, value in report.row().items():
        lines.append(f"{key:>6}: {value:.4f}")
    lines.append("")
    for class_id, (tp, fp, fn) in report.counts.items():
        lines.append(f"class {class_id}: TP={tp} FP={fp} FN={fn}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

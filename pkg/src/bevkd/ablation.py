"""Multi-seed studies: component ablation, annotation-free training, and the
sensor-transfer scenario, with cached results and a consolidated CSV."""

from __future__ import annotations

import dataclasses
import json
import os
import traceback

import numpy as np

from .config import RunConfig, config_hash
from .metrics import MetricsReport
from .train import (
    CSV_COLUMNS,
    effective_components,
    ensure_dataset,
    ensure_teachers,
    evaluate_pointcloud,
    train_student,
    write_metrics_csv,
)

# Variant name -> enabled distillation components (ground truth always on
# except in the annotation-free study).
ABLATION_VARIANTS = {
    "baseline": (),
    "xod": ("xod",),
    "xfd": ("xfd",),
    "xat": ("xat",),
    "modal": ("xod", "xfd", "xat"),
    "xis": ("xis",),
    "all": ("xod", "xfd", "xat", "xis"),
}

DEFAULT_SEEDS = (0, 1, 2)


def variant_config(base: RunConfig, name: str, seed: int, *,
                   enabled=None, modality=None, lambda_gt=None,
                   xod_weighted=None) -> RunConfig:
    """One study member: the base config with only the studied knobs changed."""
    kwargs = {"name": name, "seed": seed}
    if enabled is not None:
        kwargs["enabled"] = tuple(enabled)
    if modality is not None:
        kwargs["modality"] = modality
    if xod_weighted is not None:
        kwargs["xod_weighted"] = xod_weighted
    if lambda_gt is not None:
        kwargs["weights"] = dataclasses.replace(base.weights,
                                                lambda_gt=lambda_gt)
    return dataclasses.replace(base, **kwargs)


class ResultStore:
    """Accumulated per-run metric rows, deduplicated by content hash.

    A row is reused only when name, seed, and the hash of the full run config
    all match; otherwise the run is recomputed and the row replaced. Persists
    as a JSON sidecar plus the consolidated CSV in the fixed column order.
    """

    def __init__(self, directory: str):
        self.directory = directory
        self.path = os.path.join(directory, "results.json")
        self.rows = {}
        self.failures = {}
        if os.path.exists(self.path):
            with open(self.path) as fh:
                data = json.load(fh)
            self.rows = {tuple(k.split("|", 1)): v
                         for k, v in data.get("rows", {}).items()}

    def get(self, name: str, seed: int, digest: str):
        row = self.rows.get((name, str(seed)))
        if row is not None and row["hash"] == digest:
            return row
        return None

    def put(self, name: str, seed: int, digest: str, metrics: dict):
        self.rows[(name, str(seed))] = {"hash": digest, **metrics}

    def save(self):
        os.makedirs(self.directory, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump({"rows": {f"{k[0]}|{k[1]}": v
                                for k, v in self.rows.items()}}, fh, indent=1)
        table = []
        for (name, seed), row in sorted(self.rows.items()):
            table.append({"config": name, "seed": int(seed),
                          **{c: row[c] for c in CSV_COLUMNS[2:]}})
        with open(os.path.join(self.directory, "metrics.csv"), "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in table:
                fh.write(",".join([r["config"], str(r["seed"])]
                                  + [f"{r[c]:.6f}" for c in CSV_COLUMNS[2:]])
                         + "\n")

    def median(self, name: str, key: str = "NDS"):
        vals = [row[key] for (n, _), row in self.rows.items() if n == name]
        return float(np.median(vals)) if vals else None

    def seeds_of(self, name: str):
        return sorted(int(s) for (n, s) in self.rows if n == name)


def _report_to_row(report: MetricsReport) -> dict:
    return {k: float(v) for k, v in report.row().items()}


def _run_one(store: ResultStore, cfg: RunConfig, root: str,
             teachers: dict) -> bool:
    digest = config_hash(cfg)
    if store.get(cfg.name, cfg.seed, digest) is not None:
        return True
    try:
        train_recs, val_recs = ensure_dataset(cfg, root)
        run_dir = os.path.join(root, cfg.name, f"seed{cfg.seed}")
        _, report, _ = train_student(cfg, train_recs, val_recs, teachers,
                                     out_dir=run_dir)
        store.put(cfg.name, cfg.seed, digest, _report_to_row(report))
        store.save()
        return True
    except Exception:
        store.failures[(cfg.name, cfg.seed)] = traceback.format_exc()
        return False


def _seed_teachers(base: RunConfig, seed: int, root: str,
                   need: set) -> tuple:
    """Teachers (trained or cached) plus the LiDAR teacher's own metrics."""
    cfg = dataclasses.replace(base, seed=seed)
    train_recs, val_recs = ensure_dataset(cfg, root)
    teachers = ensure_teachers(cfg, train_recs, val_recs, root, need)
    return teachers, val_recs


def run_ablation(base: RunConfig, root: str,
                 seeds=DEFAULT_SEEDS) -> ResultStore:
    """The component study: every variant in ABLATION_VARIANTS over all
    seeds, plus the LiDAR teacher itself evaluated on the same splits.

    A failed run is recorded and skipped; it never aborts the sweep.
    """
    store = ResultStore(os.path.join(root, "ablation"))
    for seed in seeds:
        teachers, val_recs = _seed_teachers(
            base, seed, root, {"xod", "xfd", "xat", "xis"})
        t_digest = config_hash(dataclasses.replace(base, seed=seed,
                                                   name="teacher_lidar"))
        if store.get("teacher_lidar", seed, t_digest) is None:
            report = evaluate_pointcloud(teachers["lidar"], val_recs)
            store.put("teacher_lidar", seed, t_digest,
                      _report_to_row(report))
            store.save()
        for name, flags in ABLATION_VARIANTS.items():
            cfg = variant_config(base, name, seed, enabled=flags)
            _run_one(store, cfg, root, teachers)
    store.save()
    return store


def run_annotation_free(base: RunConfig, root: str,
                        seeds=DEFAULT_SEEDS) -> ResultStore:
    """Distillation-only training (ground-truth weight zero, output
    distillation as the sole detection signal), weighted vs unweighted
    regression variants, against the ground-truth-only baseline."""
    store = ResultStore(os.path.join(root, "annfree"))
    for seed in seeds:
        teachers, _ = _seed_teachers(base, seed, root, {"xod"})
        for name, weighted in (("annfree_weighted", True),
                               ("annfree_unweighted", False)):
            cfg = variant_config(base, name, seed, enabled=("xod",),
                                 lambda_gt=0.0, xod_weighted=weighted)
            _run_one(store, cfg, root, teachers)
        cfg = variant_config(base, "baseline", seed, enabled=())
        _run_one(store, cfg, root, {})
    store.save()
    return store


def run_radar_scenario(base: RunConfig, root: str,
                       seeds=DEFAULT_SEEDS) -> ResultStore:
    """Sensor transfer: the point-cloud student trained on sparse noisy radar
    returns, ground-truth-only vs ground truth plus the modal distillation
    set, with the camera student's hyperparameters reused verbatim."""
    for field in ("optimizer", "weights"):
        if config_hash(getattr(base, field)) != config_hash(
                getattr(RunConfig(), field)):
            raise ValueError(
                f"sensor-transfer study must reuse default {field}")
    store = ResultStore(os.path.join(root, "radar"))
    for seed in seeds:
        teachers, _ = _seed_teachers(base, seed, root, {"xod"})
        for name, flags in (("radar_gt", ()),
                            ("radar_modal", ("xod", "xfd", "xat"))):
            cfg = variant_config(base, name, seed, enabled=flags,
                                 modality="radar")
            _run_one(store, cfg, root, teachers)
    store.save()
    return store


def plot_results(store: ResultStore, out_path: str, title: str = "study"):
    """Bar chart of per-seed and median composite scores per config."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted({n for (n, _) in store.rows})
    fig, ax = plt.subplots(figsize=(1.5 * max(4, len(names)), 4))
    for i, name in enumerate(names):
        seeds = store.seeds_of(name)
        vals = [store.rows[(name, str(s))]["NDS"] for s in seeds]
        ax.bar(i, store.median(name), width=0.6, alpha=0.6)
        ax.plot([i] * len(vals), vals, "k.", markersize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("NDS")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

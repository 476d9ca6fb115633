"""Command-line entry points; thin wrappers around the library functions."""

from __future__ import annotations

import dataclasses
import os

import click

from .ablation import (
    plot_results,
    ResultStore,
    run_ablation,
    run_annotation_free,
    run_radar_scenario,
)
from .config import RunConfig, apply_override, load_config, save_config
from .data import load_checkpoint
from .nets.camera_student import CameraStudent
from .nets.lidar_teacher import PointCloudDetector
from .train import (
    ensure_dataset,
    evaluate_camera,
    evaluate_pointcloud,
    run_training,
    train_is_teacher,
    train_lidar_teacher,
    write_metrics_csv,
)


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML run config")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None)(fn)
    fn = click.option("--override", "overrides", multiple=True,
                      metavar="KEY=VALUE",
                      help="dotted config override, repeatable")(fn)
    return fn


def build_config(config_path, seed, out_dir, overrides) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig()
    for spec in overrides:
        cfg = apply_override(cfg, spec)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out_dir is not None:
        updates["out_dir"] = out_dir
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


@click.group()
def main():
    """Multi-camera BEV detection with cross-modal distillation."""


@main.command("gen-data")
@common_options
def gen_data(**kw):
    """Generate (or reuse) the train/val scene datasets for a config."""
    cfg = build_config(**kw)
    train_recs, val_recs = ensure_dataset(cfg, cfg.out_dir)
    click.echo(f"train scenes: {len(train_recs)}  val scenes: {len(val_recs)}")


@main.command("train-teacher-lidar")
@common_options
def teacher_lidar(**kw):
    """Train the point-cloud teacher and report its detection metrics."""
    cfg = build_config(**kw)
    train_recs, val_recs = ensure_dataset(cfg, cfg.out_dir)
    path = os.path.join(cfg.out_dir, "lidar_teacher.npz")
    _, report = train_lidar_teacher(cfg, train_recs, val_recs, path)
    click.echo(f"saved {path}")
    for k, v in report.row().items():
        click.echo(f"{k:>6}: {v:.4f}")


@main.command("train-teacher-is")
@common_options
def teacher_is(**kw):
    """Train the instance-segmentation teacher; report pseudo-label quality."""
    cfg = build_config(**kw)
    train_recs, val_recs = ensure_dataset(cfg, cfg.out_dir)
    path = os.path.join(cfg.out_dir, "is_teacher.npz")
    _, report = train_is_teacher(cfg, train_recs, val_recs, path)
    click.echo(f"saved {path}")
    for k, v in report.items():
        click.echo(f"{k}: {v}")


@main.command("train-student")
@common_options
def student(**kw):
    """Train the student with the configured distillation components."""
    cfg = build_config(**kw)
    _, report, _ = run_training(cfg)
    run_dir = os.path.join(cfg.out_dir, cfg.name, f"seed{cfg.seed}")
    click.echo(f"artifacts in {run_dir}")
    for k, v in report.row().items():
        click.echo(f"{k:>6}: {v:.4f}")


@main.command("evaluate")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
def evaluate(checkpoint, **kw):
    """Evaluate a saved student checkpoint on the validation split."""
    cfg = build_config(**kw)
    _, val_recs = ensure_dataset(cfg, cfg.out_dir)
    if cfg.modality == "camera":
        model = CameraStudent(cfg.world, n_rpn=cfg.n_rpn)
        prefix = "model/student."
    else:
        model = PointCloudDetector(cfg.world.grid, cfg.world.n_classes,
                                   with_bev_decoder=True)
        prefix = "model/student."
    from .data import load_record
    import torch
    arrays, _ = load_record(checkpoint)
    state = {k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items()
             if k.startswith(prefix)}
    if not state:  # bare model checkpoint (teachers)
        state = {k[len("model/"):]: torch.as_tensor(v)
                 for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    if cfg.modality == "camera":
        report = evaluate_camera(model, val_recs)
    else:
        report = evaluate_pointcloud(model, val_recs, "radar")
    path = os.path.join(cfg.out_dir, "eval_metrics.csv")
    write_metrics_csv(path, [(cfg.name, cfg.seed, report)])
    click.echo(f"wrote {path}")
    for k, v in report.row().items():
        click.echo(f"{k:>6}: {v:.4f}")


@main.command("ablate")
@common_options
@click.option("--study", type=click.Choice(["components", "annfree"]),
              default="components")
@click.option("--seeds", default="0,1,2", help="comma-separated seed list")
def ablate(study, seeds, **kw):
    """Run the multi-seed component or annotation-free study."""
    cfg = build_config(**kw)
    seed_list = tuple(int(s) for s in seeds.split(","))
    runner = run_ablation if study == "components" else run_annotation_free
    store = runner(cfg, cfg.out_dir, seed_list)
    _echo_store(store)


@main.command("radar")
@common_options
@click.option("--seeds", default="0,1,2", help="comma-separated seed list")
def radar(seeds, **kw):
    """Run the sensor-transfer study on radar-like returns."""
    cfg = build_config(**kw)
    seed_list = tuple(int(s) for s in seeds.split(","))
    store = run_radar_scenario(cfg, cfg.out_dir, seed_list)
    _echo_store(store)


@main.command("plot")
@common_options
@click.option("--study", type=click.Choice(["ablation", "annfree", "radar"]),
              default="ablation")
def plot(study, **kw):
    """Render the comparison chart for a completed study."""
    cfg = build_config(**kw)
    store = ResultStore(os.path.join(cfg.out_dir, study))
    if not store.rows:
        raise click.ClickException(f"no results found under {store.directory}")
    out_path = os.path.join(store.directory, f"{study}.png")
    plot_results(store, out_path, title=study)
    click.echo(f"wrote {out_path}")


def _echo_store(store):
    click.echo(f"results in {store.directory}")
    for name in sorted({n for (n, _) in store.rows}):
        click.echo(f"{name:>20}: median NDS {store.median(name):.4f} "
                   f"(seeds {store.seeds_of(name)})")
    for (name, seed), tb in store.failures.items():
        click.echo(f"FAILED {name} seed {seed}:\n{tb}")


if __name__ == "__main__":
    main()

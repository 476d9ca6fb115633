"""Orchestration layer: configuration, serialization, training determinism,
checkpoint resume, the result store, and the command-line surface."""

import dataclasses
import json
import os

import numpy as np
import pytest
import torch
import yaml
from click.testing import CliRunner

from bevkd.ablation import (
    ABLATION_VARIANTS,
    ResultStore,
    _run_one,
    run_radar_scenario,
    variant_config,
)
from bevkd.cli import main as cli_main
from bevkd.config import (
    OptimizerConfig,
    RunConfig,
    apply_override,
    config_hash,
    dataset_hash,
    load_config,
    save_config,
)
from bevkd.data import (
    SceneRecord,
    load_checkpoint,
    load_record,
    save_checkpoint,
    save_record,
)
from bevkd.losses import LossWeights
from bevkd.nets.blocks import init_module
from bevkd.nets.camera_student import ISTeacher
from bevkd.nets.lidar_teacher import PointCloudDetector
from bevkd.synth.scene import generate_scene
from bevkd.train import (
    CSV_COLUMNS,
    _check_finite,
    batch_indices,
    effective_components,
    ensure_dataset,
    lr_at,
    train_student,
    write_metrics_csv,
)

torch.set_num_threads(1)


def tiny_cfg(**kw):
    """A config small enough to train a student in a couple of seconds."""
    defaults = dict(
        name="tiny", seed=0, train_scenes=8, val_scenes=4,
        optimizer=OptimizerConfig(steps=16, batch_size=2, cosine_decay=False))
    defaults.update(kw)
    return RunConfig(**defaults)


@pytest.fixture(scope="module")
def tiny_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="module")
def tiny_data(tiny_root):
    return ensure_dataset(tiny_cfg(), tiny_root)


@pytest.fixture(scope="module")
def stub_teachers():
    """Untrained but deterministic teachers: identity tests only need fixed
    teacher outputs, not good ones."""
    cfg = tiny_cfg()
    lidar = PointCloudDetector(cfg.world.grid, cfg.world.n_classes)
    init_module(lidar, torch.Generator().manual_seed(99))
    lidar.eval()
    ist = ISTeacher(cfg.world, n_rpn=cfg.n_rpn)
    init_module(ist, torch.Generator().manual_seed(98))
    ist.eval()
    return {"lidar": lidar, "is": ist}


class TestConfig:
    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny_cfg(enabled=("xod", "xfd"), modality="camera",
                       weights=LossWeights(lambda_xfd=3.5))
        path = str(tmp_path / "cfg.yaml")
        save_config(cfg, path)
        back = load_config(path)
        assert back == cfg
        assert config_hash(back) == config_hash(cfg)

    def test_yaml_is_plain_text(self, tmp_path):
        path = str(tmp_path / "cfg.yaml")
        save_config(tiny_cfg(), path)
        data = yaml.safe_load(open(path))
        assert data["name"] == "tiny"
        assert data["optimizer"]["batch_size"] == 2

    def test_override_nested(self):
        cfg = apply_override(tiny_cfg(), "optimizer.lr=0.001")
        assert cfg.optimizer.lr == 0.001
        assert cfg.optimizer.steps == 16  # untouched siblings

    def test_override_list_value(self):
        cfg = apply_override(tiny_cfg(), "enabled=[xod, xat]")
        assert cfg.enabled == ("xod", "xat")

    def test_override_weights(self):
        cfg = apply_override(tiny_cfg(), "weights.lambda_gt=0")
        assert cfg.weights.lambda_gt == 0.0

    def test_override_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config key"):
            apply_override(tiny_cfg(), "optimizer.momentum=0.9")
        with pytest.raises(ValueError, match="unknown config key"):
            apply_override(tiny_cfg(), "no_such_field=1")

    def test_override_requires_equals(self):
        with pytest.raises(ValueError, match="KEY=VALUE"):
            apply_override(tiny_cfg(), "optimizer.lr")

    def test_unknown_flag_rejected(self):
        with pytest.raises(ValueError, match="unknown distillation flags"):
            RunConfig(enabled=("xod", "bogus"))

    def test_unknown_modality_rejected(self):
        with pytest.raises(ValueError, match="unknown modality"):
            RunConfig(modality="sonar")

    def test_radar_forbids_xis(self):
        with pytest.raises(ValueError, match="X-IS"):
            RunConfig(modality="radar", enabled=("xod", "xis"))
        RunConfig(modality="radar", enabled=("xod", "xfd", "xat"))  # fine

    def test_config_hash_sensitivity(self):
        a, b = tiny_cfg(), tiny_cfg(seed=1)
        assert config_hash(a) == config_hash(tiny_cfg())
        assert config_hash(a) != config_hash(b)

    def test_dataset_hash_ignores_run_identity(self):
        a = tiny_cfg()
        assert dataset_hash(a) == dataset_hash(tiny_cfg(name="other", seed=5))
        assert dataset_hash(a) != dataset_hash(tiny_cfg(train_scenes=9))


class TestDataset:
    def test_record_round_trip(self, tmp_path):
        path = str(tmp_path / "rec.npz")
        arr = np.arange(12, dtype=np.float64).reshape(3, 4)
        save_record(path, {"x": arr}, {"seed": 7})
        back, meta = load_record(path)
        assert back["x"].dtype == np.dtype("<f4")
        assert np.array_equal(back["x"], arr)
        assert meta["seed"] == 7
        assert meta["fields"]["x"] == {"shape": [3, 4], "dtype": "<f4"}

    def test_split_sizes(self, tiny_data):
        train, val = tiny_data
        assert len(train) == 8 and len(val) == 4

    def test_records_match_generator(self, tiny_data):
        train, _ = tiny_data
        rec = train[3]
        scene = generate_scene(rec.seed, tiny_cfg().world)
        assert len(rec.boxes) == len(scene.boxes)
        for stored, fresh in zip(rec.boxes, scene.boxes):
            # records quantize to float32 on disk
            assert np.allclose(stored.as_array(), fresh.as_array(),
                               rtol=1e-6, atol=1e-6)

    def test_record_shapes(self, tiny_data):
        train, _ = tiny_data
        rec = train[0]
        cfg = tiny_cfg().world
        assert rec.images.shape == (cfg.n_cameras, 3, *cfg.image_size)
        assert rec.depth_gt.shape == (cfg.n_cameras, cfg.depth_bins,
                                      *cfg.pv_shape)
        assert rec.lidar.points.shape[0] == cfg.lidar_points

    def test_generation_idempotent(self, tiny_root, tiny_data):
        digest = dataset_hash(tiny_cfg())
        sample = os.path.join(tiny_root, "data", digest, "train",
                              "scene_00000.npz")
        before = os.path.getmtime(sample)
        ensure_dataset(tiny_cfg(), tiny_root)
        assert os.path.getmtime(sample) == before

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        model = PointCloudDetector(cfg.world.grid, cfg.world.n_classes)
        init_module(model, torch.Generator().manual_seed(3))
        path = str(tmp_path / "ckpt.npz")
        save_checkpoint(path, model, {"seed": 3, "kind": "test"})
        clone = PointCloudDetector(cfg.world.grid, cfg.world.n_classes)
        meta = load_checkpoint(path, clone)
        assert meta["kind"] == "test"
        for k, v in model.state_dict().items():
            assert torch.equal(clone.state_dict()[k], v)

    def test_checkpoint_shape_mismatch_named(self, tmp_path):
        cfg = tiny_cfg()
        model = PointCloudDetector(cfg.world.grid, cfg.world.n_classes)
        path = str(tmp_path / "ckpt.npz")
        save_checkpoint(path, model, {})
        wrong = PointCloudDetector(cfg.world.grid, n_classes=2)
        with pytest.raises(ValueError, match="shape mismatch for"):
            load_checkpoint(path, wrong)

    def test_checkpoint_missing_tensor_named(self, tmp_path):
        cfg = tiny_cfg()
        model = ISTeacher(cfg.world)
        path = str(tmp_path / "ckpt.npz")
        save_checkpoint(path, model.pv_extractor, {})
        with pytest.raises(ValueError, match="missing tensor"):
            load_checkpoint(path, model)


class TestSchedulerPurity:
    def test_batch_indices_deterministic(self):
        a = batch_indices(0, 5, 100, 8)
        b = batch_indices(0, 5, 100, 8)
        assert np.array_equal(a, b)
        assert len(set(a.tolist())) == 8 and a.min() >= 0 and a.max() < 100

    def test_batch_indices_vary_by_step_and_seed(self):
        base = batch_indices(0, 5, 100, 8)
        assert not np.array_equal(base, batch_indices(0, 6, 100, 8))
        assert not np.array_equal(base, batch_indices(1, 5, 100, 8))

    def test_batch_indices_small_dataset(self):
        idx = batch_indices(0, 0, 3, 8)
        assert sorted(idx.tolist()) == [0, 1, 2]

    def test_lr_cosine(self):
        opt = OptimizerConfig(lr=0.1, steps=100)
        assert lr_at(opt, 0) == 0.1
        assert lr_at(opt, 50) == pytest.approx(0.05)
        assert lr_at(opt, 100) == pytest.approx(0.0, abs=1e-12)

    def test_lr_constant_without_decay(self):
        opt = OptimizerConfig(lr=0.1, steps=100, cosine_decay=False)
        assert lr_at(opt, 0) == lr_at(opt, 99) == 0.1

    def test_check_finite_reports_step(self):
        _check_finite(torch.tensor(1.0), 0)
        with pytest.raises(RuntimeError, match="step 7"):
            _check_finite(torch.tensor(float("nan")), 7)


class TestComponentSemantics:
    def test_effective_components(self):
        cfg = tiny_cfg(enabled=("xod", "xfd"))
        assert effective_components(cfg) == {"gt", "xod", "xfd"}

    def test_zero_weight_drops_flag(self):
        cfg = tiny_cfg(enabled=("xod", "xfd"),
                       weights=LossWeights(lambda_xfd=0.0))
        assert effective_components(cfg) == {"gt", "xod"}

    def test_all_zero_rejected(self):
        cfg = tiny_cfg(weights=LossWeights(lambda_gt=0.0))
        with pytest.raises(ValueError, match="positive weight"):
            effective_components(cfg)

    def test_missing_teacher_is_config_error(self, tiny_data):
        train, val = tiny_data
        with pytest.raises(ValueError, match="LiDAR teacher"):
            train_student(tiny_cfg(enabled=("xfd",)), train, val, {})
        with pytest.raises(ValueError, match="instance teacher"):
            train_student(tiny_cfg(enabled=("xis",)), train, val, {})

    def test_flag_off_equals_zero_weight(self, tiny_data, stub_teachers):
        """A disabled component and the same component at weight zero must
        produce metric-identical runs."""
        train, val = tiny_data
        cfg_off = tiny_cfg(enabled=("xod",))
        cfg_zero = tiny_cfg(enabled=("xod", "xfd"),
                            weights=LossWeights(lambda_xfd=0.0))
        _, rep_off, log_off = train_student(cfg_off, train, val,
                                            stub_teachers)
        _, rep_zero, log_zero = train_student(cfg_zero, train, val,
                                              stub_teachers)
        assert rep_off.row() == rep_zero.row()
        assert [r["total"] for r in log_off] == [r["total"] for r in log_zero]


class TestDeterminismAndResume:
    def test_rerun_bit_identical(self, tiny_data, stub_teachers, tmp_path):
        train, val = tiny_data
        cfg = tiny_cfg(enabled=("xod", "xfd", "xat"))
        rows = []
        for run in ("a", "b"):
            out = str(tmp_path / run)
            _, report, _ = train_student(cfg, train, val, stub_teachers,
                                         out_dir=out)
            rows.append(open(os.path.join(out, "metrics.csv")).read())
            assert all(np.isfinite(v) for v in report.row().values())
        assert rows[0] == rows[1]

    def test_radar_rerun_bit_identical(self, tiny_data, stub_teachers):
        train, val = tiny_data
        cfg = tiny_cfg(modality="radar", enabled=("xod",))
        _, rep_a, _ = train_student(cfg, train, val, stub_teachers)
        _, rep_b, _ = train_student(cfg, train, val, stub_teachers)
        assert rep_a.row() == rep_b.row()

    def test_resume_matches_uninterrupted(self, tiny_data, stub_teachers,
                                          tmp_path):
        """Stopping at step 8 and resuming reproduces the straight-through
        run exactly (constant learning rate keeps the first leg identical)."""
        train, val = tiny_data
        half = tiny_cfg(enabled=("xod", "xat"),
                        optimizer=OptimizerConfig(
                            steps=8, batch_size=2, cosine_decay=False))
        full = dataclasses.replace(
            half, optimizer=dataclasses.replace(half.optimizer, steps=16))
        half_dir = str(tmp_path / "half")
        _, _, _ = train_student(half, train, val, stub_teachers,
                                out_dir=half_dir)
        bundle_r, rep_resumed, log_r = train_student(
            full, train, val, stub_teachers,
            resume_from=os.path.join(half_dir, "student.npz"))
        bundle_f, rep_full, log_f = train_student(full, train, val,
                                                  stub_teachers)
        assert rep_resumed.row() == rep_full.row()
        assert [r["total"] for r in log_r] \
            == [r["total"] for r in log_f][8:]
        for pr, pf in zip(bundle_r.parameters(), bundle_f.parameters()):
            assert torch.equal(pr, pf)


class TestResultStore:
    def _row(self, nds):
        return {c: 0.1 for c in CSV_COLUMNS[2:-1]} | {"NDS": nds}

    def test_persist_round_trip(self, tmp_path):
        store = ResultStore(str(tmp_path))
        store.put("baseline", 0, "abc", self._row(0.3))
        store.put("baseline", 1, "abc", self._row(0.5))
        store.save()
        back = ResultStore(str(tmp_path))
        assert back.get("baseline", 0, "abc")["NDS"] == 0.3
        assert back.get("baseline", 0, "xyz") is None  # stale hash
        assert back.median("baseline") == pytest.approx(0.4)
        assert back.seeds_of("baseline") == [0, 1]

    def test_csv_column_order(self, tmp_path):
        store = ResultStore(str(tmp_path))
        store.put("run", 0, "abc", self._row(0.2))
        store.save()
        header = open(os.path.join(str(tmp_path), "metrics.csv")
                      ).read().splitlines()[0]
        assert header == "config,seed,mAP,mATE,mASE,mAOE,mAVE,mAAE,NDS"

    def test_dedup_skips_training(self, tmp_path):
        """A stored row with a matching config hash short-circuits the run:
        with no teachers supplied, retraining would raise."""
        cfg = tiny_cfg(name="cached", enabled=("xod",))
        store = ResultStore(str(tmp_path))
        store.put("cached", 0, config_hash(cfg), self._row(0.2))
        assert _run_one(store, cfg, str(tmp_path), {}) is True
        assert not store.failures

    def test_failure_recorded_not_raised(self, tmp_path):
        cfg = tiny_cfg(name="doomed", enabled=("xod",))
        store = ResultStore(str(tmp_path))
        assert _run_one(store, cfg, str(tmp_path), {}) is False
        assert ("doomed", 0) in store.failures

    def test_variant_grid(self):
        assert len(ABLATION_VARIANTS) == 7
        assert set(ABLATION_VARIANTS["all"]) == {"xod", "xfd", "xat", "xis"}
        cfg = variant_config(tiny_cfg(), "modal", 2,
                             enabled=ABLATION_VARIANTS["modal"])
        assert cfg.name == "modal" and cfg.seed == 2
        assert cfg.enabled == ("xod", "xfd", "xat")

    def test_radar_study_requires_default_hyperparameters(self, tmp_path):
        tuned = tiny_cfg(optimizer=OptimizerConfig(lr=5e-3))
        with pytest.raises(ValueError, match="default optimizer"):
            run_radar_scenario(tuned, str(tmp_path))
        tuned = RunConfig(weights=LossWeights(lambda_xfd=3.0))
        with pytest.raises(ValueError, match="default weights"):
            run_radar_scenario(tuned, str(tmp_path))

    def test_write_metrics_csv_order(self, tmp_path, tiny_data):
        from bevkd.metrics import evaluate_detections
        train, val = tiny_data
        boxes = next(r.boxes for r in train + val if r.boxes)
        report = evaluate_detections([([], boxes)])
        path = str(tmp_path / "m.csv")
        write_metrics_csv(path, [("x", 0, report)])
        lines = open(path).read().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1].startswith("x,0,0.000000,")


TINY_OVERRIDES = [
    "--override", "train_scenes=4", "--override", "val_scenes=2",
    "--override", "optimizer.steps=4", "--override", "optimizer.batch_size=2",
    "--override", "teacher_optimizer.steps=4",
    "--override", "teacher_optimizer.batch_size=2",
    "--override", "is_teacher_optimizer.steps=2",
    "--override", "is_teacher_optimizer.batch_size=1",
]


class TestCLI:
    def test_gen_data(self, tmp_path):
        result = CliRunner().invoke(cli_main, [
            "gen-data", "--out", str(tmp_path), *TINY_OVERRIDES])
        assert result.exit_code == 0, result.output
        assert "train scenes: 4" in result.output

    def test_unknown_override_fails(self, tmp_path):
        result = CliRunner().invoke(cli_main, [
            "gen-data", "--out", str(tmp_path),
            "--override", "nope=1"])
        assert result.exit_code != 0

    def test_train_student_and_evaluate(self, tmp_path):
        out = str(tmp_path)
        result = CliRunner().invoke(cli_main, [
            "train-student", "--out", out, "--seed", "0", *TINY_OVERRIDES])
        assert result.exit_code == 0, result.output
        run_dir = os.path.join(out, "run", "seed0")
        metrics = open(os.path.join(run_dir, "metrics.csv")).read()
        assert metrics.splitlines()[0] == ",".join(CSV_COLUMNS)
        assert os.path.exists(os.path.join(run_dir, "loss_log.csv"))
        assert os.path.exists(os.path.join(run_dir, "summary.txt"))
        assert os.path.exists(os.path.join(run_dir, "scene_0.png"))

        result = CliRunner().invoke(cli_main, [
            "evaluate", "--out", out, *TINY_OVERRIDES,
            "--checkpoint", os.path.join(run_dir, "student.npz")])
        assert result.exit_code == 0, result.output
        assert os.path.exists(os.path.join(out, "eval_metrics.csv"))

    def test_train_teachers(self, tmp_path):
        out = str(tmp_path)
        result = CliRunner().invoke(cli_main, [
            "train-teacher-lidar", "--out", out, *TINY_OVERRIDES])
        assert result.exit_code == 0, result.output
        assert os.path.exists(os.path.join(out, "lidar_teacher.npz"))
        result = CliRunner().invoke(cli_main, [
            "train-teacher-is", "--out", out, *TINY_OVERRIDES])
        assert result.exit_code == 0, result.output
        assert os.path.exists(os.path.join(out, "is_teacher.npz"))

    def test_radar_verb_and_plot(self, tmp_path, monkeypatch):
        out = str(tmp_path)
        # The sensor-transfer study insists on the default hyperparameters;
        # point its notion of "default" at the tiny schedule so the CLI
        # plumbing can be exercised in seconds.
        import bevkd.ablation as ablation
        monkeypatch.setattr(
            ablation, "RunConfig",
            lambda: RunConfig(optimizer=OptimizerConfig(steps=4,
                                                        batch_size=2)))
        result = CliRunner().invoke(cli_main, [
            "radar", "--out", out, "--seeds", "0", *TINY_OVERRIDES])
        assert result.exit_code == 0, result.output
        store = ResultStore(os.path.join(out, "radar"))
        assert ("radar_gt", "0") in store.rows
        assert ("radar_modal", "0") in store.rows
        result = CliRunner().invoke(cli_main, [
            "plot", "--out", out, "--study", "radar"])
        assert result.exit_code == 0, result.output
        assert os.path.exists(os.path.join(out, "radar", "radar.png"))

    def test_plot_without_results_fails(self, tmp_path):
        result = CliRunner().invoke(cli_main, [
            "plot", "--out", str(tmp_path)])
        assert result.exit_code != 0

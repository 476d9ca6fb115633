"""Acceptance gate: eight go/no-go criteria, one test each.

Each test prints a single ``[PASS]``/``[FAIL]`` line (visible with ``-v -s``
or in captured output). Criteria 1-4 are fast analytic/oracle checks that
reuse the canonical oracle tests; criteria 5-8 train the reference
configuration (the package defaults) over seeds {0, 1, 2} and dominate the
suite runtime. Teacher training is excluded from the ablation timing budget:
the study contract assumes teachers are trained once and shared.
"""

import dataclasses
import os
import time
from contextlib import contextmanager

import numpy as np
import torch

import test_blocks
import test_eval
import test_synth
import test_teachers
from bevkd.ablation import (
    run_ablation,
    run_annotation_free,
    run_radar_scenario,
    variant_config,
)
from bevkd.config import RunConfig, config_hash
from bevkd.metrics import nds
from bevkd.train import ensure_teachers, train_student

torch.set_num_threads(1)

CAMERA_VARIANTS = ("baseline", "xod", "xfd", "xat", "modal", "xis", "all")
SEEDS = (0, 1, 2)


@contextmanager
def criterion(n, desc):
    try:
        yield
    except Exception:
        print(f"[FAIL] criterion {n}: {desc}")
        raise
    print(f"[PASS] criterion {n}: {desc}")


def _tp(ate, ase, aoe, ave, aae):
    return {"mATE": ate, "mASE": ase, "mAOE": aoe, "mAVE": ave, "mAAE": aae}


def test_criterion_1_nds_arithmetic():
    with criterion(1, "published-row NDS arithmetic within ±0.5 points"):
        full = nds(0.390, _tp(0.615, 0.269, 0.471, 0.345, 0.203))
        base = nds(0.359, _tp(0.636, 0.272, 0.493, 0.499, 0.198))
        assert abs(full * 100 - 50.5) <= 0.5, full
        assert abs(base * 100 - 47.2) <= 0.5, base


def test_criterion_2_gradient_suite():
    import test_losses
    with criterion(2, "finite-difference gradient suite, < 5 min"):
        t0 = time.time()
        test_losses.TestGaussianFocal().test_gradient()
        test_losses.TestDepthLoss().test_gradient()
        test_losses.TestCenterpointLoss().test_gradient()
        test_losses.TestXodLoss().test_gradient()
        test_losses.TestXfdLoss().test_gradient_through_decoder()
        test_losses.TestXatLoss().test_grl_sign_and_scale()
        test_losses.TestXatLoss().test_gradient_discriminator_params()
        test_losses.TestXisLoss().test_gradient()
        blocks = test_blocks.TestBlockGradients()
        blocks.setup_method()
        blocks.test_conv_stack()
        blocks.test_patch_discriminator()
        blocks.test_bev_decoder()
        blocks.test_centerpoint_head()
        blocks.test_bev_encoder_decoder()
        test_blocks.TestVoxelPool().test_gradient()
        test_blocks.TestLssTransform().test_gradient_both_inputs()
        test_blocks.TestGradientReversal().test_fd_sign()
        assert time.time() - t0 < 300


def test_criterion_3_oracle_suite():
    with criterion(3, "brute-force oracle suite, < 5 min"):
        t0 = time.time()
        test_blocks.TestVoxelPool().test_brute_force_oracle()
        test_blocks.TestLssTransform().test_scatter_oracle()
        test_teachers.TestSelectProposals().test_brute_force_oracle()
        test_teachers.TestCropResize().test_dense_resampling_oracle()
        test_synth.TestProjectDepthGT().test_against_brute_force_oracle()
        test_synth.TestSimulateLidar().test_occlusion_against_per_ray_oracle()
        test_eval.TestAveragePrecision().test_independent_recomputation()
        assert time.time() - t0 < 300


def test_criterion_4_round_trip():
    with criterion(4, "target encode/decode round trip on 200 box sets"):
        test_eval.TestDecodeBoxes().test_round_trip_200_sets()


def _prepare_all_teachers(cfg, work_root):
    from bevkd.ablation import _seed_teachers
    for seed in SEEDS:
        _seed_teachers(cfg, seed, work_root, {"xod", "xfd", "xat", "xis"})


def test_criterion_5_ablation_direction(small_cfg, work_root, teachers):
    with criterion(5, "component study directions over seeds {0,1,2}"):
        _prepare_all_teachers(small_cfg, work_root)  # cached, untimed
        t0 = time.time()
        store = run_ablation(small_cfg, work_root, SEEDS)
        elapsed = time.time() - t0
        assert not store.failures, store.failures
        base = store.median("baseline")
        lines = {n: store.median(n) for n in CAMERA_VARIANTS}
        print({k: round(v, 4) for k, v in lines.items()},
              "teacher", round(store.median("teacher_lidar"), 4),
              f"({elapsed:.0f}s)")
        assert lines["all"] >= base + 0.01
        for name in ("xod", "xfd", "xat", "xis"):
            assert lines[name] >= base - 0.005, (name, lines[name], base)
        for seed in SEEDS:
            t_nds = store.rows[("teacher_lidar", str(seed))]["NDS"]
            for name in CAMERA_VARIANTS:
                assert t_nds > store.rows[(name, str(seed))]["NDS"], (
                    name, seed)
        assert elapsed < 3600


def test_criterion_6_annotation_free(small_cfg, work_root, teachers):
    with criterion(6, "annotation-free training retains detection skill"):
        store = run_annotation_free(small_cfg, work_root, SEEDS)
        assert not store.failures, store.failures
        weighted_map = store.median("annfree_weighted", "mAP")
        baseline_map = store.median("baseline", "mAP")
        print("annfree mAP", round(weighted_map, 4),
              "baseline mAP", round(baseline_map, 4))
        assert weighted_map >= 0.5 * baseline_map
        assert (store.median("annfree_unweighted")
                < store.median("annfree_weighted"))


def test_criterion_7_radar_transfer(small_cfg, work_root, teachers):
    with criterion(7, "radar transfer with unchanged hyperparameters"):
        defaults = RunConfig()
        assert config_hash(small_cfg.optimizer) == config_hash(
            defaults.optimizer)
        assert config_hash(small_cfg.weights) == config_hash(defaults.weights)
        store = run_radar_scenario(small_cfg, work_root, SEEDS)
        assert not store.failures, store.failures
        print("radar gt", round(store.median("radar_gt"), 4),
              "radar modal", round(store.median("radar_modal"), 4))
        assert store.median("radar_modal") >= store.median("radar_gt")


def test_criterion_8_determinism(small_cfg, work_root, dataset, teachers,
                                 tmp_path):
    with criterion(8, "bit-identical metric CSVs on rerun"):
        train_recs, val_recs = dataset
        cfg = variant_config(small_cfg, "baseline", 0, enabled=())
        contents = []
        for run in ("a", "b"):
            out = str(tmp_path / run)
            train_student(cfg, train_recs, val_recs, teachers, out_dir=out)
            contents.append(open(os.path.join(out, "metrics.csv")).read())
        assert contents[0] == contents[1]

"""Shared fixtures: the reference config plus trained teachers, built once
per session and reused by the behavioral and acceptance tests."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bevkd.config import RunConfig
from bevkd.train import ensure_dataset, ensure_teachers


@pytest.fixture(scope="session")
def small_cfg():
    """The reference configuration (package defaults) at seed 0."""
    return RunConfig(name="reference", seed=0)


@pytest.fixture(scope="session")
def work_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("work"))


@pytest.fixture(scope="session")
def dataset(small_cfg, work_root):
    return ensure_dataset(small_cfg, work_root)


@pytest.fixture(scope="session")
def teachers(small_cfg, work_root, dataset):
    train_recs, val_recs = dataset
    return ensure_teachers(small_cfg, train_recs, val_recs, work_root,
                           {"xod", "xfd", "xat", "xis"})

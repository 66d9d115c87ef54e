import numpy as np
import pytest

from sefdet.config import TrainConfig
from sefdet.forge import build_dataset


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Small on-disk dataset shared across the suite: 10 entries at 72x72."""
    root = tmp_path_factory.mktemp("data") / "train"
    build_dataset(10, 72, 72, seed=7000, out_dir=root, aug_prob=0.5)
    return root


@pytest.fixture(scope="session")
def test_dataset_dir(tmp_path_factory):
    # disjoint seed range from dataset_dir, for evaluate()'s overlap check
    root = tmp_path_factory.mktemp("data") / "test"
    build_dataset(6, 72, 72, seed=8000, out_dir=root, aug_prob=0.5)
    return root


@pytest.fixture()
def tiny_cfg():
    """Config sized for smoke training: seconds, not minutes."""
    return TrainConfig(seed=3, lr=1e-3, stage1_iters=20, stage2_iters=10,
                       stage1_batch=8, stage2_batch=9, grad_accum=2)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)

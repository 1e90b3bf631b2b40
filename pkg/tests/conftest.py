import pytest
import os
import sys
from fractions import Fraction

import numpy as np

# Add project root to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from odcs.config import TrainConfig, dump_config  # noqa: E402
from odcs.data import make_synthetic_dataset  # noqa: E402
from odcs.trainer import Trainer  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synthetic_data(tmp_path):
    """Four 32x32 synthetic samples and their manifest"""
    manifest, samples = make_synthetic_dataset(tmp_path / "data", count=4, size=32, seed=7)
    return manifest, samples


def tiny_config(manifest, checkpoint_dir, **overrides):
    """Smallest configuration that still builds the full-depth networks"""
    values = dict(
        train_manifest=str(manifest),
        checkpoint_dir=str(checkpoint_dir),
        seed=3,
        batch_size=2,
        epochs=2,
        width_scale=Fraction(1, 8),
        input_size=32,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """A short training run shared by the evaluation and prediction tests"""
    root = tmp_path_factory.mktemp("run")
    manifest, samples = make_synthetic_dataset(root / "data", count=4, size=32, seed=11)
    config = tiny_config(manifest, root / "ckpt", max_steps=2)
    (root / "train.cfg").write_text(dump_config(config))
    Trainer(config, progress=False).fit()
    return {
        "root": root,
        "manifest": manifest,
        "samples": samples,
        "config": config,
        "checkpoint": root / "ckpt" / "latest.odcs",
    }

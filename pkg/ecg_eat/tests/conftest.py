import logging

import numpy as np
import pytest

from ecg_eat.models import LINEAR, build_branch
from ecg_eat.module_utils.store import ArtifactStore
from ecg_eat.signals import synth_ecg


@pytest.fixture(autouse=True)
def _restore_root_logging():
    """The CLI replaces the root handlers; put them back after every test."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def stemi_record():
    return synth_ecg("STEMI", 250.0, 8, 7)


@pytest.fixture
def normal_record():
    return synth_ecg("Normal", 250.0, 8, 7)


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "run")


@pytest.fixture
def st_mask():
    mask = np.zeros(100, dtype=bool)
    mask[40:70] = True
    return mask


@pytest.fixture
def blind_linear(st_mask):
    """Linear classifier over 100 samples whose weights are zero inside the mask."""
    net = build_branch(LINEAR, 100, n_classes=4, seed=1)
    net.view("head/W")[:, st_mask] = 0.0
    return net


@pytest.fixture
def small_config(tmp_path):
    """A run configuration small enough to run every stage in seconds."""
    return {
        "seed": 3,
        "output_dir": str(tmp_path / "run"),
        "data": {"n_per_class": 8, "n_beats": 3, "split": [0.5, 0.25, 0.25]},
        "features": {"time_len": 256, "n_bins": 32, "cwt": {"f_min": 4.0, "n_scales": 16, "out_size": 8}},
        "balance": {"k": 2},
        "models": {
            "latent_dim": 8,
            "time": {"max_epochs": 2, "batch": 8, "patience": 1},
            "freq": {"max_epochs": 2, "batch": 8, "patience": 1},
            "tf": {"max_epochs": 2, "batch": 8, "patience": 1},
            "early": {"max_epochs": 2, "batch": 8, "patience": 1},
        },
        "fusion": {"warmup_epochs": 1, "grid_step": 0.25, "gate_grid_step": 0.5,
                   "train": {"max_epochs": 1, "batch": 8, "patience": 1}},
        "attacks": [{"kind": kind, "epsilon": eps, "steps": 3} for kind in ("FGSM_STT", "PGD_STT")
                    for eps in (0.005, 0.01, 0.02)],
        "explain": {"n_perm": 100, "n_resamples": 100, "ig_steps": 8, "window": 32},
    }

import os
import time
from pathlib import Path

import numpy as np
import pytest

from guidedit import runner
from guidedit.config import RunConfig
from guidedit.schedule import make_schedule

# wall-clock seconds spent training inside this session (None when checkpoints were reused)
TIMINGS: dict[str, float | None] = {"train": None}

TINY = {
    "dataset": {"samples_per_combination": 1},
    "codec": {"epochs": 2},
    "denoiser": {"epochs": 2},
    "perceptual": {"epochs": 1, "align_epochs": 2},
    "schedule": {"inference_steps": 10},
    "pipeline": {"eval_pairs": 3},
}


def schedule_with_abar(value: float):
    """One-step schedule whose only alpha_bar equals ``value``."""
    return make_schedule(1, "linear", 1.0 - value, 1.0 - value)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return RunConfig(TINY)


@pytest.fixture(scope="session")
def trained_dir(tmp_path_factory):
    """Checkpoints from one default-config training run, shared by the whole session.

    Set GUIDEDIT_TEST_CHECKPOINTS to a directory holding checkpoints/ from
    `guidedit train` to skip the training step.
    """
    reuse = os.environ.get("GUIDEDIT_TEST_CHECKPOINTS")
    if reuse:
        return Path(reuse)
    out = tmp_path_factory.mktemp("trained")
    start = time.perf_counter()
    runner.train(RunConfig(), "all", out)
    TIMINGS["train"] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def trained_models(trained_dir):
    return runner.load_models(RunConfig(), trained_dir)

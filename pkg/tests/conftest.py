from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from rewardwin import rewardmodel
from rewardwin.simenv import EnvConfig

SHARE = Path(__file__).resolve().parent.parent / "share" / "configs"


@pytest.fixture
def env_config() -> EnvConfig:
    return EnvConfig()


@pytest.fixture
def small_env() -> EnvConfig:
    return EnvConfig.load(SHARE / "small.conf")


@pytest.fixture
def tiny_env() -> EnvConfig:
    # 16x12 camera, matches the tiny classifier
    return EnvConfig.load(SHARE / "small.conf").with_resolution(16, 12)


@pytest.fixture
def tiny_classifier():
    return rewardmodel.build_classifier((16, 12), seed=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained():
    # full capture at the default settings; only the slow acceptance runs ask for it
    from rewardwin import dataset

    config = EnvConfig()
    parts = dataset.split(dataset.generate_sessions(config, workers=2))
    clf, report = rewardmodel.train_classifier(parts)
    return config, parts, clf, report

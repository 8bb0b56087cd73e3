"""Shared trained models. The expensive ones are session-scoped and built lazily."""
import time

import pytest

from adaptdiff.config import Config
from adaptdiff.experiment import cfg_train_voice, pretrain_voice
from adaptdiff.numerics import Rng
from adaptdiff.score_models import ConditionalScoreNet
from adaptdiff.toyworld import two_speaker_gaussian_world
from adaptdiff.training import TrainConfig, cfg_stage, pretrain

TINY = """\
version = 1
hidden = 32
depth = 1
iterations = 30
cfg_iterations = 20
classifier_iterations = 30
duration_iterations = 30
encoder_iterations = 10
utterances_per_speaker = 3
steps = 5
runs = 2
grid_iterations = 0,5
grid_gamma_s = 0,6
finetune_iterations = 5
"""

# CPU seconds spent building session fixtures, for runtime budgets
BUILD_SECONDS: dict[str, float] = {}


@pytest.fixture
def tiny_config() -> Config:
    """Seconds-scale pipeline settings for harness plumbing tests."""
    return Config.parse(TINY)


@pytest.fixture(scope="session")
def tiny_voice():
    cfg = Config.parse(TINY)
    return cfg_train_voice(pretrain_voice(cfg, on_log=lambda s: None), on_log=lambda s: None)


@pytest.fixture(scope="session")
def gaussian_world():
    return two_speaker_gaussian_world(m=1.0, std=0.5, C=2, L=1)


@pytest.fixture(scope="session")
def gaussian_nets(gaussian_world):
    """(pretrained, cfg-stage) score nets on the symmetric two-speaker Gaussian world."""
    net = ConditionalScoreNet(2, 16)
    net.init_params(Rng(0).stream("init"))
    res = pretrain(gaussian_world, net, TrainConfig(iterations=2000, batch=64, lr=1e-3), Rng(1))
    pre = net.with_params(res.params)
    res = cfg_stage(gaussian_world, pre, TrainConfig(stage="cfg_stage", iterations=2000, batch=64, lr=3e-4), Rng(2))
    return pre, pre.with_params(res.params)


@pytest.fixture(scope="session")
def desk_voice():
    """The default configuration trained end to end (about two minutes on one core)."""
    start = time.process_time()
    cfg = Config()
    voice = cfg_train_voice(pretrain_voice(cfg, on_log=lambda s: None), on_log=lambda s: None)
    BUILD_SECONDS["desk_voice"] = time.process_time() - start
    return voice

import numpy as np
import pytest

from data_synth import generate_labeled_corpus, generate_unlabeled_corpus
from models import CorpusSpec, EncoderConfig, MaskingPolicy, TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run calibration tests on the full default experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY_FRAMES = 16
TINY_BINS = 8


@pytest.fixture
def tiny_spec():
    return CorpusSpec(n_train=16, n_dev=4, n_eval=6, frames=TINY_FRAMES, bins=TINY_BINS, bumps=3, seed=3)


@pytest.fixture
def tiny_splits(tiny_spec):
    return generate_labeled_corpus(tiny_spec)


@pytest.fixture
def tiny_unlabeled():
    return generate_unlabeled_corpus(6, seed=11, frames=TINY_FRAMES, bins=TINY_BINS)


@pytest.fixture
def tiny_encoder_config():
    return EncoderConfig(layers=2, model_dim=8, heads=2, ff_dim=16, bins=TINY_BINS, stack_factor=2)


@pytest.fixture
def tiny_policy():
    return MaskingPolicy(segment_length=2, stack_factor=2)


@pytest.fixture
def quick_train():
    return TrainConfig(epochs=1, batch_size=4, lr=0.01, momentum=0.9, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

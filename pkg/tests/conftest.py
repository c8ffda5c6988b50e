import os

import pytest

from project.config import DatasetConfig
from project.datasets import make_blobs
from project.numerics.module import make_rng
from project.oracle import Network
from tests.common.helpers import load_fixture

SETTINGS_VARIABLES = {"MODEL", "WEIGHTS", "DATASET", "OUT", "SEED"}
SETTINGS_PREFIXES = ("ENV__", "AGENT__", "ENCODER__", "DATA__", "BASELINE__", "FINETUNE__", "REWARD_FINETUNE__")


@pytest.fixture
def rng():
    return make_rng(727)


@pytest.fixture(scope="package")
def single_conv():
    return load_fixture("single_conv")


@pytest.fixture(scope="package")
def plain_toy():
    return load_fixture("plain_toy")


@pytest.fixture(scope="package")
def resnet_toy():
    return load_fixture("resnet_toy")


@pytest.fixture(scope="package")
def mobile_v1_toy():
    return load_fixture("mobile_v1_toy")


@pytest.fixture(scope="package")
def mobile_v2_toy():
    return load_fixture("mobile_v2_toy")


@pytest.fixture(scope="package")
def shuffle_toy():
    return load_fixture("shuffle_toy")


@pytest.fixture(scope="package")
def motif_toy():
    return load_fixture("motif_toy")


@pytest.fixture(scope="package")
def with_initial_weights():
    """Attach the initializer weights of the training oracle to a model."""

    def _attach(m, seed: int = 0):
        return Network(m, seed=seed).to_model()

    return _attach


@pytest.fixture(scope="package")
def blobs():
    # two linearly separable classes shaped like the plain_toy input
    return make_blobs(per_class=100, num_classes=2, input_shape=(3, 8, 8), seed=0).with_splits(DatasetConfig())


@pytest.fixture
def batch(rng):
    def _batch(m, n: int = 4):
        return rng.standard_normal((n, *m.input_shape))

    return _batch


@pytest.fixture(autouse=True)
def _isolate_settings(monkeypatch, tmp_path):
    # settings read .env from the working directory and nested variables from the environment
    monkeypatch.chdir(tmp_path)

    for name in list(os.environ):
        if name.upper() in SETTINGS_VARIABLES or name.upper().startswith(SETTINGS_PREFIXES):
            monkeypatch.delenv(name)

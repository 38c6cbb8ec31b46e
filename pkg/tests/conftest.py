import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lymphnode import credential as credmod
from lymphnode import data as datamod
from lymphnode import gsuap, nn

ACCEPTANCE_LINES = []


def record_criterion(name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def mnist_dir():
    """Directory holding the official IDX files, if one is available."""
    for candidate in (
        os.environ.get("LYMPHNODE_MNIST_DIR"),
        os.path.join(os.path.dirname(__file__), "..", "data", "mnist"),
    ):
        if candidate and os.path.isdir(candidate):
            try:
                datamod._find_idx(candidate, "train-images-idx3-ubyte")
                return candidate
            except Exception:
                continue
    return None


@pytest.fixture(scope="session")
def mnist_like():
    """The handwritten-digit dataset pair: real MNIST when the IDX files
    are present, the procedural digit corpus otherwise."""
    directory = mnist_dir()
    if directory:
        train, test = datamod.load_mnist(directory)
        return train.take(12000), test.take(2000)
    full = datamod.make_digits(14000, seed=7)
    return full.take(12000), full.subset(np.arange(12000, 14000))


@pytest.fixture(scope="session")
def train_ds(mnist_like):
    return mnist_like[0]


@pytest.fixture(scope="session")
def test_ds(mnist_like):
    return mnist_like[1]


@pytest.fixture(scope="session")
def backbone(train_ds, test_ds):
    bb = nn.Backbone(seed=1)
    result = nn.train(
        bb,
        train_ds.images,
        train_ds.labels,
        nn.TrainConfig(epochs=3, batch_size=64, lr=0.05, seed=1),
        test_ds.images,
        test_ds.labels,
    )
    bb.train_result = result
    return bb


@pytest.fixture(scope="session")
def spec():
    return credmod.generate_spec(seed=11)


@pytest.fixture(scope="session")
def calibration(train_ds):
    return train_ds.take(100)


@pytest.fixture(scope="session")
def wg_scores(backbone, calibration):
    return gsuap.score_channels(backbone, calibration, "weight-grad")


@pytest.fixture(scope="session")
def mask06(wg_scores):
    return gsuap.build_mask(wg_scores, 0.6)


@pytest.fixture(scope="session")
def pga_config():
    return gsuap.PgaConfig(step_size=0.1, steps=300, epsilon=2.0, batch_size=50, seed=3)


@pytest.fixture(scope="session")
def gsuap_noise(backbone, mask06, calibration, pga_config):
    return gsuap.optimize_noise(backbone, mask06, calibration, pga_config)


@pytest.fixture(scope="session")
def bundle(backbone, spec, mask06, gsuap_noise):
    from lymphnode import plugin

    return plugin.protect(backbone, spec, mask06, gsuap_noise, lam=1.0)


@pytest.fixture(scope="session")
def tiny_backbone():
    """Quickly trained small-model for cheap structural tests."""
    full = datamod.make_digits(1200, seed=21)
    bb = nn.Backbone(seed=2)
    nn.train(
        bb,
        full.take(1000).images,
        full.take(1000).labels,
        nn.TrainConfig(epochs=1, seed=2),
    )
    return bb

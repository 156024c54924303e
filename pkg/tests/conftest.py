import numpy as np
import pytest

from r2lab.data import synth_gaussian


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_data():
    """Tiny train/test split for fast end-to-end runs."""
    common = dict(classes=4, dim=64, separation=6.0, noise=0.5, density=0.3, clip=True)
    train = synth_gaussian(256, seed=1, split="train", **common)
    test = synth_gaussian(128, seed=2, split="test", **common)
    return train, test


SMALL_DATA_CFG = {"classes": 4, "dim": 64, "separation": 6.0, "noise": 0.5, "density": 0.3,
                  "clip": True, "n_train": 256, "n_test": 128, "active": 1.0}


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)

from pathlib import Path

import numpy as np
import pytest

from capsfold import fixture_path
from capsfold.capsnet import CapsNet, Hyperparameters
from capsfold.pdb import parse_pdb

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def fixture_text():
    return Path(fixture_path()).read_text()


@pytest.fixture(scope="session")
def structure(fixture_text):
    return parse_pdb(fixture_text, "1A8O")


def tiny_hp(**kw):
    base = dict(filters=4, kernel_size=3, primarycap_dim=4, voxelcap_dim=8, stride=2, primary_maps=2)
    base.update(kw)
    return Hyperparameters(**base)


@pytest.fixture
def tiny_model():
    """8 x 8^3 input, kernel 3, stride 2, 2 primary maps, dims 4/8."""
    return CapsNet(tiny_hp(), (8, 8, 8, 8), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

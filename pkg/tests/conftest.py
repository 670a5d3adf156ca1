import numpy as np
import pytest

from stereocbf.geometry import CameraRig


@pytest.fixture
def rig():
    return CameraRig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured(shape, seed=0):
    """High-contrast random texture, so every block match is unambiguous."""
    return np.random.default_rng(seed).integers(0, 256, shape).astype(np.uint8)

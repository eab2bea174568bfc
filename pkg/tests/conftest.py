import numpy as np
import pytest

from eprqkd.defaults import default_setup
from eprqkd.detection import SlitDetector, StationConfig


def make_station(
    O=200.0, I=600.0, f=150.0, k=330.0, x_centers=(1.0, 2.0), p_centers=(1.0, 2.0),
    x_width=0.2, p_width=0.5, origin=0.0,
):
    return StationConfig(
        object_distance=O,
        image_distance=I,
        focal_length=f,
        wavenumber=k,
        x_detectors=(
            SlitDetector(x_centers[0], x_width, 0),
            SlitDetector(x_centers[1], x_width, 1),
        ),
        p_detectors=(
            SlitDetector(p_centers[0], p_width, 0),
            SlitDetector(p_centers[1], p_width, 1),
        ),
        origin=origin,
    )


@pytest.fixture(scope="session")
def default_experiment():
    """Calibrated default source and equalized stations (alice, bob)."""
    return default_setup(equalize=True)


@pytest.fixture(scope="session")
def raw_experiment():
    """Same geometry without the level-equalizing filters."""
    return default_setup(equalize=False)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)

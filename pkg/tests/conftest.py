import numpy as np
import pytest

from emfisim.surface import load_calibration
from emfisim.workload import DeviceState, get_profile


@pytest.fixture(scope="session")
def surface():
    return load_calibration()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def loaded_state(model="resnet50", corruption=None):
    state = DeviceState()
    state.reload(model)
    if corruption is not None:
        state.corruption = corruption
    return state, get_profile(model)

import numpy as np
import pytest

from facesplat import model


@pytest.fixture(scope="session")
def small_assets():
    """162-vertex synthetic model, enough structure for every pipeline."""
    return model.synth_model(seed=11, n_verts_target=162)


@pytest.fixture(scope="session")
def default_assets():
    """Default-resolution synthetic model (642 vertices)."""
    return model.synth_model(seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)

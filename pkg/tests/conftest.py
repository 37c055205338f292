import numpy as np
import pytest

from src.state import Architecture, DaMethod, InitScheme, MoonsSpec
from src.tools.domains import gen_rotated_moons
from src.tools.models import init_params


@pytest.fixture
def tiny_arch():
    """Two heads and a discriminator, small enough for finite-difference oracles (51 parameters)."""
    return Architecture(input_dim=2, feature_dims=[4], num_classes=2, num_classifiers=2, discriminator_dims=[3])


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, InitScheme(kind="xavier-normal"), seed=7)


@pytest.fixture
def moons_pair():
    """(labeled source, unlabeled target) batches of 16 points each."""
    src = gen_rotated_moons(MoonsSpec(rotation_deg=0, n_per_class=8, seed=1))
    tgt = gen_rotated_moons(MoonsSpec(rotation_deg=45, n_per_class=8, seed=2)).unlabeled()
    return src, tgt


@pytest.fixture(params=["dann", "mcd-onestep", "mme"])
def base_method(request):
    return DaMethod(kind=request.param, lam=0.7)


def random_matrix(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=shape)

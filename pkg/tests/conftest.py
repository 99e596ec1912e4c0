import numpy as np
import pytest

from decoupled import datagen as D
from decoupled import training as T


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def tiny_springs():
    return D.make_spring_dataset(D.SpringConfig(n_samples=24, n_particles=3, seq_len=12, seed=5))


@pytest.fixture(scope="session")
def tiny_three_body():
    return D.make_three_body_dataset(D.ThreeBodyConfig(n_train=16, seed=5))


def small_config(dataset, **kw):
    base = dict(n=2, q=4, d_k=3, field_width=8, init_hidden=6, link_hidden=8)
    base.update(kw)
    return T.model_config_for(dataset, **base)

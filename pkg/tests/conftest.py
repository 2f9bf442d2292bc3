import numpy as np
import pytest
from hypothesis import settings

from forcekit.dataio import load_builtin
from forcekit.model import EquivariantTransformer, ModelConfig

settings.register_profile("forcekit", deadline=None, max_examples=40)
settings.load_profile("forcekit")

SMALL = ModelConfig(n_layers=2, embed_dim=16, n_heads=4, n_rbf=8, cutoff=5.0)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def perturb_readout(model: EquivariantTransformer, seed: int = 0, scale: float = 0.3):
    """Give the zero-initialised final layer random weights so outputs are non-trivial."""
    gen = np.random.default_rng(seed)
    flat = model.flat_params()
    flat = flat + scale * gen.standard_normal(len(flat)) * (flat == 0)
    model.load_flat_params(flat)
    return model


@pytest.fixture(scope="session")
def chain6():
    return load_builtin("chain6")


@pytest.fixture(scope="session")
def chain9():
    return load_builtin("chain9")


@pytest.fixture(scope="session")
def chain12():
    return load_builtin("chain12")


@pytest.fixture
def small_model():
    return perturb_readout(EquivariantTransformer(SMALL, seed=3))

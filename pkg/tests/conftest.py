import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image(rng):
    return rng.random((64, 64, 3)).astype(np.float32)


class DotRegressor(torch.nn.Module):
    """Test fixture with f(a, b) = a . b."""

    def __init__(self, embed_dim):
        super().__init__()
        self.embed_dim = embed_dim
        self.dummy = torch.nn.Parameter(torch.zeros(()))

    def score(self, z1, z2):
        return (z1 * z2).sum(dim=1) + 0.0 * self.dummy


@pytest.fixture
def dot_regressor():
    return DotRegressor

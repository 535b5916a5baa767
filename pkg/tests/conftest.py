import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def onehot_encoding(levels_idx, n_levels):
    """Exact one-hot [N x HW] encoding from integer level indices."""
    idx = np.asarray(levels_idx).reshape(-1)
    e = np.zeros((n_levels, idx.size))
    e[idx, np.arange(idx.size)] = 1.0
    return e

import numpy as np
import pytest

import annq


@pytest.fixture(scope="session")
def trained_small():
    """A small trained system shared by read-only tests.

    3000 vectors in 16 dims from a 30-cluster mixture; M=4 dictionaries of
    K=16 codewords, two annealing sweeps.
    """
    X = annq.generate_synthetic(3000, 16, clusters=30, spread=0.1, seed=5)
    config = annq.TrainConfig(m_count=4, k_count=16, sweeps=2, beam_width=10, seed=5)
    codebook, encoded, report = annq.train_from_scratch(X, config)
    return X, config, codebook, encoded, report


@pytest.fixture(scope="session")
def cross_small(trained_small):
    _, _, codebook, _, _ = trained_small
    return annq.cross_products(codebook)


@pytest.fixture(scope="session")
def tree_small(trained_small, cross_small):
    _, _, codebook, encoded, _ = trained_small
    return annq.build_atree(encoded, codebook, cross_small)


def random_codebook(rng, m_count, k_count, dim):
    cw = rng.standard_normal((m_count, k_count, dim)).astype(np.float32)
    return annq.Codebook(codewords=cw, order=np.arange(m_count, dtype=np.int64))

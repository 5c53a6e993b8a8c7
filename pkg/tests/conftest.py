import numpy as np
import pytest

from risloc import table_ii_config, build_uniform_grid


@pytest.fixture
def small_config():
    """Desk-size system for fast unit tests."""
    return table_ii_config(n_subcarriers=6, n_blocks=4, n_tx=3, n_rx=2,
                           ris_cols=4, ris_rows=4, n_devices=2)


@pytest.fixture
def small_grid(small_config):
    return build_uniform_grid(small_config, 6, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)

import numpy as np
import pytest

from tournet.model import ModelConfig, init_params


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running acceptance checks (desk-scale training)")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(hidden=16, gnn_layers=2, fc_layers=2, heads=2)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=0)


@pytest.fixture
def tiny_params64(tiny_cfg):
    return init_params(tiny_cfg, seed=0, dtype=np.float64)

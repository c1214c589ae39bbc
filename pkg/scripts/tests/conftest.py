"""Pytest configuration and fixtures for lowbit_quant tests."""

import pytest
import sys
from pathlib import Path

import numpy as np

# Add scripts directory to path
scripts_dir = Path(__file__).parent.parent
sys.path.insert(0, str(scripts_dir))

from lowbit_quant.config import QuantConfig
from lowbit_quant.models import ActivationSpec, SyntheticSpec
from lowbit_quant.synthetic import gen_activation_batch, gen_gaussian_longtail, make_rng
from lowbit_quant.tensorio import CorpusLayer


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical checks over many seeded samples")


@pytest.fixture
def rng():
    """Seeded Philox generator."""
    return make_rng(1234)


@pytest.fixture
def pow2_row():
    """Weight row whose magnitudes are exact powers of two."""
    return np.array([1.0, 2.0, 4.0, 8.0, -1.0, -4.0])


@pytest.fixture
def longtail_weights():
    """64 x 128 Gaussian long-tail weight matrix."""
    return gen_gaussian_longtail(SyntheticSpec(rows=64, cols=128, seed=3))


@pytest.fixture
def salient_layer():
    """(X, W) with one salient activation channel; J >= 1 after smoothing."""
    acts = gen_activation_batch(
        ActivationSpec(
            batches=4, tokens=16, channels=64, sigma=3.0, salient_channels=(5,), seed=11
        )
    )
    weights = make_rng(12).standard_normal((32, 64)) * 2.0
    return acts.astype(np.float64), weights


@pytest.fixture
def calm_layer():
    """(X, W) with small, evenly spread activations; J < 1 after smoothing."""
    acts = make_rng(21).standard_normal((4, 16, 64)) * 0.1
    weights = make_rng(22).standard_normal((32, 64)) * 0.05
    return acts, weights


@pytest.fixture
def fast_config():
    """Default config with a small clip grid to keep tests quick."""
    return QuantConfig().with_overrides(
        clip_alpha={"start": 0.9, "stop": 1.0, "step": 0.05},
        clip_beta={"start": 0.9, "stop": 1.0, "step": 0.05},
        block_size=32,
    )


@pytest.fixture
def small_corpus(salient_layer, calm_layer):
    """Three layers, one of which matches the default skip list."""
    x_sal, w_sal = salient_layer
    x_calm, w_calm = calm_layer
    return [
        CorpusLayer("blocks.0.attn", w_sal.astype(np.float32), x_sal.astype(np.float32)),
        CorpusLayer("blocks.1.mlp", w_calm.astype(np.float32), x_calm.astype(np.float32)),
        CorpusLayer("proj_out", w_calm.astype(np.float32), x_calm.astype(np.float32)),
    ]

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vtn.decoder import DecoderConfig, init_weights  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return DecoderConfig(d_model=8, num_heads=2, num_blocks=2, seq_len=3, num_classes=5)


def perturbed_weights(cfg, seed, scale=0.1):
    """Random weights with non-zero biases (init leaves biases at zero)."""
    w = init_weights(cfg, seed=seed)
    r = np.random.default_rng(seed + 1)
    return w.map(lambda a: a + scale * r.standard_normal(a.shape))

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dynaseg import BackboneConfig, DynamicSegNet, default_registry


@pytest.fixture
def registry():
    return default_registry()


@pytest.fixture
def tiny_model(registry):
    torch.manual_seed(0)
    return DynamicSegNet(
        BackboneConfig(channel_ladder=(16, 32), groupnorm_groups=8), registry
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

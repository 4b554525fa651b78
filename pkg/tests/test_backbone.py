import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynaseg.backbone import (
    BackboneConfig,
    ResUNetBackbone,
    count_parameters,
)
from dynaseg.errors import ConfigError, NumericError, ShapeError

from oracles import backbone_param_count, conv_param_count

# Closed-form parameter count of the default backbone, frozen as a regression
# constant after checking it against the per-layer summation oracle.
DEFAULT_BACKBONE_PARAM_COUNT = 2_736_616


def test_default_shape_contract():
    torch.manual_seed(0)
    net = ResUNetBackbone(BackboneConfig())
    feats = net(torch.rand(2, 3, 256, 256))
    assert tuple(feats.bottleneck.shape) == (2, 256, 32, 32)
    assert tuple(feats.decoder_output.shape) == (2, 8, 256, 256)


def test_tiny_ladder_shape_contract():
    torch.manual_seed(0)
    net = ResUNetBackbone(BackboneConfig(channel_ladder=(16, 32, 64)))
    feats = net(torch.rand(1, 3, 64, 64))
    assert tuple(feats.bottleneck.shape) == (1, 64, 16, 16)
    assert tuple(feats.decoder_output.shape) == (1, 8, 64, 64)


def test_zero_input_is_finite():
    torch.manual_seed(0)
    net = ResUNetBackbone(BackboneConfig(channel_ladder=(16, 32)))
    feats = net(torch.zeros(1, 3, 32, 32))
    assert torch.isfinite(feats.bottleneck).all()
    assert torch.isfinite(feats.decoder_output).all()


def test_indivisible_size_rejected():
    net = ResUNetBackbone(BackboneConfig(channel_ladder=(16, 32, 64)))
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 66, 64))


def test_non_finite_input_rejected():
    net = ResUNetBackbone(BackboneConfig(channel_ladder=(16, 32)))
    bad = torch.rand(1, 3, 32, 32)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        net(bad)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(channel_ladder=(12, 24), groupnorm_groups=8)  # 12 % 8 != 0
    with pytest.raises(ConfigError):
        BackboneConfig(channel_ladder=(32,))
    with pytest.raises(ConfigError):
        BackboneConfig(decoder_out_channels=4)


@settings(max_examples=12, deadline=None)
@given(
    levels=st.integers(min_value=2, max_value=3),
    batch=st.integers(min_value=1, max_value=3),
    mult=st.integers(min_value=1, max_value=3),
)
def test_shape_contract_property(levels, batch, mult):
    ladder = tuple(8 * 2**i for i in range(levels))
    div = 2 ** (levels - 1)
    size = div * mult * 2
    net = ResUNetBackbone(BackboneConfig(channel_ladder=ladder, groupnorm_groups=8))
    feats = net(torch.rand(batch, 3, size, size))
    assert tuple(feats.bottleneck.shape) == (batch, ladder[-1], size // div, size // div)
    assert tuple(feats.decoder_output.shape) == (batch, 8, size, size)


def test_forward_is_deterministic():
    torch.manual_seed(3)
    net = ResUNetBackbone(BackboneConfig(channel_ladder=(16, 32)))
    x = torch.rand(2, 3, 32, 32)
    a = net(x)
    b = net(x)
    assert torch.equal(a.bottleneck, b.bottleneck)
    assert torch.equal(a.decoder_output, b.decoder_output)


def test_per_sample_independence():
    # group normalization is per-sample, so other batch entries cannot leak
    torch.manual_seed(4)
    net = ResUNetBackbone(BackboneConfig(channel_ladder=(16, 32)))
    x1 = torch.rand(2, 3, 32, 32)
    x2 = x1.clone()
    x2[1] = torch.rand(3, 32, 32)
    out1 = net(x1).decoder_output[0]
    out2 = net(x2).decoder_output[0]
    assert torch.equal(out1, out2)


def test_single_conv_count_example():
    conv = torch.nn.Conv2d(3, 32, 3, padding=1)
    assert count_parameters(conv) == 3 * 32 * 9 + 32 == 896
    assert conv_param_count(3, 3, 32) == 896


def test_default_backbone_count_matches_oracle_and_frozen_constant():
    net = ResUNetBackbone(BackboneConfig())
    oracle = backbone_param_count(3, (32, 64, 128, 256), 8)
    assert count_parameters(net) == oracle == DEFAULT_BACKBONE_PARAM_COUNT


def test_tiny_backbone_count_matches_oracle():
    ladder = (4, 8)
    net = ResUNetBackbone(BackboneConfig(channel_ladder=ladder, groupnorm_groups=2))
    assert count_parameters(net) == backbone_param_count(3, ladder, 8)

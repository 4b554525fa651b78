import numpy as np
import pytest
import torch

from dynaseg.dynamic_head import (
    OMEGA_SIZE,
    ClassAwareController,
    ControllerConfig,
    DynamicHeadParams,
    apply_dynamic_head,
    apply_dynamic_head_from_omega,
    fuse_and_control,
    global_average_pool,
    partition_head_params,
)
from dynaseg.errors import ConfigError, ShapeError
from dynaseg.registry import encode_class

from oracles import head_forward_per_pixel


# ---------------------------------------------------------------------------
# global average pooling
# ---------------------------------------------------------------------------

def test_gap_constant_tensor():
    x = torch.full((2, 3, 4, 4), 2.5)
    assert torch.equal(global_average_pool(x), torch.full((2, 3), 2.5))


def test_gap_hand_value():
    x = torch.tensor([[[[1.0, 2.0], [3.0, 5.0]]]])
    assert global_average_pool(x).item() == pytest.approx(2.75)


def test_gap_zeros():
    assert global_average_pool(torch.zeros(1, 4, 3, 3)).abs().sum() == 0


def test_gap_rejects_bad_rank():
    with pytest.raises(ShapeError):
        global_average_pool(torch.zeros(3, 4))


# ---------------------------------------------------------------------------
# controller fusion
# ---------------------------------------------------------------------------

def test_controller_config_is_pinned_to_162():
    cfg = ControllerConfig(bottleneck_channels=256, num_classes=6)
    assert cfg.in_dim == 262
    assert cfg.out_dim == 162
    with pytest.raises(ConfigError):
        ControllerConfig(bottleneck_channels=256, num_classes=6, out_dim=161)


def test_fuse_zero_weights_gives_zero_omega():
    controller = ClassAwareController(ControllerConfig(8, 6))
    with torch.no_grad():
        controller.conv.weight.zero_()
        controller.conv.bias.zero_()
    pooled = torch.rand(3, 8)
    omega = fuse_and_control(pooled, encode_class(2, 6), controller)
    assert omega.shape == (3, OMEGA_SIZE)
    assert omega.abs().sum() == 0


def test_fuse_selector_weights_pick_fused_entries():
    # with C_b + m = 166 >= 162, row j of a selector matrix reads fused[j]
    c_b, m = 160, 6
    controller = ClassAwareController(ControllerConfig(c_b, m))
    with torch.no_grad():
        controller.conv.weight.zero_()
        controller.conv.bias.zero_()
        for j in range(OMEGA_SIZE):
            controller.conv.weight[j, j, 0, 0] = 1.0
    pooled = torch.rand(2, c_b)
    class_vec = encode_class(3, m)
    omega = fuse_and_control(pooled, class_vec, controller)
    fused = torch.cat(
        [pooled, torch.as_tensor(class_vec.values)[None].expand(2, -1)], dim=1
    )
    assert torch.allclose(omega, fused[:, :OMEGA_SIZE])


def test_fuse_class_sensitivity_with_random_weights():
    torch.manual_seed(0)
    controller = ClassAwareController(ControllerConfig(8, 6))
    pooled = torch.rand(1, 8)
    omega_a = fuse_and_control(pooled, encode_class(1, 6), controller)
    omega_b = fuse_and_control(pooled, encode_class(2, 6), controller)
    assert (omega_a - omega_b).norm() > 0


def test_fuse_rejects_wrong_m():
    controller = ClassAwareController(ControllerConfig(8, 6))
    with pytest.raises(ShapeError):
        fuse_and_control(torch.rand(1, 8), encode_class(2, 4), controller)
    with pytest.raises(ShapeError):
        controller(torch.rand(1, 9), torch.zeros(1, 6))


# ---------------------------------------------------------------------------
# omega partition
# ---------------------------------------------------------------------------

def test_partition_layout_with_ascending_integers():
    omega = torch.arange(162.0)
    p = partition_head_params(omega)
    assert p.w1.flatten().tolist() == list(range(0, 64))
    assert p.b1.tolist() == list(range(64, 72))
    assert p.w2.flatten().tolist() == list(range(72, 136))
    assert p.b2.tolist() == list(range(136, 144))
    assert p.w3.flatten().tolist() == list(range(144, 160))
    assert p.b3.tolist() == list(range(160, 162))
    assert p.w1.shape == (8, 8, 1, 1)
    assert p.w3.shape == (2, 8, 1, 1)


@pytest.mark.parametrize("length", [161, 163, 0, 324])
def test_partition_rejects_wrong_lengths(length):
    with pytest.raises(ShapeError):
        partition_head_params(torch.zeros(length))


def test_partition_zero_passthrough_and_count():
    p = partition_head_params(torch.zeros(162))
    assert p.numel() == 162
    for t in (p.w1, p.b1, p.w2, p.b2, p.w3, p.b3):
        assert t.abs().sum() == 0


def test_head_params_count_is_162_by_construction():
    torch.manual_seed(0)
    p = partition_head_params(torch.randn(162))
    assert p.numel() == 72 + 72 + 18 == 162


# ---------------------------------------------------------------------------
# dynamic head application
# ---------------------------------------------------------------------------

def test_zero_params_give_uniform_probabilities():
    p = partition_head_params(torch.zeros(162))
    m = torch.rand(2, 8, 5, 5)
    pred = apply_dynamic_head(m, [p, p])
    assert pred.logits.abs().sum() == 0
    assert torch.allclose(pred.probabilities, torch.full_like(pred.probabilities, 0.5))


def test_identity_chain_on_single_pixel():
    # identity w1/w2, w3 selecting channels 0 and 1: channel 0 carries 3
    # through the ReLU chain, channel 1's -1 is clipped to 0
    omega = torch.zeros(162)
    p = partition_head_params(omega)
    with torch.no_grad():
        for i in range(8):
            p.w1[i, i, 0, 0] = 1.0
            p.w2[i, i, 0, 0] = 1.0
        p.w3[0, 0, 0, 0] = 1.0
        p.w3[1, 1, 0, 0] = 1.0
    m = torch.zeros(1, 8, 1, 1)
    m[0, 0] = 3.0
    m[0, 1] = -1.0
    pred = apply_dynamic_head(m, [p])
    assert pred.logits[0, :, 0, 0].tolist() == [3.0, 0.0]


def test_per_sample_isolation():
    torch.manual_seed(1)
    params = [partition_head_params(torch.randn(162)) for _ in range(2)]
    m = torch.rand(1, 8, 4, 4).expand(2, 8, 4, 4)
    pred = apply_dynamic_head(m, params)
    assert not torch.allclose(pred.logits[0], pred.logits[1])


def test_wrong_param_count_rejected():
    p = partition_head_params(torch.zeros(162))
    with pytest.raises(ShapeError):
        apply_dynamic_head(torch.rand(3, 8, 2, 2), [p, p])


def test_head_matches_per_pixel_oracle():
    torch.manual_seed(7)
    for _ in range(20):
        m = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        omegas = torch.randn(2, 162, dtype=torch.float64)
        params = [partition_head_params(o) for o in omegas]
        pred = apply_dynamic_head(m, params)
        expected = head_forward_per_pixel(m.numpy(), params)
        np.testing.assert_allclose(pred.logits.numpy(), expected, atol=1e-6)


def test_grouped_path_matches_loop_path():
    torch.manual_seed(8)
    m = torch.randn(3, 8, 6, 6)
    omegas = torch.randn(3, 162)
    loop = apply_dynamic_head(m, [partition_head_params(o) for o in omegas])
    grouped = apply_dynamic_head_from_omega(m, omegas)
    assert torch.allclose(loop.logits, grouped.logits, atol=1e-6)


def test_probabilities_sum_to_one():
    torch.manual_seed(9)
    pred = apply_dynamic_head_from_omega(torch.randn(2, 8, 4, 4), torch.randn(2, 162))
    sums = pred.probabilities.sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

"""Class-conditioned dynamic segmentation head.

The pooled bottleneck feature is fused with a one-hot class vector and a
single 1x1 convolutional controller maps the fusion to 162 values. Those 162
values are the complete parameter set of a three-layer 1x1-conv head
(8 -> 8 -> 8 -> 2, with biases) applied per sample to the decoder output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .registry import ClassVector

# Head layout: two 8-channel 1x1 layers then a 2-channel 1x1 layer.
HEAD_CHANNELS = 8
HEAD_OUT_CHANNELS = 2
# (8*8 + 8) + (8*8 + 8) + (8*2 + 2)
OMEGA_SIZE = 162

# Flat parameter layout: [w1 | b1 | w2 | b2 | w3 | b3].
_SPLIT_SIZES = (
    HEAD_CHANNELS * HEAD_CHANNELS,
    HEAD_CHANNELS,
    HEAD_CHANNELS * HEAD_CHANNELS,
    HEAD_CHANNELS,
    HEAD_OUT_CHANNELS * HEAD_CHANNELS,
    HEAD_OUT_CHANNELS,
)


@dataclass
class ControllerConfig:
    bottleneck_channels: int
    num_classes: int
    out_dim: int = OMEGA_SIZE

    def __post_init__(self):
        if self.out_dim != OMEGA_SIZE:
            raise ConfigError(f"controller out_dim is fixed at {OMEGA_SIZE}")
        if self.bottleneck_channels < 1 or self.num_classes < 1:
            raise ConfigError("bottleneck_channels and num_classes must be >= 1")

    @property
    def in_dim(self) -> int:
        return self.bottleneck_channels + self.num_classes


@dataclass
class DynamicHeadParams:
    """The 162 controller outputs partitioned into three conv layers."""

    w1: torch.Tensor  # 8 x 8 x 1 x 1
    b1: torch.Tensor  # 8
    w2: torch.Tensor  # 8 x 8 x 1 x 1
    b2: torch.Tensor  # 8
    w3: torch.Tensor  # 2 x 8 x 1 x 1
    b3: torch.Tensor  # 2

    def numel(self) -> int:
        return sum(
            t.numel() for t in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)
        )


@dataclass
class Prediction:
    """Two-channel logits and their softmax probabilities."""

    logits: torch.Tensor  # N x 2 x H x W
    probabilities: torch.Tensor  # N x 2 x H x W

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "Prediction":
        return cls(logits=logits, probabilities=torch.softmax(logits, dim=1))

    @property
    def foreground(self) -> torch.Tensor:
        return self.probabilities[:, 1]


def global_average_pool(feature: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: N x C x h x w -> N x C."""
    if feature.ndim != 4:
        raise ShapeError(f"expected N x C x h x w, got {tuple(feature.shape)}")
    if feature.shape[2] < 1 or feature.shape[3] < 1:
        raise ShapeError("spatial grid must be at least 1x1")
    return feature.mean(dim=(2, 3))


class ClassAwareController(nn.Module):
    """Single 1x1 conv mapping (pooled feature || class one-hot) to 162 values."""

    def __init__(self, config: ControllerConfig):
        super().__init__()
        self.config = config
        self.conv = nn.Conv2d(config.in_dim, config.out_dim, kernel_size=1)
        # Small-std init: the outputs ARE the head's weights, and the head
        # chains three of them multiplicatively, so fan-in scaling explodes.
        nn.init.normal_(self.conv.weight, std=0.01)
        nn.init.zeros_(self.conv.bias)

    def forward(self, pooled: torch.Tensor, class_matrix: torch.Tensor) -> torch.Tensor:
        """pooled: N x C_b, class_matrix: N x m -> omega: N x 162."""
        if pooled.ndim != 2 or pooled.shape[1] != self.config.bottleneck_channels:
            raise ShapeError(
                f"pooled feature must be N x {self.config.bottleneck_channels}, "
                f"got {tuple(pooled.shape)}"
            )
        if class_matrix.shape != (pooled.shape[0], self.config.num_classes):
            raise ShapeError(
                f"class matrix must be {pooled.shape[0]} x "
                f"{self.config.num_classes}, got {tuple(class_matrix.shape)}"
            )
        fused = torch.cat([pooled, class_matrix.to(pooled.dtype)], dim=1)
        return self.conv(fused[:, :, None, None])[:, :, 0, 0]


def fuse_and_control(
    pooled: torch.Tensor,
    class_vec: ClassVector,
    controller: ClassAwareController,
) -> torch.Tensor:
    """Broadcast one class vector across the batch and run the controller."""
    values = torch.as_tensor(
        np.asarray(class_vec.values), dtype=pooled.dtype, device=pooled.device
    )
    if values.numel() != controller.config.num_classes:
        raise ShapeError(
            f"class vector length {values.numel()} != m={controller.config.num_classes}"
        )
    class_matrix = values[None, :].expand(pooled.shape[0], -1)
    return controller(pooled, class_matrix)


def partition_head_params(omega: torch.Tensor) -> DynamicHeadParams:
    """Split a flat 162-vector into the three head layers (weights then bias)."""
    omega = torch.as_tensor(omega)
    if omega.ndim != 1 or omega.numel() != OMEGA_SIZE:
        raise ShapeError(f"omega must be a flat vector of {OMEGA_SIZE} values, "
                         f"got shape {tuple(omega.shape)}")
    w1, b1, w2, b2, w3, b3 = torch.split(omega, _SPLIT_SIZES)
    return DynamicHeadParams(
        w1=w1.reshape(HEAD_CHANNELS, HEAD_CHANNELS, 1, 1),
        b1=b1,
        w2=w2.reshape(HEAD_CHANNELS, HEAD_CHANNELS, 1, 1),
        b2=b2,
        w3=w3.reshape(HEAD_OUT_CHANNELS, HEAD_CHANNELS, 1, 1),
        b3=b3,
    )


def apply_dynamic_head(
    decoder_output: torch.Tensor,
    params: Sequence[DynamicHeadParams],
) -> Prediction:
    """Run the per-sample three-layer head on an N x 8 x H x W decoder map.

    Sample n sees only its own parameter set: ReLU after the first two layers,
    raw logits from the third, probabilities via 2-way softmax.
    """
    if decoder_output.ndim != 4 or decoder_output.shape[1] != HEAD_CHANNELS:
        raise ShapeError(
            f"decoder output must be N x {HEAD_CHANNELS} x H x W, "
            f"got {tuple(decoder_output.shape)}"
        )
    if len(params) != decoder_output.shape[0]:
        raise ShapeError(
            f"got {len(params)} parameter sets for a batch of "
            f"{decoder_output.shape[0]}"
        )
    logits = []
    for n, p in enumerate(params):
        x = decoder_output[n : n + 1]
        x = F.relu(F.conv2d(x, p.w1, p.b1))
        x = F.relu(F.conv2d(x, p.w2, p.b2))
        logits.append(F.conv2d(x, p.w3, p.b3))
    return Prediction.from_logits(torch.cat(logits, dim=0))


def apply_dynamic_head_from_omega(
    decoder_output: torch.Tensor, omega: torch.Tensor
) -> Prediction:
    """Vectorized head application from the raw controller output N x 162.

    Equivalent to partitioning each row and calling `apply_dynamic_head`;
    implemented as one grouped convolution per layer so training batches do
    not pay a per-sample Python loop.
    """
    n = decoder_output.shape[0]
    if omega.shape != (n, OMEGA_SIZE):
        raise ShapeError(
            f"omega must be {n} x {OMEGA_SIZE}, got {tuple(omega.shape)}"
        )
    w1, b1, w2, b2, w3, b3 = torch.split(omega, _SPLIT_SIZES, dim=1)

    x = decoder_output.reshape(1, n * HEAD_CHANNELS, *decoder_output.shape[2:])
    x = F.relu(
        F.conv2d(
            x,
            w1.reshape(n * HEAD_CHANNELS, HEAD_CHANNELS, 1, 1),
            b1.reshape(n * HEAD_CHANNELS),
            groups=n,
        )
    )
    x = F.relu(
        F.conv2d(
            x,
            w2.reshape(n * HEAD_CHANNELS, HEAD_CHANNELS, 1, 1),
            b2.reshape(n * HEAD_CHANNELS),
            groups=n,
        )
    )
    x = F.conv2d(
        x,
        w3.reshape(n * HEAD_OUT_CHANNELS, HEAD_CHANNELS, 1, 1),
        b3.reshape(n * HEAD_OUT_CHANNELS),
        groups=n,
    )
    logits = x.reshape(n, HEAD_OUT_CHANNELS, *decoder_output.shape[2:])
    return Prediction.from_logits(logits)

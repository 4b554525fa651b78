"""Shared 2D residual U-Net backbone.

Maps an RGB patch to (a) the bottleneck feature consumed by the class-aware
controller and (b) an 8-channel decoder map consumed by the dynamic head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError

# Decoder output width is pinned by the 162-parameter dynamic head.
DECODER_OUT_CHANNELS = 8


@dataclass
class BackboneConfig:
    in_channels: int = 3
    channel_ladder: Tuple[int, ...] = (32, 64, 128, 256)
    groupnorm_groups: int = 8
    decoder_out_channels: int = DECODER_OUT_CHANNELS

    def __post_init__(self):
        self.channel_ladder = tuple(int(c) for c in self.channel_ladder)
        if len(self.channel_ladder) < 2:
            raise ConfigError("channel_ladder needs at least two levels")
        if self.decoder_out_channels != DECODER_OUT_CHANNELS:
            raise ConfigError(
                f"decoder_out_channels is fixed at {DECODER_OUT_CHANNELS}"
            )
        if self.groupnorm_groups < 1:
            raise ConfigError("groupnorm_groups must be positive")
        for width in self.channel_ladder:
            if width % self.groupnorm_groups != 0:
                raise ConfigError(
                    f"ladder width {width} not divisible by "
                    f"{self.groupnorm_groups} groupnorm groups"
                )

    @property
    def levels(self) -> int:
        return len(self.channel_ladder)

    @property
    def bottleneck_channels(self) -> int:
        return self.channel_ladder[-1]

    @property
    def spatial_divisor(self) -> int:
        """Input height/width must be divisible by this."""
        return 2 ** (self.levels - 1)


@dataclass
class BackboneFeatures:
    """Bottleneck feature (pre-pooling) and the 8-channel decoder output."""

    bottleneck: torch.Tensor  # N x C_b x h x w
    decoder_output: torch.Tensor  # N x 8 x H x W


class ResidualBlock(nn.Module):
    """Pre-activation residual block: (GN -> ReLU -> 3x3 conv) x 2."""

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return h + self.shortcut(x)


class UpsampleConv(nn.Module):
    """Nearest-neighbor x2 upsampling followed by a channel-halving 3x3 conv."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ResUNetBackbone(nn.Module):
    """Residual U-Net with stride-2 downsampling and summed skip connections.

    Encoder stage i halves the spatial size with a stride-2 3x3 conv and widens
    to channel_ladder[i]; the decoder mirrors it, summing each upsampled map
    with the matching encoder feature before a residual block. A final 3x3
    conv refines the full-resolution map to exactly 8 channels.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        ladder = config.channel_ladder
        groups = config.groupnorm_groups

        self.stem = nn.Conv2d(config.in_channels, ladder[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(
            [ResidualBlock(ladder[0], ladder[0], groups)]
        )
        self.downs = nn.ModuleList()
        for i in range(1, len(ladder)):
            self.downs.append(nn.Conv2d(ladder[i - 1], ladder[i], 3, stride=2, padding=1))
            self.enc_blocks.append(ResidualBlock(ladder[i], ladder[i], groups))

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(len(ladder) - 1, 0, -1):
            self.ups.append(UpsampleConv(ladder[i], ladder[i - 1]))
            self.dec_blocks.append(ResidualBlock(ladder[i - 1], ladder[i - 1], groups))

        # Final activations for both consumers of the residual trunk, as in
        # pre-activation ResNets. Keeping the exposed bottleneck and decoder
        # map at unit scale is what lets the controller/dynamic-head loop
        # train stably.
        self.bottleneck_norm = nn.GroupNorm(groups, ladder[-1])
        self.out_norm = nn.GroupNorm(groups, ladder[0])
        self.out_conv = nn.Conv2d(ladder[0], config.decoder_out_channels, 3, padding=1)
        self.apply(_init_weights)

    def forward(self, images: torch.Tensor) -> BackboneFeatures:
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected N x {self.config.in_channels} x H x W input, "
                f"got {tuple(images.shape)}"
            )
        n, _, h, w = images.shape
        div = self.config.spatial_divisor
        if h % div or w % div:
            raise ShapeError(f"input size {h}x{w} not divisible by {div}")
        if not torch.isfinite(images).all():
            raise NumericError("non-finite values in backbone input")

        skips = []
        x = self.enc_blocks[0](self.stem(images))
        skips.append(x)
        for down, block in zip(self.downs, self.enc_blocks[1:]):
            x = block(down(x))
            skips.append(x)

        bottleneck = F.relu(self.bottleneck_norm(x))
        for j, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            skip = skips[len(skips) - 2 - j]
            x = block(up(x) + skip)

        decoder_output = self.out_conv(F.relu(self.out_norm(x)))
        return BackboneFeatures(bottleneck=bottleneck, decoder_output=decoder_output)


def _init_weights(module: nn.Module):
    # Kaiming fan-in for convs, zero biases, unit/zero normalization affines.
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.GroupNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def count_parameters(params) -> int:
    """Exact number of scalar values in a module or parameter collection."""
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters())
    if hasattr(params, "numel") and not isinstance(params, torch.Tensor):
        return int(params.numel())
    if isinstance(params, torch.Tensor):
        return params.numel()
    return sum(p.numel() for p in params)

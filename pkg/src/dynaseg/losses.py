"""Compound training loss: batch-joint Dice plus boundary-weighted cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F

from .dynamic_head import Prediction
from .errors import ConfigError, InvalidMask, ShapeError


@dataclass
class LossConfig:
    boundary_weight: float = 1.2
    dice_epsilon: float = 1e-5
    dice_ce_mix: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.boundary_weight < 1.0:
            raise ConfigError("boundary_weight must be >= 1")
        if self.dice_epsilon <= 0:
            raise ConfigError("dice_epsilon must be > 0")
        self.dice_ce_mix = (float(self.dice_ce_mix[0]), float(self.dice_ce_mix[1]))


def _check_binary(mask: torch.Tensor) -> torch.Tensor:
    mask = torch.as_tensor(mask)
    if not torch.all((mask == 0) | (mask == 1)):
        raise InvalidMask("mask entries must be 0 or 1")
    return mask


def boundary_weight_map(mask: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Per-pixel weights: `boundary_weight` on the morphological gradient.

    Boundary pixels are those where the 3x3 dilation and 3x3 erosion of the
    mask disagree; outside the image counts as background, so the rim of a
    mask touching the border is itself boundary.
    """
    mask = _check_binary(mask).float()
    if mask.ndim == 2:
        mask = mask[None]
        squeeze = True
    elif mask.ndim == 3:
        squeeze = False
    else:
        raise ShapeError(f"mask must be H x W or N x H x W, got {tuple(mask.shape)}")

    padded = F.pad(mask[:, None], (1, 1, 1, 1), value=0.0)
    dilation = F.max_pool2d(padded, 3, stride=1)
    erosion = -F.max_pool2d(-padded, 3, stride=1)
    boundary = (dilation != erosion)[:, 0]

    weights = torch.where(
        boundary,
        torch.as_tensor(config.boundary_weight, dtype=mask.dtype, device=mask.device),
        torch.as_tensor(1.0, dtype=mask.dtype, device=mask.device),
    )
    return weights[0] if squeeze else weights


def dice_loss(
    probabilities: torch.Tensor, mask: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """1 - (2*sum(p_fg*y) + eps) / (sum(p_fg) + sum(y) + eps) over the batch."""
    mask = _check_binary(mask)
    if probabilities.ndim != 4 or probabilities.shape[1] != 2:
        raise ShapeError(
            f"probabilities must be N x 2 x H x W, got {tuple(probabilities.shape)}"
        )
    if mask.shape != (probabilities.shape[0], *probabilities.shape[2:]):
        raise ShapeError(
            f"mask shape {tuple(mask.shape)} does not match probabilities "
            f"{tuple(probabilities.shape)}"
        )
    p_fg = probabilities[:, 1]
    y = mask.to(p_fg.dtype)
    eps = config.dice_epsilon
    intersection = (p_fg * y).sum()
    return 1.0 - (2.0 * intersection + eps) / (p_fg.sum() + y.sum() + eps)


def weighted_cross_entropy(
    logits: torch.Tensor, mask: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Mean over pixels of weight * NLL of the true class under softmax(logits)."""
    mask = _check_binary(mask)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be N x 2 x H x W, got {tuple(logits.shape)}")
    expected = (logits.shape[0], *logits.shape[2:])
    if tuple(mask.shape) != expected or tuple(weights.shape) != expected:
        raise ShapeError(
            f"mask {tuple(mask.shape)} / weights {tuple(weights.shape)} must "
            f"both be {expected}"
        )
    log_probs = F.log_softmax(logits, dim=1)
    nll = -log_probs.gather(1, mask.long()[:, None])[:, 0]
    return (weights.to(nll.dtype) * nll).mean()


def total_loss(
    prediction: Prediction, mask: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """dice_ce_mix[0] * Dice + dice_ce_mix[1] * boundary-weighted cross-entropy."""
    weights = boundary_weight_map(mask, config)
    dice = dice_loss(prediction.probabilities, mask, config)
    ce = weighted_cross_entropy(prediction.logits, mask, weights)
    a, b = config.dice_ce_mix
    return a * dice + b * ce

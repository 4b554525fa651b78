"""Composite segmentation network and checkpoint archive handling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn

from .backbone import BackboneConfig, ResUNetBackbone, count_parameters
from .dynamic_head import (
    OMEGA_SIZE,
    ClassAwareController,
    ControllerConfig,
    Prediction,
    apply_dynamic_head_from_omega,
    global_average_pool,
)
from .errors import CheckpointError, InvalidClass, IoError
from .registry import Registry


class DynamicSegNet(nn.Module):
    """Backbone + class-aware controller + per-sample dynamic head.

    A single network: the requested class id only changes the 162 head
    parameters emitted by the controller, never the learned weights.
    """

    def __init__(self, backbone_config: BackboneConfig, registry: Registry):
        super().__init__()
        self.backbone = ResUNetBackbone(backbone_config)
        self.controller = ClassAwareController(
            ControllerConfig(
                bottleneck_channels=backbone_config.bottleneck_channels,
                num_classes=registry.m,
            )
        )
        self.num_classes = registry.m

    def forward(self, images: torch.Tensor, class_ids) -> Prediction:
        """Segment `images` as the given class(es).

        class_ids: an int applied to the whole batch, or a per-sample
        sequence/tensor of ints in [1, m].
        """
        feats = self.backbone(images)
        pooled = global_average_pool(feats.bottleneck)
        class_matrix = self._one_hot(class_ids, images.shape[0], images)
        omega = self.controller(pooled, class_matrix)
        return apply_dynamic_head_from_omega(feats.decoder_output, omega)

    def _one_hot(self, class_ids, batch: int, ref: torch.Tensor) -> torch.Tensor:
        if isinstance(class_ids, int):
            ids = torch.full((batch,), class_ids, dtype=torch.long)
        else:
            ids = torch.as_tensor(class_ids, dtype=torch.long)
        if ids.shape != (batch,):
            raise InvalidClass(f"need one class id per sample, got {ids.shape}")
        if ids.min() < 1 or ids.max() > self.num_classes:
            raise InvalidClass(
                f"class ids must lie in [1, {self.num_classes}], got "
                f"{sorted(set(ids.tolist()))}"
            )
        eye = torch.eye(self.num_classes, dtype=ref.dtype, device=ref.device)
        return eye[ids - 1]

    @torch.no_grad()
    def predict_foreground(self, images: torch.Tensor, class_ids) -> torch.Tensor:
        """Foreground probability maps (N x H x W), inference mode."""
        was_training = self.training
        self.eval()
        try:
            pred = self.forward(images, class_ids)
        finally:
            self.train(was_training)
        return pred.foreground


def parameter_breakdown(model: DynamicSegNet) -> dict:
    """Learned-parameter counts plus the m-independent-networks equivalent."""
    backbone = count_parameters(model.backbone)
    controller = count_parameters(model.controller)
    return {
        "backbone": backbone,
        "controller": controller,
        "dynamic_head": OMEGA_SIZE,
        "total": backbone + controller,
        "multi_network_equivalent": model.num_classes * backbone,
    }


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: Union[str, Path],
    model: DynamicSegNet,
    registry: Registry,
    extra: Optional[dict] = None,
) -> None:
    """Write all learnable tensors plus config and registry metadata."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "state_dict": model.state_dict(),
        "backbone_config": asdict(model.backbone.config),
        "registry": registry.to_config(),
        "extra": extra or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


@dataclass
class CheckpointBundle:
    model: DynamicSegNet
    registry: Registry
    backbone_config: BackboneConfig
    extra: dict


def load_checkpoint(
    path: Union[str, Path],
    expected_registry: Optional[Registry] = None,
    expected_backbone: Optional[BackboneConfig] = None,
) -> CheckpointBundle:
    """Rebuild the model from an archive, verifying compatibility if asked."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # unpicklable / truncated archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("state_dict", "backbone_config", "registry"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} missing field {key!r}")

    registry = Registry.from_config(payload["registry"])
    config = BackboneConfig(**payload["backbone_config"])

    if expected_registry is not None and expected_registry.m != registry.m:
        raise CheckpointError(
            f"checkpoint was trained for {registry.m} classes but the "
            f"configuration declares {expected_registry.m}"
        )
    if expected_backbone is not None and (
        tuple(expected_backbone.channel_ladder) != tuple(config.channel_ladder)
        or expected_backbone.in_channels != config.in_channels
    ):
        raise CheckpointError(
            f"checkpoint backbone {config.channel_ladder} incompatible with "
            f"configured {expected_backbone.channel_ladder}"
        )

    model = DynamicSegNet(config, registry)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the model: {exc}") from exc
    model.eval()
    return CheckpointBundle(
        model=model,
        registry=registry,
        backbone_config=config,
        extra=payload.get("extra", {}),
    )

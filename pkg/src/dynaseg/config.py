"""Run configuration: one JSON file validated with strict unknown-key rejection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .backbone import BackboneConfig
from .data import DEFAULT_STRUCTURE_SPECS, StructureSpec, SynthConfig
from .errors import ConfigError, DynasegError
from .losses import LossConfig
from .registry import Registry, default_registry
from .trainer import TrainConfig


def _take(section: dict, allowed, context: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"section {context!r} must be an object")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {context!r}: {', '.join(sorted(unknown))}"
        )
    return section


@dataclass
class DataSection:
    root: str = "corpus"
    patch_size: int = 256
    image_size: int = 512
    num_images_per_class: int = 20
    num_patients: int = 10
    target_per_class: int = 64
    eval_patches_per_image: int = 1
    split_ratio: Tuple[int, int, int] = (6, 1, 3)
    structures: Dict[str, StructureSpec] = field(
        default_factory=lambda: dict(DEFAULT_STRUCTURE_SPECS)
    )

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            num_images_per_class=self.num_images_per_class,
            image_size=self.image_size,
            patch_size=self.patch_size,
            seed=seed,
            num_patients=self.num_patients,
            structures=self.structures,
        )


@dataclass
class MetricsSection:
    foreground_threshold: float = 0.5


@dataclass
class AggregateSection:
    stride: int = 256
    tile_size: int = 256
    threshold: float = 0.5


@dataclass
class RunConfig:
    registry: Registry
    backbone: BackboneConfig
    loss: LossConfig
    train: TrainConfig
    data: DataSection
    metrics: MetricsSection
    aggregate: AggregateSection
    seed: int = 0
    deterministic: bool = False


_TOP_KEYS = ("classes", "backbone", "loss", "train", "data", "metrics",
             "aggregate", "seed", "deterministic")


def _parse_structures(raw: dict, context: str) -> Dict[str, StructureSpec]:
    structures = dict(DEFAULT_STRUCTURE_SPECS)
    for name, body in raw.items():
        fields = _take(
            body,
            ("shape", "size_range", "count_range", "color", "texture_amplitude"),
            f"{context}.{name}",
        )
        base = structures.get(name)
        structures[name] = StructureSpec(
            shape=fields.get("shape", base.shape if base else "filled_ellipse"),
            size_range=tuple(fields.get("size_range",
                                        base.size_range if base else (0.1, 0.2))),
            count_range=tuple(fields.get("count_range",
                                         base.count_range if base else (1, 3))),
            color=tuple(fields.get("color", base.color if base else (0.5, 0.5, 0.5))),
            texture_amplitude=float(
                fields.get("texture_amplitude",
                           base.texture_amplitude if base else 0.05)
            ),
        )
    return structures


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a parsed JSON object into a RunConfig."""
    raw = _take(raw, _TOP_KEYS, "<top level>")

    if "classes" in raw:
        try:
            registry = Registry.from_config(raw["classes"])
        except DynasegError as exc:
            raise ConfigError(f"invalid 'classes' section: {exc}") from exc
    else:
        registry = default_registry()

    try:
        backbone = BackboneConfig(
            **_take(raw.get("backbone", {}),
                    ("in_channels", "channel_ladder", "groupnorm_groups",
                     "decoder_out_channels"),
                    "backbone")
        )
        loss = LossConfig(
            **_take(raw.get("loss", {}),
                    ("boundary_weight", "dice_epsilon", "dice_ce_mix"), "loss")
        )
        train_fields = _take(
            raw.get("train", {}),
            ("batch_size", "lr", "lr_decay", "epochs", "augment_probability",
             "pool_capacity"),
            "train",
        )
        train = TrainConfig(seed=int(raw.get("seed", 0)), **train_fields)
    except DynasegError as exc:
        raise ConfigError(str(exc)) from exc

    data_fields = dict(
        _take(raw.get("data", {}),
              ("root", "patch_size", "image_size", "num_images_per_class",
               "num_patients", "target_per_class", "eval_patches_per_image",
               "split_ratio", "structures"),
              "data")
    )
    if "structures" in data_fields:
        data_fields["structures"] = _parse_structures(
            data_fields["structures"], "data.structures"
        )
    if "split_ratio" in data_fields:
        data_fields["split_ratio"] = tuple(data_fields["split_ratio"])
    data = DataSection(**data_fields)
    if base_dir is not None and not Path(data.root).is_absolute():
        data = DataSection(**{**data.__dict__, "root": str(base_dir / data.root)})

    metrics = MetricsSection(
        **_take(raw.get("metrics", {}), ("foreground_threshold",), "metrics")
    )
    aggregate = AggregateSection(
        **_take(raw.get("aggregate", {}), ("stride", "tile_size", "threshold"),
                "aggregate")
    )

    return RunConfig(
        registry=registry,
        backbone=backbone,
        loss=loss,
        train=train,
        data=data,
        metrics=metrics,
        aggregate=aggregate,
        seed=int(raw.get("seed", 0)),
        deterministic=bool(raw.get("deterministic", False)),
    )


def load_config(path) -> RunConfig:
    """Read and validate the JSON run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return parse_config(raw, base_dir=path.parent)

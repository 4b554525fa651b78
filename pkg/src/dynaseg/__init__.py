"""Single-network multi-tissue segmentation with a class-conditioned dynamic head."""

from .backbone import BackboneConfig, BackboneFeatures, ResUNetBackbone, count_parameters
from .dynamic_head import (
    OMEGA_SIZE,
    ClassAwareController,
    ControllerConfig,
    DynamicHeadParams,
    Prediction,
    apply_dynamic_head,
    apply_dynamic_head_from_omega,
    fuse_and_control,
    global_average_pool,
    partition_head_params,
)
from .model import DynamicSegNet, load_checkpoint, parameter_breakdown, save_checkpoint
from .registry import (
    ClassVector,
    Registry,
    TissueClass,
    default_registry,
    encode_class,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "BackboneFeatures",
    "ClassAwareController",
    "ClassVector",
    "ControllerConfig",
    "DynamicHeadParams",
    "DynamicSegNet",
    "OMEGA_SIZE",
    "Prediction",
    "Registry",
    "ResUNetBackbone",
    "TissueClass",
    "apply_dynamic_head",
    "apply_dynamic_head_from_omega",
    "count_parameters",
    "default_registry",
    "encode_class",
    "fuse_and_control",
    "global_average_pool",
    "load_checkpoint",
    "parameter_breakdown",
    "partition_head_params",
    "save_checkpoint",
]

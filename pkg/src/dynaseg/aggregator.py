"""Test-time aggregation: per-class tiled inference merged into one label map.

Each class is segmented at its own working scale with sliding 2D tiles, the
foreground probabilities are averaged where tiles overlap and mapped back to
native resolution, and the per-class maps are merged pixel-wise into a single
complete label map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInput, InvalidLabel, ShapeError, UnknownTissue
from .registry import Registry, TissueClass

DEFAULT_TILE_SIZE = 256
DEFAULT_THRESHOLD = 0.5

# Deterministic per-class overlay colors (RGB in [0,1]); index = class id.
PALETTE: Tuple[Tuple[float, float, float], ...] = (
    (0.0, 0.0, 0.0),  # background, unused in blending
    (0.60, 0.20, 0.70),
    (1.00, 0.55, 0.10),
    (0.15, 0.70, 0.25),
    (0.15, 0.35, 0.90),
    (0.90, 0.15, 0.20),
    (0.05, 0.75, 0.75),
    (0.85, 0.85, 0.20),
    (0.55, 0.35, 0.15),
)


@dataclass
class ClassProbabilityMap:
    class_id: int
    probabilities: np.ndarray  # H0 x W0 float32 in [0, 1], native resolution


@dataclass
class CompleteLabelMap:
    labels: np.ndarray  # H0 x W0 integer, 0 = background


def tile_positions(size: int, window: int, stride: int) -> List[int]:
    """Start offsets covering [0, size) with a final border-aligned tile."""
    if window > size:
        raise ShapeError(f"window {window} larger than image extent {size}")
    positions = list(range(0, size - window + 1, stride))
    if positions[-1] != size - window:
        positions.append(size - window)
    return positions


def segment_class(
    image: np.ndarray,
    tissue: TissueClass,
    model,
    tile_stride: int = DEFAULT_TILE_SIZE,
    tile_size: int = DEFAULT_TILE_SIZE,
    batch_size: int = 8,
) -> ClassProbabilityMap:
    """Class-conditioned sliding-window inference at the class's scale.

    The image (3 x H0 x W0, values in [0,1]) is downsampled by the class's
    factor, tiled, and the averaged foreground probabilities are upsampled
    back to native resolution with bilinear interpolation.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be 3 x H x W, got {image.shape}")
    h0, w0 = image.shape[1:]
    factor = tissue.downsample_factor
    t = torch.as_tensor(image, dtype=torch.float32)[None]
    if factor > 1:
        t = F.interpolate(t, size=(h0 // factor, w0 // factor), mode="area")
    _, _, h, w = t.shape
    if h < tile_size or w < tile_size:
        raise ShapeError(
            f"image {h}x{w} at the {tissue.name} working scale is smaller than "
            f"one {tile_size}-pixel tile"
        )

    tops = tile_positions(h, tile_size, tile_stride)
    lefts = tile_positions(w, tile_size, tile_stride)
    prob_sum = torch.zeros(h, w)
    cover = torch.zeros(h, w)

    coords = [(top, left) for top in tops for left in lefts]
    for start in range(0, len(coords), batch_size):
        chunk = coords[start : start + batch_size]
        tiles = torch.cat(
            [t[:, :, top : top + tile_size, left : left + tile_size]
             for top, left in chunk]
        )
        fg = model.predict_foreground(tiles, tissue.id)
        for (top, left), tile_fg in zip(chunk, fg):
            prob_sum[top : top + tile_size, left : left + tile_size] += tile_fg
            cover[top : top + tile_size, left : left + tile_size] += 1.0

    averaged = prob_sum / cover
    native = F.interpolate(
        averaged[None, None], size=(h0, w0), mode="bilinear", align_corners=False
    )[0, 0]
    return ClassProbabilityMap(
        class_id=tissue.id,
        probabilities=native.clamp(0.0, 1.0).numpy().astype(np.float32),
    )


def merge_labels(
    maps: Sequence[ClassProbabilityMap],
    registry: Registry,
    threshold: float = DEFAULT_THRESHOLD,
) -> CompleteLabelMap:
    """Pixel-wise merge of per-class foreground decisions.

    No class above threshold -> background; exactly one -> that class; the
    exact pair {TUFT, CAP} -> TUFT; any other multi-class tie -> background.
    """
    ids = [m.class_id for m in maps]
    if len(set(ids)) != len(ids):
        raise InvalidInput(f"duplicate class ids in probability maps: {ids}")
    if set(ids) != {c.id for c in registry}:
        raise InvalidInput(
            f"need one map per registered class; got {sorted(ids)}"
        )
    shapes = {m.probabilities.shape for m in maps}
    if len(shapes) != 1:
        raise InvalidInput(f"probability maps disagree on shape: {shapes}")

    ordered = sorted(maps, key=lambda m: m.class_id)
    fg = np.stack([m.probabilities >= threshold for m in ordered])  # m x H x W
    count = fg.sum(axis=0)
    id_values = np.array([m.class_id for m in ordered])
    single = (fg * id_values[:, None, None]).sum(axis=0)

    labels = np.where(count == 1, single, 0).astype(np.int64)

    # tuft-over-capsule applies only to the exact pair
    try:
        tuft = registry.lookup("TUFT").id
        cap = registry.lookup("CAP").id
    except UnknownTissue:
        tuft = cap = None
    if tuft is not None and cap is not None:
        tuft_row = list(id_values).index(tuft)
        cap_row = list(id_values).index(cap)
        pair = (count == 2) & fg[tuft_row] & fg[cap_row]
        labels[pair] = tuft

    return CompleteLabelMap(labels=labels)


def render_overlay(
    image: np.ndarray,
    label_map: CompleteLabelMap,
    palette: Sequence[Tuple[float, float, float]] = PALETTE,
    alpha: float = 0.5,
) -> np.ndarray:
    """Alpha-blend per-class colors over the source image (3 x H x W in [0,1])."""
    labels = label_map.labels
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1:] != labels.shape:
        raise ShapeError(
            f"image {image.shape} does not match label map {labels.shape}"
        )
    max_label = int(labels.max()) if labels.size else 0
    if labels.min() < 0 or max_label >= len(palette):
        raise InvalidLabel(
            f"label values must lie in [0, {len(palette) - 1}], "
            f"got [{labels.min()}, {max_label}]"
        )
    out = np.asarray(image, dtype=np.float32).copy()
    colors = np.asarray(palette, dtype=np.float32)
    fg = labels > 0
    blended = (1.0 - alpha) * out + alpha * colors[labels].transpose(2, 0, 1)
    out[:, fg] = blended[:, fg]
    return out


def aggregate_image(
    image: np.ndarray,
    model,
    registry: Registry,
    tile_stride: int = DEFAULT_TILE_SIZE,
    tile_size: int = DEFAULT_TILE_SIZE,
    threshold: float = DEFAULT_THRESHOLD,
) -> Tuple[CompleteLabelMap, Dict[int, ClassProbabilityMap]]:
    """Run per-class inference for every registered class and merge."""
    maps = [
        segment_class(image, tissue, model, tile_stride=tile_stride,
                      tile_size=tile_size)
        for tissue in registry
    ]
    merged = merge_labels(maps, registry, threshold=threshold)
    return merged, {m.class_id: m for m in maps}

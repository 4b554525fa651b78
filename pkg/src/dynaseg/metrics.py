"""Segmentation quality metrics: Dice (%), Hausdorff and mean surface distance.

Distances are reported in microns via each class's working-scale pixel pitch.
Surfaces are foreground pixels with at least one background 4-neighbor
(out-of-image counts as background); distances are Euclidean between surface
pixel centers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import IncompleteEvaluation, InvalidMask, ShapeError
from .registry import Registry

# Average scores reported by the original full-scale study on the multi-center
# renal benchmark. Reference values only; desk-scale corpora will not match.
FULL_SCALE_REFERENCE_AVERAGES = {
    "dice_pct": 87.70,
    "hd_microns": 58.24,
    "msd_microns": 12.45,
}

FOREGROUND_THRESHOLD = 0.5


@dataclass
class SegScores:
    """Per-class metric triple in reporting units."""

    class_id: int
    dice_pct: float
    hd_microns: float
    msd_microns: float


@dataclass
class MetricContext:
    microns_per_pixel: float
    image_diagonal_microns: float

    def __post_init__(self):
        if self.microns_per_pixel <= 0:
            raise ShapeError("microns_per_pixel must be positive")

    @classmethod
    def for_image(cls, shape, microns_per_pixel: float) -> "MetricContext":
        h, w = shape[-2], shape[-1]
        return cls(
            microns_per_pixel=microns_per_pixel,
            image_diagonal_microns=math.hypot(h, w) * microns_per_pixel,
        )


def _as_binary(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise InvalidMask("mask entries must be 0 or 1")
    return arr.astype(bool)


def dice_pct(pred, gt) -> float:
    """100 * 2|P&G| / (|P| + |G|); two empty masks score 100."""
    p = _as_binary(pred)
    g = _as_binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & g).sum()) / total


def surface_pixels(mask) -> np.ndarray:
    """(K, 2) array of (row, col) foreground pixels touching background."""
    m = _as_binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    surface = m & ~interior
    return np.argwhere(surface)


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every src surface pixel to its nearest dst surface pixel."""
    tree = cKDTree(dst.astype(float))
    dist, _ = tree.query(src.astype(float), k=1)
    return np.atleast_1d(dist)


def _surface_distance_sets(pred, gt, ctx: MetricContext):
    p = _as_binary(pred)
    g = _as_binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
    sp = surface_pixels(p)
    sg = surface_pixels(g)
    if len(sp) == 0 and len(sg) == 0:
        return None  # both empty
    if len(sp) == 0 or len(sg) == 0:
        return "one_empty"
    return _directed_distances(sp, sg), _directed_distances(sg, sp)


def hausdorff_microns(pred, gt, ctx: MetricContext) -> float:
    """Symmetric Hausdorff distance between mask surfaces, in microns.

    Both masks empty -> 0; exactly one empty -> the image diagonal fallback.
    """
    sets = _surface_distance_sets(pred, gt, ctx)
    if sets is None:
        return 0.0
    if sets == "one_empty":
        return ctx.image_diagonal_microns
    d_pg, d_gp = sets
    return float(max(d_pg.max(), d_gp.max())) * ctx.microns_per_pixel


def msd_microns(pred, gt, ctx: MetricContext) -> float:
    """Average symmetric surface distance in microns; empty-mask rules as HD."""
    sets = _surface_distance_sets(pred, gt, ctx)
    if sets is None:
        return 0.0
    if sets == "one_empty":
        return ctx.image_diagonal_microns
    d_pg, d_gp = sets
    mean = (d_pg.sum() + d_gp.sum()) / (len(d_pg) + len(d_gp))
    return float(mean) * ctx.microns_per_pixel


def score_pair(pred, gt, ctx: MetricContext, class_id: int) -> SegScores:
    return SegScores(
        class_id=class_id,
        dice_pct=dice_pct(pred, gt),
        hd_microns=hausdorff_microns(pred, gt, ctx),
        msd_microns=msd_microns(pred, gt, ctx),
    )


@dataclass
class EvaluationTable:
    """Per-class mean scores in registry order plus the unweighted average row."""

    per_class: List[SegScores]
    average: SegScores  # class_id 0 denotes the average row

    def rows(self, registry: Registry) -> List[dict]:
        out = []
        for s in self.per_class:
            out.append(
                {
                    "class": registry.by_id(s.class_id).name,
                    "dice_pct": s.dice_pct,
                    "hd_microns": s.hd_microns,
                    "msd_microns": s.msd_microns,
                }
            )
        out.append(
            {
                "class": "Average",
                "dice_pct": self.average.dice_pct,
                "hd_microns": self.average.hd_microns,
                "msd_microns": self.average.msd_microns,
            }
        )
        return out

    def write_csv(self, path, registry: Registry) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["class", "dice_pct", "hd_microns", "msd_microns"]
            )
            writer.writeheader()
            for row in self.rows(registry):
                writer.writerow(
                    {
                        "class": row["class"],
                        "dice_pct": f"{row['dice_pct']:.2f}",
                        "hd_microns": f"{row['hd_microns']:.2f}",
                        "msd_microns": f"{row['msd_microns']:.2f}",
                    }
                )

    def format_text(self, registry: Registry) -> str:
        header = f"{'Class':<10}{'Dice%':>10}{'HD(um)':>12}{'MSD(um)':>12}"
        lines = [header, "-" * len(header)]
        for row in self.rows(registry):
            lines.append(
                f"{row['class']:<10}{row['dice_pct']:>10.2f}"
                f"{row['hd_microns']:>12.2f}{row['msd_microns']:>12.2f}"
            )
        return "\n".join(lines)


def evaluate_model(
    model,
    samples_by_class: Mapping[int, Sequence],
    registry: Registry,
    threshold: float = FOREGROUND_THRESHOLD,
    batch_size: int = 8,
) -> EvaluationTable:
    """Class-conditioned inference over a test set, averaged per class.

    `samples_by_class` maps class id to PatchSample-like objects (image 3xHxW
    in [0,1], mask HxW in {0,1}); `model` must expose
    predict_foreground(images, class_ids).
    """
    import torch

    missing = [c.name for c in registry if c.id not in samples_by_class
               or len(samples_by_class[c.id]) == 0]
    if missing:
        raise IncompleteEvaluation(f"no test samples for: {', '.join(missing)}")

    per_class: List[SegScores] = []
    for tissue in registry:
        samples = samples_by_class[tissue.id]
        scores: List[SegScores] = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = torch.stack(
                [torch.as_tensor(s.image, dtype=torch.float32) for s in chunk]
            )
            fg = model.predict_foreground(images, tissue.id).cpu().numpy()
            for sample, prob in zip(chunk, fg):
                pred = (prob >= threshold).astype(np.uint8)
                ctx = MetricContext.for_image(prob.shape, tissue.microns_per_pixel)
                scores.append(score_pair(pred, sample.mask, ctx, tissue.id))
        per_class.append(
            SegScores(
                class_id=tissue.id,
                dice_pct=float(np.mean([s.dice_pct for s in scores])),
                hd_microns=float(np.mean([s.hd_microns for s in scores])),
                msd_microns=float(np.mean([s.msd_microns for s in scores])),
            )
        )

    average = SegScores(
        class_id=0,
        dice_pct=float(np.mean([s.dice_pct for s in per_class])),
        hd_microns=float(np.mean([s.hd_microns for s in per_class])),
        msd_microns=float(np.mean([s.msd_microns for s in per_class])),
    )
    return EvaluationTable(per_class=per_class, average=average)

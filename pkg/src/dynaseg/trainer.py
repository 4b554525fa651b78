"""Partial-label training: class-pure image pools, SGD schedule, augmentation.

Samples from all classes are streamed in one shuffled order per epoch and
routed into per-class FIFO pools; whenever a pool holds a full batch, that
class-pure batch takes one optimization step. Residual pool contents carry
over to the next epoch.
"""

from __future__ import annotations

import json
import math
import shutil
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import PatchSample
from .errors import (
    ConfigError,
    DataError,
    IncompleteValidation,
    PoolClassError,
)
from .losses import LossConfig, total_loss
from .metrics import dice_pct
from .model import DynamicSegNet, save_checkpoint
from .registry import Registry


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 0.001
    lr_decay: float = 0.99  # per-epoch multiplicative factor
    epochs: int = 100
    augment_probability: float = 0.5
    seed: int = 0
    pool_capacity: int = 8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.batch_size > self.pool_capacity:
            raise ConfigError("batch_size must not exceed pool capacity")
        if not 0 <= self.augment_probability <= 1:
            raise ConfigError("augment_probability must lie in [0, 1]")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Closed-form schedule: lr * decay^epoch."""
    return config.lr * config.lr_decay**epoch


class ImagePool:
    """Per-class FIFO that releases class-pure batches of the oldest samples."""

    def __init__(self, class_id: int, capacity: int = 8):
        self.class_id = class_id
        self.capacity = capacity
        self.queue: deque = deque()

    def __len__(self):
        return len(self.queue)

    def push(
        self, sample: PatchSample, batch_size: int
    ) -> Optional[List[PatchSample]]:
        """Enqueue; return the batch_size oldest samples once enough are queued."""
        if sample.class_id != self.class_id:
            raise PoolClassError(
                f"sample of class {sample.class_id} pushed into pool "
                f"{self.class_id}"
            )
        self.queue.append(sample)
        if len(self.queue) > self.capacity:
            raise PoolClassError(
                f"pool {self.class_id} exceeded capacity {self.capacity}"
            )
        if len(self.queue) >= batch_size:
            return [self.queue.popleft() for _ in range(batch_size)]
        return None


# ---------------------------------------------------------------------------
# Augmentation: seven transforms, each applied independently with probability p
# ---------------------------------------------------------------------------

AFFINE_DEGREES = 15.0
AFFINE_SCALE = (0.9, 1.1)
BRIGHTNESS_DELTA = 0.2
CONTRAST_DELTA = 0.2
BLUR_SIGMA_MAX = 1.5
NOISE_SIGMA = 0.02
DROPOUT_MAX_AREA = 0.05


def _affine(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    angle = math.radians(rng.uniform(-AFFINE_DEGREES, AFFINE_DEGREES))
    scale = rng.uniform(*AFFINE_SCALE)
    h, w = mask.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    ca, sa = math.cos(angle), math.sin(angle)
    # output -> input mapping for ndimage.affine_transform
    m = np.array([[ca, -sa], [sa, ca]]) / scale
    offset = center - m @ center
    out_img = np.stack(
        [
            ndimage.affine_transform(ch, m, offset=offset, order=1, mode="constant",
                                     cval=float(ch.mean()))
            for ch in image
        ]
    )
    warped = ndimage.affine_transform(
        mask.astype(np.float32), m, offset=offset, order=1, mode="constant", cval=0.0
    )
    return out_img.astype(np.float32), (warped >= 0.5).astype(np.uint8)


def _flip(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    axis = int(rng.integers(0, 2))  # 0: vertical, 1: horizontal
    return (
        np.ascontiguousarray(np.flip(image, axis=axis + 1)),
        np.ascontiguousarray(np.flip(mask, axis=axis)),
    )

def _contrast(image: np.ndarray, rng: np.random.Generator):
    factor = 1.0 + rng.uniform(-CONTRAST_DELTA, CONTRAST_DELTA)
    mean = image.mean()
    return (image - mean) * factor + mean


def _brightness(image: np.ndarray, rng: np.random.Generator):
    return image + rng.uniform(-BRIGHTNESS_DELTA, BRIGHTNESS_DELTA)


def _coarse_dropout(image: np.ndarray, rng: np.random.Generator):
    _, h, w = image.shape
    out = image.copy()
    budget = DROPOUT_MAX_AREA * h * w
    for _ in range(int(rng.integers(1, 4))):
        side = int(rng.integers(max(2, h // 16), max(3, h // 6)))
        if side * side > budget:
            break
        budget -= side * side
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        out[:, top : top + side, left : left + side] = 0.0
    return out


def _gaussian_blur(image: np.ndarray, rng: np.random.Generator):
    sigma = rng.uniform(0.0, BLUR_SIGMA_MAX)
    if sigma < 1e-3:
        return image
    return np.stack([ndimage.gaussian_filter(ch, sigma) for ch in image])


def _gaussian_noise(image: np.ndarray, rng: np.random.Generator):
    return image + rng.normal(0.0, NOISE_SIGMA, size=image.shape).astype(np.float32)


def augment(
    sample: PatchSample, probability: float, rng: np.random.Generator
) -> PatchSample:
    """Apply the seven-transform pipeline, each draw independent.

    Geometric transforms move image and mask together (mask re-binarized at
    0.5); photometric ones touch only the image, clipped back to [0, 1].
    """
    if not 0 <= probability <= 1:
        raise ConfigError("probability must lie in [0, 1]")
    image = sample.image
    mask = sample.mask
    if rng.random() < probability:
        image, mask = _affine(image, mask, rng)
    if rng.random() < probability:
        image, mask = _flip(image, mask, rng)
    if rng.random() < probability:
        image = _contrast(image, rng)
    if rng.random() < probability:
        image = _brightness(image, rng)
    if rng.random() < probability:
        image = _coarse_dropout(image, rng)
    if rng.random() < probability:
        image = _gaussian_blur(image, rng)
    if rng.random() < probability:
        image = _gaussian_noise(image, rng)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return PatchSample(
        image=image, mask=mask, class_id=sample.class_id, source_id=sample.source_id
    )


# ---------------------------------------------------------------------------
# Epoch loop and model selection
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    mean_loss_per_class: Dict[int, float]
    batches_seen: int

    @property
    def mean_loss(self) -> float:
        if not self.mean_loss_per_class:
            return float("nan")
        return float(np.mean(list(self.mean_loss_per_class.values())))


def _batch_tensors(batch: Sequence[PatchSample]):
    images = torch.stack([torch.as_tensor(s.image, dtype=torch.float32) for s in batch])
    masks = torch.stack([torch.as_tensor(s.mask, dtype=torch.long) for s in batch])
    return images, masks


def train_epoch(
    model: DynamicSegNet,
    datasets_by_class: Mapping[int, Sequence[PatchSample]],
    config: TrainConfig,
    loss_config: LossConfig,
    epoch: int,
    pools: Dict[int, ImagePool],
    rng: np.random.Generator,
    allow_missing_classes: bool = False,
) -> EpochStats:
    """One pass over the shuffled union of all class datasets."""
    class_ids = list(datasets_by_class.keys())
    empty = [c for c in class_ids if len(datasets_by_class[c]) == 0]
    if empty and not allow_missing_classes:
        raise DataError(f"no training samples for classes {empty}")

    stream = [
        (cid, idx)
        for cid in class_ids
        for idx in range(len(datasets_by_class[cid]))
    ]
    if not stream:
        raise DataError("no training samples at all")
    order = rng.permutation(len(stream))

    lr = learning_rate(config, epoch)
    optimizer = torch.optim.SGD(model.parameters(), lr=lr)

    loss_sums: Dict[int, float] = {}
    loss_counts: Dict[int, int] = {}
    batches = 0
    model.train()
    for i in order:
        cid, idx = stream[i]
        sample = augment(datasets_by_class[cid][idx], config.augment_probability, rng)
        pool = pools.setdefault(cid, ImagePool(cid, config.pool_capacity))
        batch = pool.push(sample, config.batch_size)
        if batch is None:
            continue
        images, masks = _batch_tensors(batch)
        optimizer.zero_grad()
        prediction = model(images, cid)
        loss = total_loss(prediction, masks, loss_config)
        loss.backward()
        optimizer.step()
        loss_sums[cid] = loss_sums.get(cid, 0.0) + float(loss.detach())
        loss_counts[cid] = loss_counts.get(cid, 0) + 1
        batches += 1

    return EpochStats(
        mean_loss_per_class={
            cid: loss_sums[cid] / loss_counts[cid] for cid in loss_sums
        },
        batches_seen=batches,
    )


def validate(
    model: DynamicSegNet,
    datasets_by_class: Mapping[int, Sequence[PatchSample]],
    registry: Registry,
    threshold: float = 0.5,
    batch_size: int = 8,
) -> Dict[int, float]:
    """Mean Dice (%) per class on held-out patches."""
    scores: Dict[int, float] = {}
    for tissue in registry:
        samples = datasets_by_class.get(tissue.id, [])
        if not samples:
            raise IncompleteValidation(f"no validation samples for {tissue.name}")
        dices = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = torch.stack(
                [torch.as_tensor(s.image, dtype=torch.float32) for s in chunk]
            )
            fg = model.predict_foreground(images, tissue.id).cpu().numpy()
            for sample, prob in zip(chunk, fg):
                pred = (prob >= threshold).astype(np.uint8)
                dices.append(dice_pct(pred, sample.mask))
        scores[tissue.id] = float(np.mean(dices))
    return scores


def select_best(history: Sequence[Mapping[int, float]]) -> int:
    """Epoch index with the highest unweighted mean Dice; ties pick the earliest."""
    if not history:
        raise IncompleteValidation("empty validation history")
    class_ids = set(history[0].keys())
    means = []
    for e, entry in enumerate(history):
        if set(entry.keys()) != class_ids or not class_ids:
            raise IncompleteValidation(
                f"epoch {e} validation is missing classes: "
                f"{sorted(class_ids ^ set(entry.keys()))}"
            )
        means.append(float(np.mean(list(entry.values()))))
    best = 0
    for e, value in enumerate(means):
        if value > means[best]:
            best = e
    return best


@dataclass
class TrainResult:
    history: List[Dict[int, float]]  # per-epoch validation Dice by class
    best_epoch: int
    best_checkpoint: Path
    log_path: Path


def train(
    model: DynamicSegNet,
    patch_sets: Mapping[str, Mapping[int, Sequence[PatchSample]]],
    registry: Registry,
    config: TrainConfig,
    loss_config: LossConfig,
    out_dir,
    log_stream=None,
) -> TrainResult:
    """Full training run with per-epoch checkpoints and best-model selection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "training_log.jsonl"

    rng = np.random.default_rng(config.seed)
    pools: Dict[int, ImagePool] = {}
    history: List[Dict[int, float]] = []

    with log_path.open("w") as log:
        for epoch in range(config.epochs):
            stats = train_epoch(
                model, patch_sets["train"], config, loss_config, epoch, pools, rng
            )
            val_scores = validate(model, patch_sets["val"], registry)
            history.append(val_scores)
            record = {
                "epoch": epoch,
                "lr": learning_rate(config, epoch),
                "batches": stats.batches_seen,
                "loss_per_class": {str(k): v for k, v in
                                   stats.mean_loss_per_class.items()},
                "val_dice_per_class": {str(k): v for k, v in val_scores.items()},
                "val_dice_mean": float(np.mean(list(val_scores.values()))),
            }
            line = json.dumps(record, sort_keys=True)
            log.write(line + "\n")
            log.flush()
            if log_stream is not None:
                print(line, file=log_stream, flush=True)
            save_checkpoint(
                out_dir / f"epoch_{epoch:03d}.ckpt", model, registry,
                extra={"epoch": epoch, "val_dice": val_scores},
            )

    best = select_best(history)
    best_path = out_dir / "best.ckpt"
    shutil.copyfile(out_dir / f"epoch_{best:03d}.ckpt", best_path)
    return TrainResult(
        history=history, best_epoch=best, best_checkpoint=best_path,
        log_path=log_path,
    )

"""Corpus handling: manifests, patch extraction, splits, synthetic generation.

The synthetic generator produces a desk-scale partial-label corpus: each image
is saved with the binary mask of exactly one class, while structures of other
classes may appear unlabeled in the same image.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError, InvalidMask, IoError, ShapeError
from .registry import Registry, TissueClass

STAIN_TAGS = ("HE", "PAS", "SIL", "TRI")

# Per-stain hue rotation (degrees) and saturation scale; emulates the global
# color cast of different stains without any real stain chemistry.
_STAIN_SHIFTS = {"HE": (0.0, 1.0), "PAS": (12.0, 1.05), "SIL": (-14.0, 0.85),
                 "TRI": (24.0, 1.1)}


@dataclass
class PatchSample:
    """The partial-label training unit: one patch, one class, one binary mask."""

    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    class_id: int
    source_id: str


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    class_id: int
    patient_id: str
    stain_tag: str


@dataclass
class CorpusManifest:
    entries: List[ManifestEntry]
    root: Path

    def by_class(self) -> Dict[int, List[ManifestEntry]]:
        grouped: Dict[int, List[ManifestEntry]] = {}
        for entry in self.entries:
            grouped.setdefault(entry.class_id, []).append(entry)
        return grouped

    def patients(self) -> List[str]:
        return sorted({e.patient_id for e in self.entries})


@dataclass
class SplitPlan:
    train: frozenset
    val: frozenset
    test: frozenset

    def split_of(self, patient_id: str) -> str:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, name):
                return name
        raise DataError(f"patient {patient_id!r} not covered by the split plan")


# ---------------------------------------------------------------------------
# Image and mask I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """RGB PNG -> 3 x H x W float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise IoError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    """8-bit mask PNG (0 background / 255 foreground) -> H x W uint8 {0, 1}."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except OSError as exc:
        raise IoError(f"cannot read mask {path}: {exc}") from exc
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise InvalidMask(f"mask {path} has values outside {{0,255}}: {bad[:8]}")
    return (arr == 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """3 x H x W float [0,1] -> RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask).astype(np.uint8) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["image_path", "mask_path", "class_id", "patient_id", "stain_tag"]
MANIFEST_NAME = "manifest.csv"
SPLITS_NAME = "splits.csv"


def save_manifest(manifest: CorpusManifest) -> Path:
    path = manifest.root / MANIFEST_NAME
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.image_path, e.mask_path, e.class_id,
                             e.patient_id, e.stain_tag])
    return path


def load_manifest(root, registry: Registry, validate_masks: bool = True) -> CorpusManifest:
    """Read manifest.csv, checking paths, class ids, and mask encodings."""
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    entries: List[ManifestEntry] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DataError(
                f"manifest header {reader.fieldnames} != {MANIFEST_HEADER}"
            )
        for row in reader:
            entry = ManifestEntry(
                image_path=row["image_path"],
                mask_path=row["mask_path"],
                class_id=int(row["class_id"]),
                patient_id=row["patient_id"],
                stain_tag=row["stain_tag"],
            )
            if not entry.patient_id:
                raise DataError(f"empty patient id in row {row}")
            registry.by_id(entry.class_id)  # raises InvalidClass if unknown
            for rel in (entry.image_path, entry.mask_path):
                if not (root / rel).exists():
                    raise DataError(f"manifest references missing file {rel}")
            if validate_masks:
                load_mask(root / entry.mask_path)  # raises InvalidMask on bad values
            entries.append(entry)
    if not entries:
        raise DataError(f"manifest {path} is empty")
    return CorpusManifest(entries=entries, root=root)


# ---------------------------------------------------------------------------
# Patch extraction and balancing
# ---------------------------------------------------------------------------

def downsample_image(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-interpolated downsample of a 3 x S x S image."""
    if factor == 1:
        return image
    t = torch.as_tensor(image, dtype=torch.float32)[None]
    h, w = t.shape[2] // factor, t.shape[3] // factor
    out = F.interpolate(t, size=(h, w), mode="area")
    return out[0].numpy()


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample; keeps labels binary."""
    if factor == 1:
        return mask
    t = torch.as_tensor(mask, dtype=torch.float32)[None, None]
    h, w = t.shape[2] // factor, t.shape[3] // factor
    out = F.interpolate(t, size=(h, w), mode="nearest")
    return (out[0, 0].numpy() > 0.5).astype(np.uint8)


def extract_patches(
    image: np.ndarray,
    mask: np.ndarray,
    tissue: TissueClass,
    patch_size: int,
    count: int,
    rng: np.random.Generator,
    source_id: str = "",
) -> List[PatchSample]:
    """Downsample to the class's working scale, then draw random crops."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be 3 x S x S, got {image.shape}")
    if mask.shape != image.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape}")
    img = downsample_image(image, tissue.downsample_factor)
    msk = downsample_mask(mask, tissue.downsample_factor)
    h, w = msk.shape
    if h < patch_size or w < patch_size:
        raise ShapeError(
            f"image {h}x{w} after /{tissue.downsample_factor} downsample is "
            f"smaller than patch size {patch_size}"
        )
    samples = []
    for _ in range(count):
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        samples.append(
            PatchSample(
                image=np.ascontiguousarray(
                    img[:, top : top + patch_size, left : left + patch_size]
                ),
                mask=np.ascontiguousarray(
                    msk[top : top + patch_size, left : left + patch_size]
                ),
                class_id=tissue.id,
                source_id=source_id,
            )
        )
    return samples


def balance_counts(
    per_class_image_counts: Mapping[int, int], target_per_class: int
) -> Dict[int, int]:
    """Crops per image so every class yields at least target_per_class patches."""
    out = {}
    for class_id, count in per_class_image_counts.items():
        if count < 1:
            raise DataError(f"class {class_id} has no images")
        out[class_id] = math.ceil(target_per_class / count)
    return out


# ---------------------------------------------------------------------------
# Patient-level splits
# ---------------------------------------------------------------------------

def _largest_remainder(n: int, ratio: Tuple[int, int, int]) -> List[int]:
    total = sum(ratio)
    quotas = [n * r / total for r in ratio]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    # Seats go to the largest fractional remainders; ties favor the earlier
    # split in (train, val, test) order.
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    # Every split keeps at least one patient; donors are the largest splits.
    while min(counts) == 0:
        counts[max(range(3), key=lambda i: counts[i])] -= 1
        counts[counts.index(0)] += 1
    return counts


def split_dataset(
    patients: Sequence[str],
    ratio: Tuple[int, int, int] = (6, 1, 3),
    seed: int = 0,
) -> SplitPlan:
    """Shuffle patients and split by largest-remainder proportions."""
    patients = list(patients)
    if len(set(patients)) != len(patients):
        raise DataError("duplicate patient ids")
    if len(patients) < 3:
        raise DataError(f"need at least 3 patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_train, n_val, n_test = _largest_remainder(len(patients), ratio)
    return SplitPlan(
        train=frozenset(order[:n_train]),
        val=frozenset(order[n_train : n_train + n_val]),
        test=frozenset(order[n_train + n_val :]),
    )


def save_splits(plan: SplitPlan, root) -> Path:
    path = Path(root) / SPLITS_NAME
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "split"])
        for name in ("train", "val", "test"):
            for pid in sorted(getattr(plan, name)):
                writer.writerow([pid, name])
    return path


def load_splits(root) -> SplitPlan:
    path = Path(root) / SPLITS_NAME
    if not path.exists():
        raise DataError(f"no {SPLITS_NAME} under {root}")
    buckets: Dict[str, set] = {"train": set(), "val": set(), "test": set()}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] not in buckets:
                raise DataError(f"unknown split name {row['split']!r}")
            buckets[row["split"]].add(row["patient_id"])
    return SplitPlan(
        train=frozenset(buckets["train"]),
        val=frozenset(buckets["val"]),
        test=frozenset(buckets["test"]),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

@dataclass
class StructureSpec:
    """Procedural recipe for one class's structures."""

    shape: str  # one of the drawing families below
    size_range: Tuple[float, float]  # structure radius as a fraction of image side
    count_range: Tuple[int, int]  # structures per image, inclusive
    color: Tuple[float, float, float]
    texture_amplitude: float = 0.05


# Reporting-order classes get visually distinct families and hues so the
# desk-scale task is learnable by a small network.
DEFAULT_STRUCTURE_SPECS: Dict[str, StructureSpec] = {
    "DT": StructureSpec("filled_ellipse", (0.10, 0.18), (2, 4), (0.50, 0.22, 0.58)),
    "PT": StructureSpec("ellipse_ring", (0.12, 0.20), (2, 4), (0.92, 0.52, 0.12)),
    "CAP": StructureSpec("textured_blob", (0.14, 0.22), (1, 3), (0.18, 0.58, 0.26),
                         texture_amplitude=0.12),
    "TUFT": StructureSpec("hollow_blob", (0.14, 0.22), (1, 3), (0.16, 0.32, 0.78)),
    "VES": StructureSpec("dots", (0.025, 0.045), (8, 16), (0.82, 0.12, 0.20)),
    "PTC": StructureSpec("curved_band", (0.035, 0.06), (2, 4), (0.10, 0.62, 0.62)),
}

_BACKGROUND_COLOR = (0.93, 0.87, 0.90)


@dataclass
class SynthConfig:
    num_images_per_class: int = 60
    image_size: int = 192
    patch_size: int = 128
    seed: int = 0
    num_patients: int = 10
    distractor_range: Tuple[int, int] = (1, 2)
    structures: Dict[str, StructureSpec] = field(
        default_factory=lambda: dict(DEFAULT_STRUCTURE_SPECS)
    )

    def __post_init__(self):
        if self.num_images_per_class < 1:
            raise DataError("num_images_per_class must be >= 1")
        if self.patch_size > self.image_size:
            raise DataError("patch_size must not exceed image_size")


def _rotated_coords(size, cy, cx, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    return ca * dx + sa * dy, -sa * dx + ca * dy  # (u, v) in rotated frame


def _draw_structure(
    size: int, spec: StructureSpec, rng: np.random.Generator
) -> np.ndarray:
    """Boolean mask of one randomly placed structure of the spec's family."""
    radius = rng.uniform(*spec.size_range) * size
    margin = max(4.0, radius * 1.1)
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    angle = rng.uniform(0, math.pi)

    if spec.shape == "filled_ellipse":
        u, v = _rotated_coords(size, cy, cx, angle)
        ry = radius * rng.uniform(0.55, 0.85)
        return (u / radius) ** 2 + (v / ry) ** 2 <= 1.0

    if spec.shape == "ellipse_ring":
        u, v = _rotated_coords(size, cy, cx, angle)
        ry = radius * rng.uniform(0.6, 0.9)
        outer = (u / radius) ** 2 + (v / ry) ** 2 <= 1.0
        frac = rng.uniform(0.5, 0.68)
        inner = (u / (radius * frac)) ** 2 + (v / (ry * frac)) ** 2 <= 1.0
        return outer & ~inner

    if spec.shape in ("textured_blob", "hollow_blob"):
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
        dy, dx = yy - cy, xx - cx
        rr = np.hypot(dy, dx)
        theta = np.arctan2(dy, dx)
        lobes = int(rng.integers(3, 7))
        wobble = 1.0 + 0.18 * np.sin(lobes * theta + rng.uniform(0, 2 * math.pi))
        outer = rr <= radius * wobble
        if spec.shape == "textured_blob":
            return outer
        hole = rr <= radius * wobble * rng.uniform(0.35, 0.55)
        return outer & ~hole

    if spec.shape == "dots":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
        # one dot per draw; scatter handled by count_range
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2

    if spec.shape == "curved_band":
        u, v = _rotated_coords(size, cy, cx, angle)
        width = radius
        length = size * rng.uniform(0.35, 0.6)
        amplitude = size * rng.uniform(0.04, 0.10)
        freq = rng.uniform(1.0, 2.0) * math.pi / length
        curve = amplitude * np.sin(freq * u + rng.uniform(0, 2 * math.pi))
        return (np.abs(v - curve) <= width) & (np.abs(u) <= length / 2)

    raise DataError(f"unknown shape family {spec.shape!r}")


def _hue_rotate(image: np.ndarray, degrees: float, saturation: float) -> np.ndarray:
    """Rotate hue about the gray axis and scale saturation; image is HxWx3."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    one_third = 1.0 / 3.0
    sq = math.sqrt(one_third)
    m = np.array(
        [
            [c + (1 - c) * one_third, one_third * (1 - c) - sq * s,
             one_third * (1 - c) + sq * s],
            [one_third * (1 - c) + sq * s, c + one_third * (1 - c),
             one_third * (1 - c) - sq * s],
            [one_third * (1 - c) - sq * s, one_third * (1 - c) + sq * s,
             c + one_third * (1 - c)],
        ],
        dtype=np.float32,
    )
    rotated = image @ m.T
    gray = rotated.mean(axis=2, keepdims=True)
    return np.clip(gray + saturation * (rotated - gray), 0.0, 1.0)


def render_scene(
    size: int,
    class_order: Sequence[int],
    registry: Registry,
    rng: np.random.Generator,
    specs: Optional[Mapping[str, StructureSpec]] = None,
    counts: Optional[Mapping[int, int]] = None,
    stain_tag: Optional[str] = None,
) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Draw the listed classes (later entries on top) over a textured background.

    Returns the HxWx3 image and one occlusion-aware binary mask per class.
    """
    specs = specs or DEFAULT_STRUCTURE_SPECS
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = _BACKGROUND_COLOR
    image += rng.normal(0.0, 0.015, size=(size, size, 3)).astype(np.float32)

    masks: Dict[int, np.ndarray] = {cid: np.zeros((size, size), bool)
                                    for cid in class_order}
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for class_id in class_order:
        tissue = registry.by_id(class_id)
        spec = specs[tissue.name]
        if counts and class_id in counts:
            n_structures = counts[class_id]
        else:
            n_structures = int(rng.integers(spec.count_range[0],
                                            spec.count_range[1] + 1))
        class_mask = np.zeros((size, size), bool)
        for _ in range(n_structures):
            class_mask |= _draw_structure(size, spec, rng)
        # later classes occlude earlier ones
        for other in masks:
            if other != class_id:
                masks[other] &= ~class_mask
        masks[class_id] |= class_mask

        texture = spec.texture_amplitude * np.sin(
            0.35 * yy + 0.27 * xx + rng.uniform(0, 2 * math.pi)
        )
        color = np.asarray(spec.color, dtype=np.float32)
        shade = rng.normal(0.0, 0.02, size=(size, size)).astype(np.float32)
        fill = color[None, None, :] + (texture + shade)[:, :, None]
        image[class_mask] = fill[class_mask]

    if stain_tag is not None:
        degrees, saturation = _STAIN_SHIFTS[stain_tag]
        image = _hue_rotate(image, degrees + rng.uniform(-3, 3),
                            saturation * rng.uniform(0.95, 1.05))
    return np.clip(image, 0.0, 1.0), {c: m.astype(np.uint8) for c, m in masks.items()}


def generate_synthetic(
    config: SynthConfig, registry: Registry, root
) -> CorpusManifest:
    """Write the partial-label corpus to disk and return its manifest.

    Per class and image index the generator is independently seeded, so a
    fixed SynthConfig.seed reproduces the corpus byte for byte.
    """
    root = Path(root)
    entries: List[ManifestEntry] = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise IoError(f"output directory {root} not writable: {exc}") from exc

    for tissue in registry:
        img_dir = root / tissue.name / "img"
        mask_dir = root / tissue.name / "mask"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        others = [c.id for c in registry if c.id != tissue.id]
        for k in range(config.num_images_per_class):
            rng = np.random.default_rng((config.seed, tissue.id, k))
            patient = f"P{k % config.num_patients:03d}"
            stain = STAIN_TAGS[int(rng.integers(0, len(STAIN_TAGS)))]
            n_distractors = int(
                rng.integers(config.distractor_range[0],
                             config.distractor_range[1] + 1)
            ) if others else 0
            distractors = list(
                rng.choice(others, size=min(n_distractors, len(others)),
                           replace=False)
            ) if n_distractors else []
            # labeled class drawn last so its mask is never fully occluded
            order = [int(d) for d in distractors] + [tissue.id]
            image, masks = render_scene(
                config.image_size, order, registry, rng,
                specs=config.structures, stain_tag=stain,
            )
            if not masks[tissue.id].any():
                raise DataError(
                    f"generator produced an empty {tissue.name} mask (image {k})"
                )
            name = f"{patient}_{k:03d}.png"
            save_image(img_dir / name, image.transpose(2, 0, 1))
            save_mask(mask_dir / name, masks[tissue.id])
            entries.append(
                ManifestEntry(
                    image_path=str(Path(tissue.name) / "img" / name),
                    mask_path=str(Path(tissue.name) / "mask" / name),
                    class_id=tissue.id,
                    patient_id=patient,
                    stain_tag=stain,
                )
            )

    manifest = CorpusManifest(entries=entries, root=root)
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# Patch set assembly for training and evaluation
# ---------------------------------------------------------------------------

def build_patch_sets(
    manifest: CorpusManifest,
    plan: SplitPlan,
    registry: Registry,
    patch_size: int,
    target_per_class: int,
    seed: int = 0,
    eval_patches_per_image: int = 1,
) -> Dict[str, Dict[int, List[PatchSample]]]:
    """Extract train/val/test patches from the corpus, class-balanced for train."""
    grouped = manifest.by_class()
    missing = [c.name for c in registry if c.id not in grouped]
    if missing:
        raise DataError(f"corpus lacks images for: {', '.join(missing)}")

    train_counts = {
        cid: sum(1 for e in entries if plan.split_of(e.patient_id) == "train")
        for cid, entries in grouped.items()
    }
    crops_per_image = balance_counts(train_counts, target_per_class)

    out: Dict[str, Dict[int, List[PatchSample]]] = {
        "train": {}, "val": {}, "test": {}
    }
    rng = np.random.default_rng(seed)
    for tissue in registry:
        for split in out:
            out[split][tissue.id] = []
        for entry in grouped[tissue.id]:
            split = plan.split_of(entry.patient_id)
            count = (crops_per_image[tissue.id] if split == "train"
                     else eval_patches_per_image)
            image = load_image(manifest.root / entry.image_path)
            mask = load_mask(manifest.root / entry.mask_path)
            out[split][tissue.id].extend(
                extract_patches(
                    image, mask, tissue, patch_size, count, rng,
                    source_id=entry.image_path,
                )
            )
    for split, per_class in out.items():
        empty = [registry.by_id(c).name for c, lst in per_class.items() if not lst]
        if empty:
            raise DataError(f"{split} split has no patches for: {', '.join(empty)}")
    return out

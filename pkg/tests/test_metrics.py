import math

import numpy as np
import pytest
import torch

from dynaseg.data import PatchSample
from dynaseg.errors import IncompleteEvaluation, ShapeError
from dynaseg.metrics import (
    FULL_SCALE_REFERENCE_AVERAGES,
    EvaluationTable,
    MetricContext,
    SegScores,
    dice_pct,
    evaluate_model,
    hausdorff_microns,
    msd_microns,
    surface_pixels,
)
from dynaseg.registry import default_registry

from oracles import dice_pct_counting, hd_msd_pairwise, surface_scan

CTX = MetricContext(microns_per_pixel=0.25, image_diagonal_microns=90.5)


def _mask(shape, coords):
    m = np.zeros(shape, dtype=np.uint8)
    for r, c in coords:
        m[r, c] = 1
    return m


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def test_identical_masks_score_100():
    m = _mask((4, 4), [(0, 0), (1, 1)])
    assert dice_pct(m, m) == 100.0


def test_disjoint_masks_score_0():
    a = _mask((4, 4), [(0, 0)])
    b = _mask((4, 4), [(3, 3)])
    assert dice_pct(a, b) == 0.0


def test_half_overlap_scores_50():
    # |P| = 4, |G| = 4, |P & G| = 2 on an explicit 4x4 grid
    p = _mask((4, 4), [(0, 0), (0, 1), (1, 0), (1, 1)])
    g = _mask((4, 4), [(1, 0), (1, 1), (2, 0), (2, 1)])
    assert dice_pct(p, g) == 50.0
    assert dice_pct_counting(p, g) == 50.0


def test_both_empty_scores_100():
    empty = np.zeros((4, 4), dtype=np.uint8)
    assert dice_pct(empty, empty) == 100.0


def test_dice_symmetry():
    rng = np.random.default_rng(0)
    a = (rng.random((8, 8)) < 0.4).astype(np.uint8)
    b = (rng.random((8, 8)) < 0.4).astype(np.uint8)
    assert dice_pct(a, b) == dice_pct(b, a)


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_pct(np.zeros((3, 3), np.uint8), np.zeros((4, 4), np.uint8))


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------

def test_isolated_pixel_is_its_own_surface():
    m = _mask((5, 5), [(2, 2)])
    assert surface_pixels(m).tolist() == [[2, 2]]


def test_solid_block_surface_is_the_ring():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[1:4, 1:4] = 1
    surface = {tuple(p) for p in surface_pixels(m)}
    expected = {(r, c) for r in range(1, 4) for c in range(1, 4)} - {(2, 2)}
    assert surface == expected
    assert len(surface) == 8


def test_empty_mask_has_no_surface():
    assert surface_pixels(np.zeros((4, 4), np.uint8)).size == 0


def test_border_foreground_is_surface():
    # out-of-image counts as background
    m = np.ones((3, 3), dtype=np.uint8)
    assert len(surface_pixels(m)) == 8  # all but the center


# ---------------------------------------------------------------------------
# HD / MSD
# ---------------------------------------------------------------------------

def test_identical_masks_zero_distances():
    m = _mask((6, 6), [(2, 2), (2, 3)])
    assert hausdorff_microns(m, m, CTX) == 0.0
    assert msd_microns(m, m, CTX) == 0.0


def test_four_pixel_pair_is_one_micron():
    a = _mask((1, 5), [(0, 0)])
    b = _mask((1, 5), [(0, 4)])
    assert hausdorff_microns(a, b, CTX) == pytest.approx(1.0)
    assert msd_microns(a, b, CTX) == pytest.approx(1.0)


def test_one_empty_mask_uses_diagonal_fallback():
    empty = np.zeros((4, 4), dtype=np.uint8)
    full = _mask((4, 4), [(1, 1)])
    assert hausdorff_microns(empty, full, CTX) == 90.5
    assert msd_microns(full, empty, CTX) == 90.5


def test_both_empty_distances_are_zero():
    empty = np.zeros((4, 4), dtype=np.uint8)
    assert hausdorff_microns(empty, empty, CTX) == 0.0
    assert msd_microns(empty, empty, CTX) == 0.0


def test_scale_covariance():
    rng = np.random.default_rng(3)
    a = (rng.random((10, 10)) < 0.3).astype(np.uint8)
    b = (rng.random((10, 10)) < 0.3).astype(np.uint8)
    ctx1 = MetricContext(1.0, 100.0)
    ctx3 = MetricContext(3.0, 300.0)
    assert hausdorff_microns(a, b, ctx3) == pytest.approx(
        3 * hausdorff_microns(a, b, ctx1)
    )
    assert msd_microns(a, b, ctx3) == pytest.approx(3 * msd_microns(a, b, ctx1))


def test_metrics_match_bruteforce_oracle():
    rng = np.random.default_rng(42)
    ctx = MetricContext(0.25, math.hypot(16, 16) * 0.25)
    for _ in range(40):
        a = (rng.random((16, 16)) < rng.uniform(0.1, 0.6)).astype(np.uint8)
        b = (rng.random((16, 16)) < rng.uniform(0.1, 0.6)).astype(np.uint8)
        assert dice_pct(a, b) == dice_pct_counting(a, b)
        assert {tuple(p) for p in surface_pixels(a)} == set(surface_scan(a))
        hd_o, msd_o = hd_msd_pairwise(a, b, 0.25, ctx.image_diagonal_microns)
        assert abs(hausdorff_microns(a, b, ctx) - hd_o) < 1e-9
        assert abs(msd_microns(a, b, ctx) - msd_o) < 1e-9


def test_hd_at_least_msd():
    rng = np.random.default_rng(7)
    ctx = MetricContext(0.25, 10.0)
    for _ in range(25):
        a = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        b = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        hd = hausdorff_microns(a, b, ctx)
        msd = msd_microns(a, b, ctx)
        assert hd >= msd >= 0.0


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

class _OracleModel:
    """Stub returning the ground truth it was given (a perfect segmenter)."""

    def __init__(self, lookup):
        self._lookup = lookup

    def predict_foreground(self, images, class_ids):
        masks = [self._lookup[images[i].sum().item()] for i in range(len(images))]
        return torch.stack([torch.as_tensor(m, dtype=torch.float32) for m in masks])


class _ConstantModel:
    def __init__(self, value):
        self.value = value

    def predict_foreground(self, images, class_ids):
        return torch.full((images.shape[0], *images.shape[2:]), self.value)


def _samples(registry, rng, n=3, size=16):
    out = {}
    lookup = {}
    for tissue in registry:
        samples = []
        for _ in range(n):
            image = rng.random((3, size, size)).astype(np.float32)
            mask = np.zeros((size, size), dtype=np.uint8)
            r, c = rng.integers(2, size - 4, 2)
            mask[r : r + 3, c : c + 3] = 1
            lookup[float(np.float32(image).sum())] = mask
            samples.append(
                PatchSample(image=image, mask=mask, class_id=tissue.id, source_id="t")
            )
        out[tissue.id] = samples
    return out, lookup


def test_perfect_oracle_model_scores_perfectly():
    registry = default_registry()
    rng = np.random.default_rng(0)
    samples, lookup = _samples(registry, rng)
    table = evaluate_model(_OracleModel(lookup), samples, registry)
    for scores in table.per_class:
        assert scores.dice_pct == 100.0
        assert scores.hd_microns == 0.0
        assert scores.msd_microns == 0.0
    assert table.average.dice_pct == 100.0


def test_constant_background_model_scores_zero_dice_and_diagonal_hd():
    registry = default_registry()
    rng = np.random.default_rng(1)
    samples, _ = _samples(registry, rng, size=16)
    table = evaluate_model(_ConstantModel(0.0), samples, registry)
    diagonal = math.hypot(16, 16) * 0.25
    for scores in table.per_class:
        assert scores.dice_pct == 0.0
        assert scores.hd_microns == pytest.approx(diagonal)


def test_missing_class_raises():
    registry = default_registry()
    rng = np.random.default_rng(2)
    samples, lookup = _samples(registry, rng)
    del samples[3]
    with pytest.raises(IncompleteEvaluation):
        evaluate_model(_OracleModel(lookup), samples, registry)


def test_reference_averages_are_documented_constants():
    # reference only, never an acceptance target at desk scale
    assert FULL_SCALE_REFERENCE_AVERAGES == {
        "dice_pct": 87.70,
        "hd_microns": 58.24,
        "msd_microns": 12.45,
    }


def test_table_formatting_lists_all_classes(tmp_path):
    registry = default_registry()
    per_class = [
        SegScores(class_id=c.id, dice_pct=80.0, hd_microns=1.0, msd_microns=0.5)
        for c in registry
    ]
    table = EvaluationTable(
        per_class=per_class,
        average=SegScores(class_id=0, dice_pct=80.0, hd_microns=1.0, msd_microns=0.5),
    )
    text = table.format_text(registry)
    for name in ("DT", "PT", "CAP", "TUFT", "VES", "PTC", "Average"):
        assert name in text
    table.write_csv(tmp_path / "m.csv", registry)
    lines = (tmp_path / "m.csv").read_text().strip().splitlines()
    assert lines[0] == "class,dice_pct,hd_microns,msd_microns"
    assert len(lines) == 8

"""Tests for the boosted-fern cascade: split indexing against an independent
re-implementation, RealBoost partition scores, training behavior on separable
synthetic data, soft-cascade early exit, and the sliding-window scan."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpdet.ferns import (
    CascadeConfig,
    CascadeModel,
    Fern,
    TrainingError,
    cascade_score,
    fern_index,
    fold_sum,
    partition_scores,
    scan,
    to_grayscale,
    train_cascade,
)
from warpdet.suppress import iou


def bitwise_index_reference(patch, coords, thresholds):
    """Independent re-implementation: explicit per-bit loop."""
    idx = 0
    for i in range(8):
        x1, y1, x2, y2 = coords[i]
        if patch[y1, x1] - patch[y2, x2] < thresholds[i]:
            idx += 2**i
    return idx


def make_fern(rng, patch_size=32):
    coords = rng.integers(0, patch_size, size=(8, 4))
    thresholds = rng.uniform(-0.5, 0.5, size=8)
    return Fern(coords, thresholds, np.zeros(256))


def separable_patches(rng, n_pos, n_neg, contrast=0.6, noise=0.1, jitter=0):
    """Bright-center positives vs flat-noise negatives, linearly separable by
    center-minus-border pixel differences. Optional jitter shifts and resizes
    the bright square so a model generalizes to sliding-window offsets."""
    pos = rng.normal(0.3, noise, size=(n_pos, 32, 32))
    for p in pos:
        half = 8 + (rng.integers(-jitter, jitter + 1) if jitter else 0)
        cy = 16 + (rng.integers(-jitter, jitter + 1) if jitter else 0)
        cx = 16 + (rng.integers(-jitter, jitter + 1) if jitter else 0)
        p[cy - half : cy + half, cx - half : cx + half] += contrast
    neg = rng.normal(0.3, noise, size=(n_neg, 32, 32))
    return np.clip(pos, 0, 1.5), np.clip(neg, 0, 1.5)


def training_error(model, pos, neg):
    scores_pos = [cascade_score(p, model, early_exit=False)[0] for p in pos]
    scores_neg = [cascade_score(p, model, early_exit=False)[0] for p in neg]
    mistakes = sum(s <= 0 for s in scores_pos) + sum(s > 0 for s in scores_neg)
    return mistakes / (len(pos) + len(neg))


class TestFernIndex:
    def test_constant_patch_positive_thresholds(self, rng):
        fern = make_fern(rng)
        fern.thresholds = np.full(8, 0.25)
        assert fern_index(np.full((32, 32), 0.7), fern) == 255

    def test_constant_patch_negative_thresholds(self, rng):
        fern = make_fern(rng)
        fern.thresholds = np.full(8, -0.25)
        assert fern_index(np.full((32, 32), 0.7), fern) == 0

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_bitwise_reference(self, seed):
        rng = np.random.default_rng(seed)
        patch = rng.random((32, 32))
        fern = make_fern(rng)
        assert fern_index(patch, fern) == bitwise_index_reference(
            patch, fern.coords, fern.thresholds
        )

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 7))
    def test_flipping_one_split_moves_index_by_its_power(self, seed, bit):
        rng = np.random.default_rng(seed)
        patch = rng.random((32, 32))
        fern = make_fern(rng)
        base = fern_index(patch, fern)
        x1, y1, x2, y2 = fern.coords[bit]
        diff = patch[y1, x1] - patch[y2, x2]
        # move the threshold to the other side of the observed difference
        flipped = fern.thresholds.copy()
        flipped[bit] = diff - 1.0 if diff < fern.thresholds[bit] else diff + 1.0
        other = Fern(fern.coords, flipped, fern.scores)
        assert abs(fern_index(patch, other) - base) == 2**bit

    def test_out_of_range_coords_rejected(self, rng):
        fern = make_fern(rng)
        fern.coords[0, 0] = 32
        with pytest.raises(ValueError):
            CascadeModel([fern], np.zeros(1))


class TestPartitionScores:
    def test_balanced_partition_scores_zero(self):
        parts = np.array([3, 3])
        labels = np.array([1, 0])
        weights = np.array([0.5, 0.5])
        scores = partition_scores(parts, labels, weights)
        assert scores[3] == 0.0

    def test_nine_to_one_ratio(self):
        parts = np.array([7, 7])
        labels = np.array([1, 0])
        weights = np.array([0.9, 0.1])
        scores = partition_scores(parts, labels, weights, smoothing_fraction=1e-12)
        assert scores[7] == pytest.approx(0.5 * np.log(9.0), abs=1e-9)

    def test_empty_partition_scores_zero(self):
        parts = np.array([0, 1])
        labels = np.array([1, 0])
        weights = np.array([0.5, 0.5])
        scores = partition_scores(parts, labels, weights)
        assert np.all(scores[2:] == 0.0)

    def test_nonpositive_weights_rejected(self):
        with pytest.raises(ValueError):
            partition_scores(np.array([0]), np.array([1]), np.array([0.0]))


class TestFoldSum:
    def test_matches_plain_sum(self, rng):
        for n in (1, 2, 3, 7, 31, 100):
            v = rng.standard_normal(n)
            assert fold_sum(v) == pytest.approx(v.sum(), rel=1e-12)
        assert fold_sum(np.array([])) == 0.0

    def test_adjacent_duplication_doubles_exactly(self, rng):
        for n in (1, 3, 9, 50):
            v = rng.standard_normal(n)
            assert fold_sum(np.repeat(v, 2)) == 2.0 * fold_sum(v)


class TestTrainCascade:
    def test_separable_task_reaches_zero_training_error(self, rng):
        pos, neg = separable_patches(rng, 120, 160)
        cfg = CascadeConfig(num_ferns=50, candidate_pool=40, seed=3)
        model = train_cascade(pos, neg, cfg)
        assert training_error(model, pos, neg) == 0.0

    def test_full_target_rejects_no_positive(self, rng):
        pos, neg = separable_patches(rng, 60, 80)
        cfg = CascadeConfig(
            num_ferns=12, candidate_pool=30, per_stage_detection_target=1.0, seed=5
        )
        model = train_cascade(pos, neg, cfg)
        for p in pos:
            _, rejected_at = cascade_score(p, model)
            assert rejected_at is None

    def test_duplicated_training_set_gives_bitwise_identical_model(self, rng):
        pos, neg = separable_patches(rng, 40, 50)
        cfg = CascadeConfig(num_ferns=8, candidate_pool=20, seed=11)
        base = train_cascade(pos, neg, cfg)
        doubled = train_cascade(
            np.repeat(pos, 2, axis=0), np.repeat(neg, 2, axis=0), cfg
        )
        np.testing.assert_array_equal(base.stage_thresholds, doubled.stage_thresholds)
        for fa, fb in zip(base.ferns, doubled.ferns):
            np.testing.assert_array_equal(fa.coords, fb.coords)
            np.testing.assert_array_equal(fa.thresholds, fb.thresholds)
            np.testing.assert_array_equal(fa.scores, fb.scores)

    def test_seeded_training_is_bit_reproducible(self, rng):
        pos, neg = separable_patches(rng, 40, 50)
        cfg = CascadeConfig(num_ferns=6, candidate_pool=15, seed=2)
        a = train_cascade(pos, neg, cfg)
        b = train_cascade(pos, neg, cfg)
        np.testing.assert_array_equal(a.stage_thresholds, b.stage_thresholds)
        for fa, fb in zip(a.ferns, b.ferns):
            np.testing.assert_array_equal(fa.scores, fb.scores)

    def test_exponential_loss_non_increasing(self, rng):
        pos, neg = separable_patches(rng, 80, 100)
        cfg = CascadeConfig(num_ferns=25, candidate_pool=30, seed=7)
        model = train_cascade(pos, neg, cfg)
        losses = model.train_log["stage_partition_losses"]
        assert all(z <= 1.0 + 1e-12 for z in losses)

    def test_degenerate_pool_raises(self):
        pos = np.full((10, 32, 32), 0.5)
        neg = np.full((12, 32, 32), 0.5)
        cfg = CascadeConfig(num_ferns=3, candidate_pool=10, seed=0)
        with pytest.raises(TrainingError):
            train_cascade(pos, neg, cfg)

    def test_empty_class_rejected(self, rng):
        pos, _ = separable_patches(rng, 5, 5)
        with pytest.raises(ValueError):
            train_cascade(pos, np.zeros((0, 32, 32)), CascadeConfig(num_ferns=1))


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(0)
    pos, neg = separable_patches(rng, 80, 100)
    return train_cascade(
        pos, neg, CascadeConfig(num_ferns=20, candidate_pool=30, seed=1)
    ), pos, neg


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(21)
    pos, neg = separable_patches(rng, 300, 400, jitter=3)
    return train_cascade(
        pos, neg, CascadeConfig(num_ferns=30, candidate_pool=40, seed=4)
    )


class TestCascadeScore:
    def test_accepted_patch_gets_full_score(self, model):
        cascade, pos, _ = model
        score, rejected_at = cascade_score(pos[0], cascade)
        if rejected_at is None:
            full = sum(
                fern.scores[fern_index(pos[0], fern)] for fern in cascade.ferns
            )
            assert score == pytest.approx(full)

    def test_early_reject_costs_one_stage(self, model):
        cascade, _, _ = model
        # craft thresholds that reject everything immediately
        strict = CascadeModel(
            cascade.ferns, np.full(len(cascade.ferns), 1e9), cascade.patch_size
        )
        _, rejected_at = cascade_score(np.zeros((32, 32)), strict)
        assert rejected_at == 0

    def test_early_exit_matches_full_evaluation(self, model, rng):
        cascade, pos, neg = model
        patches = np.concatenate([pos[:20], neg[:20], rng.random((40, 32, 32))])
        for patch in patches:
            s_fast, r_fast = cascade_score(patch, cascade, early_exit=True)
            s_full, r_full = cascade_score(patch, cascade, early_exit=False)
            assert r_fast == r_full
            if r_fast is None:
                assert s_fast == pytest.approx(s_full)
            else:
                # the early-exit score is the cumulative prefix at rejection
                prefix = 0.0
                for fern in cascade.ferns[: r_fast + 1]:
                    prefix += fern.scores[fern_index(patch, fern)]
                assert s_fast == pytest.approx(prefix)


class TestScan:
    def test_blank_image_near_empty(self, trained):
        blank = np.full((80, 80), 0.3)
        dets = scan(blank, trained)
        assert len(dets) <= 5

    def test_planted_pattern_found(self, trained, rng):
        img = np.clip(rng.normal(0.3, 0.1, size=(96, 96)), 0, 1.5)
        size = 40
        x0, y0 = 30, 26
        inner = int(size * 0.5)
        off = (size - inner) // 2
        img[y0 + off : y0 + off + inner, x0 + off : x0 + off + inner] += 0.6
        dets = scan(img, trained)
        assert any(iou(d.box, (x0, y0, size, size)) >= 0.5 for d in dets)

    def test_full_stride_tiles_align(self, trained, rng):
        img = np.clip(rng.normal(0.3, 0.1, size=(80, 80)), 0, 1.5)
        img[20:40, 20:40] += 0.6
        dets = scan(img, trained, window_stride=32)
        for d in dets:
            # window origin is a multiple of the stride at its pyramid level
            scale = 32.0 / d.w
            assert (d.x * scale) % 32 == pytest.approx(0, abs=1e-6)
            assert (d.y * scale) % 32 == pytest.approx(0, abs=1e-6)


class TestGrayscale:
    def test_rgb_rounding(self):
        img = np.zeros((3, 2, 2), dtype=np.uint8)
        img[0] = 100  # R
        img[1] = 50   # G
        img[2] = 200  # B
        gray = to_grayscale(img)
        expected = round(0.299 * 100 + 0.587 * 50 + 0.114 * 200)
        assert gray.dtype == np.uint8
        assert np.all(gray == expected)

    def test_single_channel_passthrough(self, rng):
        img = rng.random((5, 5))
        np.testing.assert_array_equal(to_grayscale(img), img)
        np.testing.assert_array_equal(to_grayscale(img[None]), img)

    def test_bad_shape_rejected(self, rng):
        with pytest.raises(ValueError):
            to_grayscale(rng.random((2, 5, 5)))

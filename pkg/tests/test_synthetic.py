"""Tests for the synthetic corpus generator: determinism, analytic landmark
placement, and pixel-support agreement of the ground-truth boxes."""

import numpy as np
import pytest

from warpdet.suppress import iou
from warpdet.synthetic import (
    GLYPH_LANDMARKS,
    AnnotatedSample,
    CorpusParams,
    box_from_landmarks,
    generate_synthetic_corpus,
    glyph_box,
    glyph_landmarks,
    render_face,
)


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        a = generate_synthetic_corpus(7, 5)
        b = generate_synthetic_corpus(7, 5)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            assert len(sa.faces) == len(sb.faces)
            for (box_a, lms_a), (box_b, lms_b) in zip(sa.faces, sb.faces):
                assert box_a == box_b
                np.testing.assert_array_equal(lms_a, lms_b)

    def test_different_seeds_differ(self):
        a = generate_synthetic_corpus(1, 3)
        b = generate_synthetic_corpus(2, 3)
        assert any(
            not np.array_equal(sa.image, sb.image) for sa, sb in zip(a, b)
        )


class TestAnalyticLayout:
    def test_zero_rotation_noise_free_landmarks(self):
        params = CorpusParams(rotation_deg=0.0, noise=0.0, max_clutter=0)
        sample = generate_synthetic_corpus(3, 1, params)[0]
        box, lms = sample.faces[0]
        x, y, w, h = box
        center = np.array([x + w / 2, y + h / 2])
        size = h / (2 * 0.48)  # invert the ellipse bbox at zero rotation
        np.testing.assert_allclose(lms, center + size * GLYPH_LANDMARKS, atol=1e-9)

    def test_landmarks_inside_box(self):
        for sample in generate_synthetic_corpus(11, 30):
            for box, lms in sample.faces:
                x, y, w, h = box
                assert np.all(lms[:, 0] >= x) and np.all(lms[:, 0] <= x + w)
                assert np.all(lms[:, 1] >= y) and np.all(lms[:, 1] <= y + h)

    def test_box_support_iou(self):
        """Bounding box of the rendered pixel support matches the analytic
        ground-truth box."""
        rng = np.random.default_rng(5)
        for _ in range(10):
            size = rng.uniform(38, 64)
            angle = np.deg2rad(rng.uniform(-45, 45))
            canvas = np.zeros((128, 128))
            render_face(canvas, (64, 64), size, angle)
            ys, xs = np.nonzero(np.abs(canvas) > 0.02)
            support_box = (
                xs.min(),
                ys.min(),
                xs.max() - xs.min() + 1,
                ys.max() - ys.min() + 1,
            )
            assert iou(support_box, glyph_box((64, 64), size, angle)) >= 0.9

    def test_box_from_exact_landmarks_roundtrips(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            center = rng.uniform(30, 70, size=2)
            size = rng.uniform(38, 64)
            angle = np.deg2rad(rng.uniform(-45, 45))
            lms = glyph_landmarks(center, size, angle)
            recovered = box_from_landmarks(lms)
            expected = glyph_box(center, size, angle)
            np.testing.assert_allclose(recovered, expected, atol=1e-6)


class TestCorpusShape:
    def test_image_shape_and_range(self):
        params = CorpusParams(image_size=80)
        for sample in generate_synthetic_corpus(2, 5, params):
            assert sample.image.shape == (1, 80, 80)
            assert np.isfinite(sample.image).all()

    def test_no_face_rate(self):
        params = CorpusParams(no_face_rate=1.0)
        corpus = generate_synthetic_corpus(4, 5, params)
        assert all(len(s.faces) == 0 for s in corpus)

    def test_provenance_recorded(self):
        sample = generate_synthetic_corpus(13, 1)[0]
        assert isinstance(sample, AnnotatedSample)
        assert "seed=13" in sample.provenance

"""Metric tests against brute-force oracles.

The contour measure is the subtle one: the reference implementation below
matches boundary pixels by explicit Chebyshev distance, with no dilation
machinery shared with the production code.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskmotion import metrics


def brute_jaccard(pred, gt):
    inter = np.sum((pred > 0) & (gt > 0))
    union = np.sum((pred > 0) | (gt > 0))
    return 1.0 if union == 0 else inter / union


def brute_boundary(mask):
    mask = mask.astype(bool)
    H, W = mask.shape
    out = np.zeros_like(mask)
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < H and 0 <= xx < W) or not mask[yy, xx]:
                    out[y, x] = True
                    break
    return out


def brute_contour_f(pred, gt, tolerance=1):
    pb = np.argwhere(brute_boundary(pred))
    gb = np.argwhere(brute_boundary(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0

    def matched(points, targets):
        hits = 0
        for p in points:
            cheb = np.max(np.abs(targets - p), axis=1)
            if cheb.min() <= tolerance:
                hits += 1
        return hits

    precision = matched(pb, gb) / len(pb)
    recall = matched(gb, pb) / len(gb)
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def random_mask(rng, h, w, p):
    return (rng.random((h, w)) < p).astype(np.uint8)


class TestJaccard:
    def test_against_brute_force(self, rng):
        for _ in range(200):
            h, w = rng.integers(1, 17, size=2)
            a = random_mask(rng, h, w, rng.uniform(0, 1))
            b = random_mask(rng, h, w, rng.uniform(0, 1))
            assert metrics.jaccard(a, b) == brute_jaccard(a, b)

    def test_edge_cases(self):
        empty = np.zeros((4, 4), dtype=np.uint8)
        full = np.ones((4, 4), dtype=np.uint8)
        assert metrics.jaccard(empty, empty) == 1.0
        assert metrics.jaccard(full, full) == 1.0
        assert metrics.jaccard(full, empty) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError, match="binary"):
            metrics.jaccard(np.full((2, 2), 2), np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(ValueError, match="differ"):
            metrics.jaccard(np.zeros((2, 2), dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8))


class TestBoundary:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), h=st.integers(1, 12), w=st.integers(1, 12))
    def test_against_brute_force(self, seed, h, w):
        rng = np.random.default_rng(seed)
        mask = random_mask(rng, h, w, 0.5)
        assert np.array_equal(metrics.boundary_map(mask), brute_boundary(mask))

    def test_edge_pixels_are_boundary(self):
        mask = np.ones((3, 3), dtype=np.uint8)
        expected = np.ones((3, 3), dtype=bool)
        expected[1, 1] = False
        assert np.array_equal(metrics.boundary_map(mask), expected)

    def test_requires_single_frame(self):
        with pytest.raises(ValueError, match="single"):
            metrics.boundary_map(np.zeros((2, 3, 3), dtype=np.uint8))


class TestContourF:
    def test_against_brute_force_random(self, rng):
        for _ in range(200):
            h, w = rng.integers(1, 17, size=2)
            tol = int(rng.integers(0, 3))
            a = random_mask(rng, h, w, rng.uniform(0.1, 0.9))
            b = random_mask(rng, h, w, rng.uniform(0.1, 0.9))
            got = metrics.contour_f(a, b, tol)
            want = brute_contour_f(a, b, tol)
            assert got == pytest.approx(want, abs=1e-9), (a.tolist(), b.tolist(), tol)

    def test_empty_conventions(self):
        empty = np.zeros((5, 5), dtype=np.uint8)
        blob = np.zeros((5, 5), dtype=np.uint8)
        blob[2, 2] = 1
        assert metrics.contour_f(empty, empty) == 1.0
        assert metrics.contour_f(blob, empty) == 0.0
        assert metrics.contour_f(empty, blob) == 0.0

    def test_identical_masks_score_one(self, rng):
        for _ in range(20):
            m = random_mask(rng, 9, 9, 0.4)
            assert metrics.contour_f(m, m, 1) == 1.0

    def test_one_pixel_shift_within_tolerance(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        a[2:5, 2:5] = 1
        b = np.roll(a, 1, axis=1)
        assert metrics.contour_f(a, b, tolerance=1) == 1.0
        assert metrics.contour_f(a, b, tolerance=0) < 1.0

    def test_negative_tolerance_rejected(self):
        m = np.ones((3, 3), dtype=np.uint8)
        with pytest.raises(ValueError, match="tolerance"):
            metrics.contour_f(m, m, -1)


class TestVideoAggregation:
    def test_jf_video_averages_frames(self):
        a = np.zeros((2, 6, 6), dtype=np.uint8)
        b = np.zeros((2, 6, 6), dtype=np.uint8)
        a[0, 1:4, 1:4] = 1
        b[0, 1:4, 1:4] = 1  # frame 0 identical: J=F=1
        a[1, 0:2, 0:2] = 1  # frame 1: a nonempty, b empty: J=F=0
        out = metrics.jf_video(a, b)
        assert out == {"J": 0.5, "F": 0.5, "JF": 0.5}

    def test_jf_frame_mean(self, rng):
        a = random_mask(rng, 8, 8, 0.3)
        b = random_mask(rng, 8, 8, 0.3)
        j, f, jf = metrics.jf_frame(a, b)
        assert jf == pytest.approx(0.5 * (j + f))

    def test_mask_following_iou_is_mean_jaccard(self, rng):
        ext = np.stack([random_mask(rng, 8, 8, 0.3) for _ in range(4)])
        ctl = np.stack([random_mask(rng, 8, 8, 0.3) for _ in range(4)])
        want = np.mean([metrics.jaccard(ext[i], ctl[i]) for i in range(4)])
        assert metrics.mask_following_iou(ext, ctl) == pytest.approx(want)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            metrics.jf_video(np.zeros((2, 4, 4), dtype=np.uint8), np.zeros((3, 4, 4), dtype=np.uint8))


class TestExtraction:
    def test_strict_threshold(self):
        video = np.zeros((1, 2, 2, 3), dtype=np.uint8)
        video[0, 0, 0] = (255, 0, 0)
        got = metrics.extract_subject_masks(video, (255, 0, 0), threshold=0.0)
        assert got.sum() == 0  # strictly-less comparison selects nothing at 0
        got = metrics.extract_subject_masks(video, (255, 0, 0), threshold=1.0)
        assert got[0, 0, 0] == 1 and got.sum() == 1

    def test_distance_semantics(self):
        video = np.zeros((1, 1, 2, 3), dtype=np.uint8)
        video[0, 0, 0] = (100, 0, 0)
        video[0, 0, 1] = (40, 0, 0)
        got = metrics.extract_subject_masks(video, (100, 0, 0), threshold=61.0)
        assert got[0, 0, 0] == 1 and got[0, 0, 1] == 1
        got = metrics.extract_subject_masks(video, (100, 0, 0), threshold=60.0)
        assert got[0, 0, 1] == 0

    def test_validation(self):
        with pytest.raises(ValueError, match="video"):
            metrics.extract_subject_masks(np.zeros((2, 2, 3), dtype=np.uint8), (0, 0, 0))
        with pytest.raises(ValueError, match="RGB"):
            metrics.extract_subject_masks(np.zeros((1, 2, 2, 3), dtype=np.uint8), (0, 0))


class TestPSNR:
    def test_identical_is_infinite(self, rng):
        a = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
        assert metrics.psnr(a, a) == float("inf")

    def test_known_value(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.full((8, 8), 128, dtype=np.uint8)
        # mse = 128^2, psnr = 20 log10(255/128)
        assert metrics.psnr(a, b) == pytest.approx(20 * np.log10(255 / 128), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            metrics.psnr(np.zeros((2, 2)), np.zeros((3, 3)))


class TestSSIM:
    def test_identical_is_one(self, rng):
        a = rng.integers(0, 256, (12, 12, 3)).astype(np.uint8)
        assert metrics.ssim_frame(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_frames_closed_form(self):
        # Constant images have zero variance everywhere, so SSIM reduces to
        # the luminance term (2ab + c1) / (a^2 + b^2 + c1).
        a = np.full((16, 16), 100.0)
        b = np.full((16, 16), 150.0)
        c1 = (0.01 * 255.0) ** 2
        want = (2 * 100.0 * 150.0 + c1) / (100.0**2 + 150.0**2 + c1)
        assert metrics.ssim_frame(a, b) == pytest.approx(want, abs=1e-12)

    def test_symmetry_and_range(self, rng):
        for _ in range(10):
            a = rng.integers(0, 256, (10, 10)).astype(np.uint8)
            b = rng.integers(0, 256, (10, 10)).astype(np.uint8)
            s1 = metrics.ssim_frame(a, b)
            assert s1 == pytest.approx(metrics.ssim_frame(b, a), abs=1e-12)
            assert -1.0 <= s1 <= 1.0

    def test_video_averages_frames(self, rng):
        a = rng.integers(0, 256, (3, 9, 9, 3)).astype(np.uint8)
        b = rng.integers(0, 256, (3, 9, 9, 3)).astype(np.uint8)
        want = np.mean([metrics.ssim_frame(a[t], b[t]) for t in range(3)])
        assert metrics.ssim_video(a, b) == pytest.approx(want)

    def test_window_validation(self):
        a = np.zeros((8, 8))
        with pytest.raises(ValueError, match="odd"):
            metrics.ssim_frame(a, a, window=4)
        with pytest.raises(ValueError, match="smaller"):
            metrics.ssim_frame(np.zeros((4, 4)), np.zeros((4, 4)), window=7)
        with pytest.raises(ValueError, match="frames"):
            metrics.ssim_frame(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2)))

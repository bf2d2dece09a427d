import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freegaze import DegenerateLandmarkError
from freegaze.augment import (AugmentConfig, Box, Eye, Landmarks, adjust_brightness, augment_view,
                              color_distort, gaze_crop_resize, make_views, periocular_boxes,
                              sample_crop, to_grayscale)
from freegaze.sampler import Sample
from freegaze.synthgaze import SynthConfig, estimate_pupil_offset, make_subject, pupil_offset, render_image
from freegaze.sampler import GazeLabel


def lm_at(l, r, half=(20, 10)):
    return Landmarks(Eye(*l, *half), Eye(*r, *half))


def test_periocular_box_arithmetic():
    lm = lm_at((112, 100), (160, 100))
    left, _ = periocular_boxes(lm, AugmentConfig(), 224, 224)
    assert left == Box(72, 80, 152, 120)


def test_periocular_box_clipped_at_corner():
    lm = lm_at((2, 3), (160, 100))
    left, _ = periocular_boxes(lm, AugmentConfig(), 224, 224)
    assert (left.x0, left.y0) == (0, 0)
    assert left.width > 0 and left.height > 0


def test_periocular_scale_one_is_eye_bbox():
    lm = lm_at((50, 60), (100, 60), half=(7, 4))
    left, right = periocular_boxes(lm, AugmentConfig(periocular_scale=1.0), 224, 224)
    assert left == Box(43, 56, 57, 64)
    assert right == Box(93, 56, 107, 64)


def test_invalid_landmarks():
    with pytest.raises(DegenerateLandmarkError):
        periocular_boxes(lm_at((300, 10), (20, 10)), AugmentConfig(), 224, 224)
    with pytest.raises(DegenerateLandmarkError):
        periocular_boxes(Landmarks(Eye(10, 10, 0, 3), Eye(20, 10, 3, 3)), AugmentConfig(), 64, 64)


def _synth():
    cfg = SynthConfig()
    sp = make_subject(3, cfg)
    img = render_image(sp, GazeLabel(0.1, -0.2), cfg, np.random.default_rng(0))
    return cfg, sp, img


def test_full_crop_is_identity():
    _, sp, img = _synth()
    cfg = AugmentConfig(crop_area_range=(1.0, 1.0))
    out, lm = gaze_crop_resize(img, sp.landmarks, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)
    assert lm == sp.landmarks


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_view_contains_a_periocular_box(seed):
    _, sp, img = _synth()
    cfg = AugmentConfig()
    out, lm = gaze_crop_resize(img, sp.landmarks, cfg, np.random.default_rng(seed))
    h, w = out.shape[:2]
    frame = Box(0, 0, w, h)
    boxes = periocular_boxes_unclipped(lm, cfg)
    assert any(frame.contains(b, tol=1e-3) for b in boxes)


def periocular_boxes_unclipped(lm, cfg):
    return [Box(e.cx - e.hw * cfg.periocular_scale, e.cy - e.hh * cfg.periocular_scale,
                e.cx + e.hw * cfg.periocular_scale, e.cy + e.hh * cfg.periocular_scale) for e in lm.eyes]


def test_crop_hits_top_left_eyes():
    lm = lm_at((14, 14), (26, 20), half=(4, 3))
    cfg = AugmentConfig(crop_area_range=(0.4, 0.4))
    region = Box(0, 0, 40, 40)
    for seed in range(1000):
        crop = sample_crop(lm, cfg, 224, 224, np.random.default_rng(seed))
        assert crop.x0 < region.x1 and crop.y0 < region.y1
        boxes = periocular_boxes(lm, cfg, 224, 224)
        assert any(crop.contains(b) for b in boxes)


def test_fallback_when_rejection_exhausted():
    # aspect range that never fits forces the deterministic fallback
    lm = lm_at((20, 20), (200, 200), half=(5, 5))
    cfg = AugmentConfig(crop_area_range=(0.4, 0.4), aspect_range=(50.0, 60.0), max_attempts=5)
    crop = sample_crop(lm, cfg, 224, 224, np.random.default_rng(0))
    boxes = periocular_boxes(lm, cfg, 224, 224)
    assert any(crop.contains(b) for b in boxes)


def test_color_identity_at_zero_strength(rng):
    img = rng.uniform(0, 255, size=(32, 32, 3)).astype(np.float32)
    out = color_distort(img, AugmentConfig(color_strength=0.0, grayscale_prob=0.0), rng)
    np.testing.assert_array_equal(out, img)


def test_grayscale_branch(rng):
    img = rng.uniform(0, 255, size=(32, 32, 3)).astype(np.float32)
    out = color_distort(img, AugmentConfig(grayscale_prob=1.0), rng)
    assert np.all(out[..., 0] == out[..., 1]) and np.all(out[..., 1] == out[..., 2])
    g = to_grayscale(img)
    assert g.shape == img.shape


def test_brightness_half():
    img = np.full((16, 16, 3), 200, np.float32)
    np.testing.assert_allclose(adjust_brightness(img, 0.5), 100.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 2))
def test_color_distort_keeps_geometry_and_range(seed, s):
    img = np.random.default_rng(seed).uniform(0, 255, size=(16, 32, 3)).astype(np.float32)
    out = color_distort(img, AugmentConfig(color_strength=s), np.random.default_rng(seed))
    assert out.shape == img.shape and out.dtype == np.float32
    assert out.min() >= 0 and out.max() <= 255


def _sample():
    cfg, sp, img = _synth()
    return Sample(img, sp.subject_id, sp.landmarks)


def test_make_views_same_seeds_equal():
    s = _sample()
    a, b = make_views(s, AugmentConfig(), np.random.default_rng(0), seeds=(11, 11))
    np.testing.assert_array_equal(a, b)


def test_make_views_identity_config():
    s = _sample()
    a, b = make_views(s, AugmentConfig.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(a, s.image)
    np.testing.assert_array_equal(b, s.image)


def test_make_views_deterministic():
    s = _sample()
    v1 = make_views(s, AugmentConfig(), np.random.default_rng(7))
    v2 = make_views(s, AugmentConfig(), np.random.default_rng(7))
    for a, b in zip(v1, v2):
        np.testing.assert_array_equal(a, b)


def test_default_views_on_synthetic_sample():
    s = _sample()
    cfg = AugmentConfig()
    seeds = np.random.default_rng(7).integers(0, 2**63, size=2)
    for seed in seeds:
        rng = np.random.default_rng(int(seed))
        view, lm = augment_view(s.image, s.landmarks, cfg, rng)
        frame = Box(0, 0, view.shape[1], view.shape[0])
        assert any(frame.contains(b, tol=1e-3) for b in periocular_boxes_unclipped(lm, cfg))


def test_make_views_requires_landmarks():
    s = _sample()
    s.landmarks = None
    with pytest.raises(DegenerateLandmarkError):
        make_views(s, AugmentConfig(), np.random.default_rng(0))


def test_crop_preserves_pupil_signal():
    cfg = SynthConfig()
    aug = AugmentConfig()
    worst = 0.0
    for k in range(40):
        sp = make_subject(k % 8, cfg)
        rng = np.random.default_rng(k)
        gaze = GazeLabel(*rng.uniform(-cfg.max_angle, cfg.max_angle, size=2))
        img = render_image(sp, gaze, cfg)
        view, lm = gaze_crop_resize(img, sp.landmarks, aug, rng)
        frame = Box(0, 0, view.shape[1], view.shape[0])
        for eye_src, eye in zip(sp.landmarks.eyes, lm.eyes):
            box = periocular_boxes_unclipped(Landmarks(eye, eye), aug)[0]
            if not frame.contains(box, tol=1e-3):
                continue
            ox, oy = pupil_offset(eye_src, gaze, cfg.max_angle)
            sx, sy = eye.hw / eye_src.hw, eye.hh / eye_src.hh
            ex, ey = estimate_pupil_offset(view, eye)
            worst = max(worst, np.hypot(ex - ox * sx, ey - oy * sy))
    assert worst <= 1.5

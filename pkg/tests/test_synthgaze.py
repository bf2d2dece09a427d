import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from freegaze import DimensionError, GeometryError
from freegaze.sampler import GazeLabel, load_dataset
from freegaze.synthgaze import (PUPIL_GAIN, SynthConfig, estimate_pupil_offset, generate_dataset,
                                generate_samples, make_subject, pupil_offset, render_image,
                                render_sample)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_zero_gaze_centres_pupils():
    cfg = SynthConfig()
    sp = make_subject(0, cfg)
    img = render_image(sp, GazeLabel(0.0, 0.0), cfg)
    for eye in sp.landmarks.eyes:
        assert pupil_offset(eye, GazeLabel(0, 0), cfg.max_angle) == (0.0, 0.0)
        ox, oy = estimate_pupil_offset(img, eye)
        assert math.hypot(ox, oy) < 0.15


def test_full_yaw_offset():
    cfg = SynthConfig()
    sp = make_subject(1, cfg)
    g = GazeLabel(0.0, cfg.max_angle)
    for eye in sp.landmarks.eyes:
        ox, oy = pupil_offset(eye, g, cfg.max_angle)
        assert ox == pytest.approx(0.8 * eye.hw)
        assert oy == 0.0
        ex, ey = estimate_pupil_offset(render_image(sp, g, cfg), eye)
        assert ex == pytest.approx(ox, abs=0.3) and ey == pytest.approx(0, abs=0.3)


def test_render_is_deterministic():
    cfg = SynthConfig()
    sp = make_subject(2, cfg)
    g = GazeLabel(0.1, 0.2)
    a = render_sample(sp, g, np.random.default_rng(5), cfg)
    b = render_sample(sp, g, np.random.default_rng(5), cfg)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.landmarks == sp.landmarks and a.gaze == g


def test_out_of_range_gaze_is_rejected():
    cfg = SynthConfig()
    with pytest.raises(GeometryError):
        render_image(make_subject(0, cfg), GazeLabel(0.0, 1.5 * cfg.max_angle), cfg)


def test_config_validation():
    with pytest.raises(DimensionError):
        SynthConfig(size=60)
    with pytest.raises(ValueError):
        SynthConfig(subjects=0)


def test_generate_counts(tmp_path):
    cfg = SynthConfig(subjects=16, per_subject=200, seed=7, size=32)
    ds = generate_dataset(cfg, tmp_path)
    assert len(ds) == 3200
    dirs = [p for p in tmp_path.iterdir() if p.is_dir()]
    assert len(dirs) == 16
    lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 3200
    rec = json.loads(lines[0])
    assert set(rec) >= {"image", "subject", "left_eye", "right_eye", "gaze"}
    assert set(rec["left_eye"]) == {"cx", "cy", "hw", "hh"}
    splits = {json.loads(l)["split"] for l in lines}
    assert splits == {"pretrain", "calibration"}


def test_regenerate_is_byte_identical(tmp_path):
    cfg = SynthConfig(subjects=3, per_subject=5, calibration_subjects=1, seed=7)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_disk_roundtrip_matches_memory(tmp_path):
    cfg = SynthConfig(subjects=2, per_subject=4, calibration_subjects=1, seed=3)
    mem = generate_dataset(cfg, tmp_path)
    disk = load_dataset(tmp_path)
    assert [s.name for s in disk.samples] == [s.name for s in mem.samples]
    for a, b in zip(mem.samples, disk.samples):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.landmarks == b.landmarks and a.gaze == b.gaze and a.split == b.split


def test_disjoint_seeds_give_distinct_subjects():
    prints = set()
    for seed in range(5):
        cfg = SynthConfig(seed=seed)
        for i in range(8):
            prints.add(make_subject(i, cfg).fingerprint())
    assert len(prints) == 40


def test_gaze_identifiable_by_least_squares():
    cfg = SynthConfig()
    rng = np.random.default_rng(0)
    for si in range(4):
        sp = make_subject(si, cfg)
        gazes = rng.uniform(-cfg.max_angle, cfg.max_angle, size=(60, 2))
        feats = []
        for p, y in gazes:
            img = render_image(sp, GazeLabel(p, y), cfg)
            offs = [estimate_pupil_offset(img, e) for e in sp.landmarks.eyes]
            feats.append([*offs[0], *offs[1], 1.0])
        feats = np.array(feats)
        coef, *_ = np.linalg.lstsq(feats, gazes, rcond=None)
        resid = np.degrees(np.abs(feats @ coef - gazes))
        assert resid.max() < 1.0


def test_only_pupils_depend_on_gaze():
    cfg = SynthConfig()
    sp = make_subject(4, cfg)
    a = render_image(sp, GazeLabel(-0.3, 0.2), cfg)
    b = render_image(sp, GazeLabel(0.3, -0.4), cfg)
    diff = np.any(a != b, axis=-1)
    ys, xs = np.nonzero(diff)
    assert len(ys) > 0
    inside = np.zeros_like(diff)
    for e in sp.landmarks.eyes:
        yy, xx = np.mgrid[:cfg.size, :cfg.size] + 0.5
        inside |= (np.abs(xx - e.cx) <= e.hw + 1) & (np.abs(yy - e.cy) <= e.hh + 1)
    assert not np.any(diff & ~inside)


def test_eyes_inside_face_and_image():
    cfg = SynthConfig()
    for i in range(30):
        sp = make_subject(i, cfg)
        fx, fy, rx, ry = sp.face
        for e in sp.landmarks.eyes:
            assert ((e.cx + e.hw - fx) / rx) ** 2 + ((e.cy - fy) / ry) ** 2 <= 1
            assert 0 <= e.cx - e.hw and e.cx + e.hw <= cfg.size

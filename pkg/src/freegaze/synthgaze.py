"""Deterministic synthetic faces whose only gaze-dependent pixels are the pupils.

Each subject is a fixed drawing (face ellipse, skin tone, eyebrows, nose and
mouth marks, iris colour); gaze moves the iris/pupil disc linearly inside each
eye. Shapes are anti-aliased by analytic edge coverage so pupil positions are
recoverable to sub-pixel accuracy.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import DimensionError, GeometryError
from .augment import Eye, Landmarks
from .imagecore import save_png
from .sampler import ANNOTATIONS, Dataset, GazeLabel, Sample, annotation_record

PUPIL_GAIN = 0.8  # pupil travel at full range, as a fraction of the eye half-extent


@dataclass
class SynthConfig:
    size: int = 64
    subjects: int = 16
    per_subject: int = 200
    calibration_subjects: int = 4
    max_angle_deg: float = 25.0
    noise_sigma: float = 2.0
    seed: int = 7

    def __post_init__(self):
        if self.size < 16 or self.size % 16:
            raise DimensionError(f"image size {self.size} is not a multiple of 16")
        if self.subjects < 1 or self.per_subject < 1:
            raise ValueError("subjects and per_subject must be >= 1")
        if not 0 <= self.calibration_subjects <= self.subjects:
            raise ValueError("calibration_subjects must be within 0..subjects")
        if not 0 < self.max_angle_deg < 90:
            raise ValueError("max_angle_deg must be in (0, 90)")

    @property
    def max_angle(self) -> float:
        return math.radians(self.max_angle_deg)


@dataclass
class Glyph:
    kind: str  # "rect" | "ellipse"
    cx: float
    cy: float
    rx: float
    ry: float
    color: tuple


@dataclass
class SubjectParams:
    subject_id: str
    background: tuple
    skin: tuple
    face: tuple  # cx, cy, rx, ry
    left_eye: Eye
    right_eye: Eye
    iris_color: tuple
    iris_ratio: float  # iris radius / eye half-height
    glyphs: list = field(default_factory=list)
    gain_range: tuple = (0.85, 1.15)

    @property
    def landmarks(self) -> Landmarks:
        return Landmarks(self.left_eye, self.right_eye)

    def fingerprint(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def make_subject(index: int, cfg: SynthConfig) -> SubjectParams:
    rng = np.random.default_rng([cfg.seed, index, 0xFACE])
    s = cfg.size
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    face = (s * u(0.47, 0.53), s * u(0.48, 0.54), s * u(0.36, 0.45), s * u(0.42, 0.48))
    eye_y = face[1] - face[3] * u(0.15, 0.3)
    sep = s * u(0.17, 0.2)
    hw, hh = s * u(0.12, 0.14), s * u(0.07, 0.085)
    left = Eye(face[0] - sep, eye_y, hw, hh)
    right = Eye(face[0] + sep, eye_y + s * u(-0.01, 0.01), hw * u(0.95, 1.05), hh * u(0.95, 1.05))
    skin = tuple(float(c) for c in rng.uniform([90, 60, 40], [240, 200, 170]))
    background = tuple(float(c) for c in rng.uniform(20, 235, size=3))
    glyphs = []
    # eyebrows
    for eye in (left, right):
        glyphs.append(Glyph("rect", eye.cx + s * u(-0.02, 0.02), eye.cy - eye.hh * u(2.1, 2.8),
                            eye.hw * u(0.8, 1.2), s * u(0.012, 0.03),
                            tuple(float(c) for c in rng.uniform(60, 130, size=3))))
    # nose and mouth marks, plus an identity mark somewhere on the cheek/forehead
    nose_color = tuple(float(c) * 0.75 for c in skin)
    glyphs.append(Glyph(rng.choice(["rect", "ellipse"]), face[0] + s * u(-0.03, 0.03),
                        face[1] + face[3] * u(0.1, 0.3), s * u(0.03, 0.07), s * u(0.04, 0.09), nose_color))
    glyphs.append(Glyph("ellipse", face[0] + s * u(-0.04, 0.04), face[1] + face[3] * u(0.5, 0.7),
                        s * u(0.08, 0.16), s * u(0.02, 0.05),
                        tuple(float(c) for c in rng.uniform([120, 30, 30], [220, 110, 110]))))
    glyphs.append(Glyph(rng.choice(["rect", "ellipse"]), face[0] + face[2] * u(-0.6, 0.6),
                        face[1] + face[3] * rng.choice([u(-0.8, -0.6), u(0.1, 0.3)]),
                        s * u(0.02, 0.05), s * u(0.02, 0.05),
                        tuple(float(c) for c in rng.uniform(60, 255, size=3))))
    sp = SubjectParams(
        subject_id=f"s{index:03d}",
        background=background,
        skin=skin,
        face=face,
        left_eye=left,
        right_eye=right,
        iris_color=tuple(float(c) for c in rng.uniform([90, 90, 70], [180, 190, 170])),
        iris_ratio=u(0.75, 0.9),
        glyphs=glyphs,
        gain_range=(u(0.8, 0.9), u(1.1, 1.2)),
    )
    _check_subject(sp, cfg)
    return sp


def _check_subject(sp: SubjectParams, cfg: SynthConfig) -> None:
    fx, fy, frx, fry = sp.face
    for eye in (sp.left_eye, sp.right_eye):
        for dx, dy in ((eye.hw, 0), (-eye.hw, 0), (0, eye.hh), (0, -eye.hh)):
            if ((eye.cx + dx - fx) / frx) ** 2 + ((eye.cy + dy - fy) / fry) ** 2 > 1:
                raise GeometryError(f"{sp.subject_id}: eye outside face")
            if not (0 <= eye.cx + dx <= cfg.size and 0 <= eye.cy + dy <= cfg.size):
                raise GeometryError(f"{sp.subject_id}: eye outside image")


SUPERSAMPLE = 4


def _grid(size, ss=SUPERSAMPLE):
    c = (np.arange(size * ss) + 0.5) / ss
    return np.meshgrid(c, c)  # sub-pixel sample centres in image coordinates


def _ellipse_coverage(xs, ys, cx, cy, rx, ry, ss=SUPERSAMPLE):
    r = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
    return np.clip((1.0 - r) * min(rx, ry) * ss + 0.5, 0.0, 1.0)


def _rect_coverage(xs, ys, cx, cy, rx, ry, ss=SUPERSAMPLE):
    ax = np.clip((rx - np.abs(xs - cx)) * ss + 0.5, 0.0, 1.0)
    ay = np.clip((ry - np.abs(ys - cy)) * ss + 0.5, 0.0, 1.0)
    return ax * ay


def _paint(canvas, cover, color):
    canvas += cover[..., None] * (np.asarray(color) - canvas)


def pupil_offset(eye: Eye, gaze: GazeLabel, max_angle: float) -> tuple[float, float]:
    return (
        PUPIL_GAIN * eye.hw * gaze.yaw / max_angle,
        PUPIL_GAIN * eye.hh * gaze.pitch / max_angle,
    )


def render_image(sp: SubjectParams, gaze: GazeLabel, cfg: SynthConfig, rng=None) -> np.ndarray:
    """Render one face; ``rng=None`` gives the noiseless, unit-gain image."""
    s = cfg.size
    xs, ys = _grid(s)
    img = np.empty((s * SUPERSAMPLE, s * SUPERSAMPLE, 3))
    img[:] = sp.background
    _paint(img, _ellipse_coverage(xs, ys, *sp.face), sp.skin)
    for g in sp.glyphs:
        cov = (_rect_coverage if g.kind == "rect" else _ellipse_coverage)(xs, ys, g.cx, g.cy, g.rx, g.ry)
        _paint(img, cov, g.color)
    for eye in (sp.left_eye, sp.right_eye):
        ox, oy = pupil_offset(eye, gaze, cfg.max_angle)
        if abs(ox) > eye.hw or abs(oy) > eye.hh:
            raise GeometryError(f"pupil offset ({ox:.2f}, {oy:.2f}) leaves the eye")
        sclera = _ellipse_coverage(xs, ys, eye.cx, eye.cy, eye.hw, eye.hh)
        _paint(img, sclera, (240.0, 238.0, 232.0))
        r_iris = sp.iris_ratio * eye.hh
        iris = _ellipse_coverage(xs, ys, eye.cx + ox, eye.cy + oy, r_iris, r_iris)
        _paint(img, iris * sclera, sp.iris_color)
        r_pupil = 0.6 * r_iris
        pupil = _ellipse_coverage(xs, ys, eye.cx + ox, eye.cy + oy, r_pupil, r_pupil)
        _paint(img, pupil, (8.0, 8.0, 10.0))
    img = img.reshape(s, SUPERSAMPLE, s, SUPERSAMPLE, 3).mean(axis=(1, 3))
    if rng is not None:
        img *= rng.uniform(*sp.gain_range)
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0, 255).astype(np.float32)


def render_sample(sp: SubjectParams, gaze: GazeLabel, rng, cfg: SynthConfig, name: str = "",
                  split: str = "") -> Sample:
    img = render_image(sp, gaze, cfg, rng)
    return Sample(image=img, subject_id=sp.subject_id, landmarks=sp.landmarks, gaze=gaze,
                  name=name, split=split)


def estimate_pupil_offset(img: np.ndarray, eye: Eye, threshold: float = 80.0) -> tuple[float, float]:
    """Darkness-weighted centroid of the pupil relative to the eye centre.

    Only pixels darker than ``threshold`` (luma) contribute, inside a window
    just large enough to hold the pupil at full travel. A wider window can
    reach the neighbouring eye's pupil when the eyes sit close together.
    """
    h, w = img.shape[:2]
    r_max = 0.6 * eye.hh + 1.0  # largest pupil radius plus one pixel of anti-aliasing
    rx = PUPIL_GAIN * eye.hw + r_max
    ry = PUPIL_GAIN * eye.hh + r_max
    x0 = max(0, int(math.floor(eye.cx - rx)))
    x1 = min(w, int(math.ceil(eye.cx + rx)))
    y0 = max(0, int(math.floor(eye.cy - ry)))
    y1 = min(h, int(math.ceil(eye.cy + ry)))
    patch = np.asarray(img[y0:y1, x0:x1], dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    wgt = np.clip(threshold - patch, 0, None)
    if wgt.sum() == 0:
        return float("nan"), float("nan")
    ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
    return (
        float((wgt * xs).sum() / wgt.sum() - eye.cx),
        float((wgt * ys).sum() / wgt.sum() - eye.cy),
    )


def subject_split(index: int, cfg: SynthConfig) -> str:
    return "calibration" if index >= cfg.subjects - cfg.calibration_subjects else "pretrain"


def generate_samples(cfg: SynthConfig) -> Dataset:
    """In-memory dataset, quantized to 8-bit levels exactly as written to disk."""
    samples = []
    for si in range(cfg.subjects):
        sp = make_subject(si, cfg)
        split = subject_split(si, cfg)
        grng = np.random.default_rng([cfg.seed, si, 0x6A2E])
        angles = grng.uniform(-cfg.max_angle, cfg.max_angle, size=(cfg.per_subject, 2))
        for k in range(cfg.per_subject):
            gaze = GazeLabel(float(angles[k, 0]), float(angles[k, 1]))
            rng = np.random.default_rng([cfg.seed, si, k])
            s = render_sample(sp, gaze, rng, cfg, name=f"{sp.subject_id}/{k:05d}.png", split=split)
            s.image = np.rint(s.image).astype(np.float32)
            samples.append(s)
    return Dataset(samples)


def generate_dataset(cfg: SynthConfig, out_dir) -> Dataset:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_samples(cfg)
    for subject in ds.subjects:
        (out / subject).mkdir(exist_ok=True)
    with open(out / ANNOTATIONS, "w", encoding="utf-8", newline="\n") as fh:
        for s in ds.samples:
            save_png(s.image, out / s.name)
            fh.write(json.dumps(annotation_record(s), sort_keys=True) + "\n")
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return ds

"""Gaze-preserving augmentation: periocular-aware crop/resize and colour distortion.

Every random decision draws from an explicit ``numpy.random.Generator`` so a
view is a pure function of (image, landmarks, config, stream).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import DegenerateLandmarkError
from .imagecore import bilinear_sample, check_image


@dataclass(frozen=True)
class Eye:
    cx: float
    cy: float
    hw: float
    hh: float

    def to_json(self):
        return {"cx": self.cx, "cy": self.cy, "hw": self.hw, "hh": self.hh}

    @classmethod
    def from_json(cls, d):
        return cls(float(d["cx"]), float(d["cy"]), float(d["hw"]), float(d["hh"]))


@dataclass(frozen=True)
class Landmarks:
    left: Eye
    right: Eye

    @property
    def eyes(self):
        return (self.left, self.right)

    def validate(self, img_w: int, img_h: int) -> None:
        for eye in self.eyes:
            if not (0 <= eye.cx < img_w and 0 <= eye.cy < img_h):
                raise DegenerateLandmarkError(f"eye centre ({eye.cx}, {eye.cy}) outside image")
            if eye.hw <= 0 or eye.hh <= 0:
                raise DegenerateLandmarkError("eye half-extents must be positive")

    def mapped(self, x0: float, y0: float, sx: float, sy: float) -> "Landmarks":
        """Apply x' = (x - x0) * sx, y' = (y - y0) * sy."""

        def f(e: Eye) -> Eye:
            return Eye((e.cx - x0) * sx, (e.cy - y0) * sy, e.hw * sx, e.hh * sy)

        return Landmarks(f(self.left), f(self.right))


@dataclass(frozen=True)
class Box:
    """Pixel rectangle [x0, x1) x [y0, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, other: "Box", tol: float = 1e-6) -> bool:
        return (
            self.x0 <= other.x0 + tol
            and self.y0 <= other.y0 + tol
            and other.x1 <= self.x1 + tol
            and other.y1 <= self.y1 + tol
        )

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0


@dataclass
class AugmentConfig:
    crop_area_range: tuple[float, float] = (0.4, 0.9)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    periocular_scale: float = 2.0
    color_strength: float = 1.0
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    grayscale_prob: float = 0.2
    max_attempts: int = 100

    def __post_init__(self):
        lo, hi = self.crop_area_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad crop_area_range {self.crop_area_range}")
        lo, hi = self.aspect_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        if not 0 <= self.grayscale_prob <= 1:
            raise ValueError("grayscale_prob must be a probability")
        if self.periocular_scale <= 0 or self.max_attempts < 1 or self.color_strength < 0:
            raise ValueError("periocular_scale, max_attempts and color_strength must be positive")
        self.crop_area_range = tuple(self.crop_area_range)
        self.aspect_range = tuple(self.aspect_range)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop_area_range=(1.0, 1.0), aspect_range=(1.0, 1.0),
                   color_strength=0.0, grayscale_prob=0.0)


def periocular_boxes(lm: Landmarks, cfg: AugmentConfig, img_w: int, img_h: int) -> tuple[Box, Box]:
    lm.validate(img_w, img_h)
    boxes = []
    for eye in lm.eyes:
        hw = eye.hw * cfg.periocular_scale
        hh = eye.hh * cfg.periocular_scale
        box = Box(
            max(0.0, eye.cx - hw),
            max(0.0, eye.cy - hh),
            min(float(img_w), eye.cx + hw),
            min(float(img_h), eye.cy + hh),
        )
        if box.width <= 0 or box.height <= 0:
            raise DegenerateLandmarkError(f"periocular box {box} is empty")
        boxes.append(box)
    return boxes[0], boxes[1]


def sample_crop(lm: Landmarks, cfg: AugmentConfig, img_w: int, img_h: int,
                rng: np.random.Generator) -> Box:
    """Rejection-sample a crop containing at least one periocular box."""
    boxes = periocular_boxes(lm, cfg, img_w, img_h)
    area = img_w * img_h
    log_lo, log_hi = math.log(cfg.aspect_range[0]), math.log(cfg.aspect_range[1])
    for _ in range(cfg.max_attempts):
        a = rng.uniform(*cfg.crop_area_range) * area
        r = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(a * r)))
        ch = int(round(math.sqrt(a / r)))
        if not (0 < cw <= img_w and 0 < ch <= img_h):
            continue
        x0 = int(rng.integers(0, img_w - cw + 1))
        y0 = int(rng.integers(0, img_h - ch + 1))
        crop = Box(x0, y0, x0 + cw, y0 + ch)
        if any(crop.contains(b) for b in boxes):
            return crop
    # smallest square crop, shifted into the image, around one eye's box
    box = boxes[int(rng.integers(0, 2))]
    side = int(round(math.sqrt(cfg.crop_area_range[0] * area)))
    cw = min(img_w, max(side, math.ceil(box.width)))
    ch = min(img_h, max(side, math.ceil(box.height)))
    cx = (box.x0 + box.x1) / 2
    cy = (box.y0 + box.y1) / 2
    x0 = int(np.clip(round(cx - cw / 2), 0, img_w - cw))
    y0 = int(np.clip(round(cy - ch / 2), 0, img_h - ch))
    x0 = int(min(x0, math.floor(box.x0)))
    y0 = int(min(y0, math.floor(box.y0)))
    x0 = int(max(x0, math.ceil(box.x1) - cw))
    y0 = int(max(y0, math.ceil(box.y1) - ch))
    return Box(x0, y0, x0 + cw, y0 + ch)


def gaze_crop_resize(img: np.ndarray, lm: Landmarks, cfg: AugmentConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, Landmarks]:
    img = check_image(img)
    h, w = img.shape[:2]
    crop = sample_crop(lm, cfg, w, h, rng)
    if (crop.x0, crop.y0, crop.x1, crop.y1) == (0, 0, w, h):
        return img.copy(), lm
    out = bilinear_sample(img, crop.x0, crop.y0, crop.x1, crop.y1, w, h)
    out = np.clip(out, 0, 255)
    return out, lm.mapped(crop.x0, crop.y0, w / crop.width, h / crop.height)


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# YIQ basis: hue rotation is a rotation of the (I, Q) plane
_RGB_TO_YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def luma(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def adjust_brightness(img, factor):
    if factor == 1:
        return img
    return np.clip(img * np.float32(factor), 0, 255)


def adjust_contrast(img, factor):
    if factor == 1:
        return img
    mean = np.float32(luma(img).mean())
    return np.clip(mean + np.float32(factor) * (img - mean), 0, 255)


def adjust_saturation(img, factor):
    if factor == 1:
        return img
    gray = luma(img)[..., None]
    return np.clip(gray + np.float32(factor) * (img - gray), 0, 255)


def adjust_hue(img, degrees):
    if degrees == 0:
        return img
    t = math.radians(degrees)
    rot = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
    m = (_YIQ_TO_RGB @ rot @ _RGB_TO_YIQ).astype(np.float32)
    return np.clip(img @ m.T, 0, 255)


def to_grayscale(img):
    return np.repeat(luma(img)[..., None], 3, axis=-1)


def color_distort(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    s = cfg.color_strength
    b = s * cfg.brightness
    c = s * cfg.contrast
    sat = s * cfg.saturation
    hue = s * cfg.hue * 180.0
    # draw every factor up front so the stream consumption is order-independent
    factors = [
        max(0.05, rng.uniform(1 - b, 1 + b)) if b > 0 else 1.0,
        max(0.0, rng.uniform(1 - c, 1 + c)) if c > 0 else 1.0,
        max(0.0, rng.uniform(1 - sat, 1 + sat)) if sat > 0 else 1.0,
        rng.uniform(-hue, hue) if hue > 0 else 0.0,
    ]
    ops = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)
    for k in rng.permutation(4):
        img = ops[k](img, factors[k])
    if cfg.grayscale_prob > 0 and rng.random() < cfg.grayscale_prob:
        img = to_grayscale(img)
    return np.clip(img, 0, 255).astype(np.float32, copy=False)


def augment_view(img, lm, cfg, rng):
    """Crop/resize then colour-distort; returns (view, mapped landmarks)."""
    view, lm2 = gaze_crop_resize(img, lm, cfg, rng)
    return color_distort(view, cfg, rng), lm2


def make_views(sample, cfg: AugmentConfig, rng: np.random.Generator, seeds=None):
    """Two independently augmented views of ``sample.image``.

    Each view runs on its own child stream seeded from ``rng`` (or from the
    explicit pair ``seeds``), so either view can be reproduced alone.
    """
    if sample.landmarks is None:
        raise DegenerateLandmarkError("sample has no landmarks")
    if seeds is None:
        seeds = rng.integers(0, 2**63, size=2)
    return tuple(
        augment_view(sample.image, sample.landmarks, cfg, np.random.default_rng(int(s)))[0]
        for s in seeds
    )

"""RGB images, BT.601 colour transform and 4:2:0 chroma subsampling.

Images are plain ``float32`` arrays of shape ``(H, W, 3)`` with values in
[0, 255]; nothing here re-quantizes to 8 bits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import DimensionError

# full-range JFIF coefficients
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=np.float64,
)
YCBCR_OFFSET = np.array([0.0, 128.0, 128.0])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)


@dataclass
class YCbCrPlanes:
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        h, w = self.y.shape
        if self.cb.shape != (h // 2, w // 2) or self.cr.shape != (h // 2, w // 2):
            raise DimensionError(
                f"chroma planes must be half of luma {self.y.shape}, got {self.cb.shape}/{self.cr.shape}"
            )


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an image array and return it as float32."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise DimensionError(f"image size {w}x{h} is not a multiple of 16")
    img = img.astype(np.float32, copy=False)
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 255:
        raise ValueError("pixel values must be finite and within [0, 255]")
    return img


def color_transform(rgb: np.ndarray) -> np.ndarray:
    """Per-pixel RGB -> YCbCr without subsampling; works on any (..., 3) array."""
    out = np.asarray(rgb, dtype=np.float64) @ RGB_TO_YCBCR.T + YCBCR_OFFSET
    return out.astype(np.float32)


def inverse_color_transform(ycc: np.ndarray) -> np.ndarray:
    out = (np.asarray(ycc, dtype=np.float64) - YCBCR_OFFSET) @ YCBCR_TO_RGB.T
    return out.astype(np.float32)


def subsample_420(plane: np.ndarray) -> np.ndarray:
    """2x2 box average; trailing axes beyond the first two are carried through."""
    h, w = plane.shape[:2]
    if h % 2 or w % 2:
        raise DimensionError(f"plane {w}x{h} cannot be halved")
    p = np.asarray(plane, dtype=np.float64)
    p = p.reshape(h // 2, 2, w // 2, 2, *plane.shape[2:]).mean(axis=(1, 3))
    return p.astype(np.float32)


def rgb_to_ycbcr(img: np.ndarray) -> YCbCrPlanes:
    img = check_image(img)
    ycc = color_transform(img)
    return YCbCrPlanes(
        y=ycc[..., 0].copy(),
        cb=subsample_420(ycc[..., 1]),
        cr=subsample_420(ycc[..., 2]),
    )


def bilinear_sample(img: np.ndarray, x0: float, y0: float, x1: float, y1: float,
                    new_w: int, new_h: int) -> np.ndarray:
    """Resample the region [x0, x1) x [y0, y1) of ``img`` onto a new_w x new_h grid.

    Output pixel centres map back to source coordinates with the half-pixel
    convention; samples outside the source are edge-clamped.
    """
    h, w = img.shape[:2]
    sx = (x1 - x0) / new_w
    sy = (y1 - y0) / new_h
    xs = x0 + (np.arange(new_w) + 0.5) * sx - 0.5
    ys = y0 + (np.arange(new_h) + 0.5) * sy - 0.5
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    xi = np.minimum(np.floor(xs).astype(np.intp), w - 2 if w > 1 else 0)
    yi = np.minimum(np.floor(ys).astype(np.intp), h - 2 if h > 1 else 0)
    fx = (xs - xi)[None, :, None]
    fy = (ys - yi)[:, None, None]
    src = np.asarray(img, dtype=np.float64)
    xi1 = np.minimum(xi + 1, w - 1)
    yi1 = np.minimum(yi + 1, h - 1)
    top = src[yi][:, xi] * (1 - fx) + src[yi][:, xi1] * fx
    bot = src[yi1][:, xi] * (1 - fx) + src[yi1][:, xi1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def resize_bilinear(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    img = check_image(img)
    if new_w < 16 or new_h < 16 or new_w % 16 or new_h % 16:
        raise DimensionError(f"target size {new_w}x{new_h} is not a multiple of 16")
    h, w = img.shape[:2]
    if (w, h) == (new_w, new_h):
        return img.copy()
    out = bilinear_sample(img, 0.0, 0.0, float(w), float(h), new_w, new_h)
    return np.clip(out, 0, 255)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32)


def save_png(img: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)

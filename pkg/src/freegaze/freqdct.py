"""Blockwise 8x8 DCT, zigzag channel ordering and low-frequency channel selection."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import DimensionError
from .imagecore import YCbCrPlanes

BLOCK = 8
LEVEL_SHIFT = 128.0


def _dct_matrix() -> np.ndarray:
    n = np.arange(BLOCK)
    k = n[:, None]
    c = np.cos(np.pi / BLOCK * (n[None, :] + 0.5) * k)
    s = np.full(BLOCK, 0.5)
    s[0] = np.sqrt(1.0 / BLOCK)
    return s[:, None] * c


DCT_MATRIX = _dct_matrix()


def _zigzag_table() -> np.ndarray:
    table = np.empty((BLOCK, BLOCK), dtype=np.intp)
    idx = 0
    for diag in range(2 * BLOCK - 1):
        rows = range(max(0, diag - BLOCK + 1), min(diag, BLOCK - 1) + 1)
        if diag % 2 == 0:
            rows = reversed(rows)
        for i in rows:
            table[i, diag - i] = idx
            idx += 1
    return table


ZIGZAG = _zigzag_table()
# ZIGZAG_ORDER[c] = flat (row-major) position of the c-th zigzag coefficient
ZIGZAG_ORDER = np.argsort(ZIGZAG.ravel())


def zigzag_index(i: int, j: int) -> int:
    if not (0 <= i < BLOCK and 0 <= j < BLOCK):
        raise IndexError(f"block position ({i}, {j}) outside 8x8")
    return int(ZIGZAG[i, j])


def zigzag_position(c: int) -> tuple[int, int]:
    if not 0 <= c < BLOCK * BLOCK:
        raise IndexError(f"zigzag index {c} outside 0..63")
    flat = int(ZIGZAG_ORDER[c])
    return divmod(flat, BLOCK)


def dct_block(b: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of one block, or of a stack (..., 8, 8)."""
    b = np.asarray(b, dtype=np.float64)
    return DCT_MATRIX @ b @ DCT_MATRIX.T


def idct_block(coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    return DCT_MATRIX.T @ c @ DCT_MATRIX


def _blocks(plane: np.ndarray) -> np.ndarray:
    """(H, W) plane -> (H/8, W/8, 8, 8) tiles."""
    h, w = plane.shape
    if h % BLOCK or w % BLOCK:
        raise DimensionError(f"plane {w}x{h} does not tile into 8x8 blocks")
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2)


def plane_coefficients(plane: np.ndarray) -> np.ndarray:
    """All 64 zigzag-ordered coefficients per block: (H/8, W/8, 64), float64."""
    tiles = _blocks(np.asarray(plane, dtype=np.float64) - LEVEL_SHIFT)
    coeffs = dct_block(tiles)
    flat = coeffs.reshape(*coeffs.shape[:2], BLOCK * BLOCK)
    return flat[..., ZIGZAG_ORDER]


def plane_from_coefficients(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`plane_coefficients`; missing trailing channels are zero."""
    rows, cols, ch = coeffs.shape
    full = np.zeros((rows, cols, BLOCK * BLOCK))
    full[..., ZIGZAG_ORDER[:ch]] = coeffs
    tiles = idct_block(full.reshape(rows, cols, BLOCK, BLOCK))
    return tiles.swapaxes(1, 2).reshape(rows * BLOCK, cols * BLOCK) + LEVEL_SHIFT


@dataclass
class DctTensor:
    """Selected coefficients; arrays are (rows, cols, channels) float32."""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        for name in ("y", "cb", "cr"):
            arr = getattr(self, name)
            if arr.ndim != 3 or not 1 <= arr.shape[2] <= 64:
                raise DimensionError(f"{name} coefficients have bad shape {arr.shape}")
        if self.cb.shape != self.cr.shape:
            raise DimensionError("cb and cr grids differ")

    @property
    def shapes(self):
        return self.y.shape, self.cb.shape, self.cr.shape


def _check_counts(cy: int, cc: int) -> None:
    if not (1 <= cy <= 64 and 1 <= cc <= 64):
        raise ValueError(f"channel counts must be in 1..64, got Cy={cy} Cc={cc}")


def image_to_dct(planes: YCbCrPlanes, cy: int = 6, cc: int = 3) -> DctTensor:
    _check_counts(cy, cc)
    return DctTensor(
        y=plane_coefficients(planes.y)[..., :cy].astype(np.float32),
        cb=plane_coefficients(planes.cb)[..., :cc].astype(np.float32),
        cr=plane_coefficients(planes.cr)[..., :cc].astype(np.float32),
    )


def retained_energy_fraction(planes: YCbCrPlanes, cy: int = 6, cc: int = 3) -> dict[str, float]:
    _check_counts(cy, cc)
    out = {}
    for name, keep in (("y", cy), ("cb", cc), ("cr", cc)):
        sq = plane_coefficients(getattr(planes, name)) ** 2
        total = sq.sum()
        out[name] = 1.0 if total == 0 else float(sq[..., :keep].sum() / total)
    return out


def batch_image_to_dct(images: np.ndarray, cy: int = 6, cc: int = 3):
    """Vectorized transform of a (B, H, W, 3) stack.

    Returns the stacked arrays ``(y, cbcr)`` the embedding network consumes:
    y is (B, H/8, W/8, cy) and cbcr is (B, H/16, W/16, 2*cc) with Cb channels first.
    """
    from .imagecore import color_transform

    _check_counts(cy, cc)
    imgs = np.asarray(images, dtype=np.float32)
    b, h, w, _ = imgs.shape
    if h % 16 or w % 16:
        raise DimensionError(f"image size {w}x{h} is not a multiple of 16")
    ycc = color_transform(imgs).astype(np.float64) - LEVEL_SHIFT
    chroma = ycc[..., 1:].reshape(b, h // 2, 2, w // 2, 2, 2).mean(axis=(2, 4))

    def coeffs(planes, keep):
        # planes: (B, H, W, C) -> (B, H/8, W/8, C, keep)
        bb, hh, ww, c = planes.shape
        t = planes.reshape(bb, hh // BLOCK, BLOCK, ww // BLOCK, BLOCK, c)
        t = np.einsum("in,bunvmc,jm->buvcij", DCT_MATRIX, t, DCT_MATRIX, optimize=True)
        t = t.reshape(bb, hh // BLOCK, ww // BLOCK, c, BLOCK * BLOCK)
        return t[..., ZIGZAG_ORDER[:keep]]

    y = coeffs(ycc[..., :1], cy)[:, :, :, 0, :]
    cbcr = coeffs(chroma, cc)
    cbcr = cbcr.reshape(*cbcr.shape[:3], 2 * cc)
    return y.astype(np.float32), cbcr.astype(np.float32)


MAGIC = b"FGD1"


def write_dct(t: DctTensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for arr in (t.y, t.cb, t.cr):
            fh.write(struct.pack("<3I", *arr.shape))
        for arr in (t.y, t.cb, t.cr):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_dct(path) -> DctTensor:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an FGD1 file")
    shapes = [struct.unpack_from("<3I", data, 4 + 12 * k) for k in range(3)]
    off = 4 + 36
    arrays = []
    for shp in shapes:
        n = int(np.prod(shp))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shp).astype(np.float32))
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    return DctTensor(*arrays)

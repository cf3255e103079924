"""Grayscale images, bilinear sampling and the image pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, TooSmallImageError

PYRAMID_LEVELS = 4
REC601 = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class GrayImage:
    """Row-major intensity image; ``data[v, u]`` is the pixel at column u, row v."""

    data: np.ndarray

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise InputError("gray image must be two-dimensional")
        if not np.all(np.isfinite(a)):
            raise InputError("image contains non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def intensities(self):
        return self.data.reshape(-1)


def rgb_to_gray(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * REC601[0] + rgb[..., 1] * REC601[1] + rgb[..., 2] * REC601[2]


def read_image(path):
    """Read an 8-bit grayscale or RGB(A) PNG as a GrayImage."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}", kind="missing-file")
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P"):
            return GrayImage(rgb_to_gray(np.asarray(im.convert("RGB"))))
        return GrayImage(np.asarray(im.convert("L"), dtype=np.float64))


def write_image(path, img):
    data = img.data if isinstance(img, GrayImage) else np.asarray(img)
    Image.fromarray(np.clip(np.rint(data), 0, 255).astype(np.uint8), mode="L").save(path)


def central_gradients(a):
    """Central-difference gradients (one-sided at the border)."""
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    # a single row or column has no gradient along that axis
    if a.shape[1] > 1:
        gx[:, 1:-1] = 0.5 * (a[:, 2:] - a[:, :-2])
        gx[:, 0] = a[:, 1] - a[:, 0]
        gx[:, -1] = a[:, -1] - a[:, -2]
    if a.shape[0] > 1:
        gy[1:-1, :] = 0.5 * (a[2:, :] - a[:-2, :])
        gy[0, :] = a[1, :] - a[0, :]
        gy[-1, :] = a[-1, :] - a[-2, :]
    return gx, gy


def downsample(a):
    """2x2 box filter; odd trailing rows/columns are dropped."""
    h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


@dataclass(frozen=True)
class PyramidImage:
    levels: tuple
    gradients: tuple  # per level: (H, W, 2) array of (d/du, d/dv)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, level):
        return self.levels[level]


def build_pyramid(img, levels=PYRAMID_LEVELS):
    if not isinstance(img, GrayImage):
        img = GrayImage(img)
    need = 2 ** (levels - 1)
    if img.width < need or img.height < need:
        raise TooSmallImageError(
            f"image {img.width}x{img.height} too small for {levels} pyramid levels"
        )
    imgs = [img]
    for _ in range(levels - 1):
        imgs.append(GrayImage(downsample(imgs[-1].data)))
    grads = []
    for im in imgs:
        gx, gy = central_gradients(im.data)
        g = np.stack([gx, gy], axis=-1)
        g.setflags(write=False)
        grads.append(g)
    return PyramidImage(tuple(imgs), tuple(grads))


def sample_points(a, uv):
    """Bilinear samples of array ``a`` at (N, 2) positions.

    Returns ``(values, gradients, valid)``. The gradient is the derivative
    of the bilinear surface, taken on the cell whose top-left corner is
    ``floor(uv)``. Positions must lie in ``[1, W-2] x [1, H-2]`` to be valid;
    invalid rows return zeros.
    """
    h, w = a.shape
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 1.0) & (u <= w - 2.0) & (v >= 1.0) & (v <= h - 2.0)
    uc = np.where(valid, u, 1.0)
    vc = np.where(valid, v, 1.0)
    u0 = np.floor(uc).astype(np.intp)
    v0 = np.floor(vc).astype(np.intp)
    fu = uc - u0
    fv = vc - v0
    i00 = a[v0, u0]
    i10 = a[v0, u0 + 1]
    i01 = a[v0 + 1, u0]
    i11 = a[v0 + 1, u0 + 1]
    top = i00 + fu * (i10 - i00)
    bot = i01 + fu * (i11 - i01)
    val = top + fv * (bot - top)
    gu = (1.0 - fv) * (i10 - i00) + fv * (i11 - i01)
    gv = bot - top
    val = np.where(valid, val, 0.0)
    grad = np.where(valid[:, None], np.stack([gu, gv], axis=1), 0.0)
    return val, grad, valid


def sample_bilinear(img, p):
    """Sample one position; returns ``(intensity, gradient)``.

    Raises ``InputError`` (kind ``out-of-bounds``) outside the valid area.
    """
    a = img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=float)
    val, grad, valid = sample_points(a, np.asarray(p, dtype=float)[None])
    if not valid[0]:
        raise InputError(f"sample position {tuple(p)} out of bounds", kind="out-of-bounds")
    return float(val[0]), grad[0]

"""Image pyramids and sub-pixel sampling.

Sampling accepts either a plain 2-D ndarray (bilinear interpolation, with
gradients taken from the interpolant so that sampled values and gradients
are mutually consistent) or any object exposing ``sample(x, y)`` /
``sample_with_grad(x, y)`` plus ``width`` / ``height`` attributes, which
lets tests substitute analytically-defined, infinitely-smooth images.

Pixel (x, y) = (column, row); a sample is valid for 0 <= x <= W-1 and
0 <= y <= H-1. NaN raster entries poison every sample whose bilinear
footprint touches them.
"""

from __future__ import annotations

import numpy as np


def build_pyramid(image, levels):
    """Factor-2 average-pooled pyramid; level dims are ceil(dims / 2^l)."""
    image = np.asarray(image, dtype=float)
    out = [image]
    for _ in range(1, levels):
        prev = out[-1]
        h, w = prev.shape
        if h % 2 or w % 2:
            prev = np.pad(prev, ((0, h % 2), (0, w % 2)), mode="edge")
        out.append(0.25 * (prev[0::2, 0::2] + prev[1::2, 0::2]
                           + prev[0::2, 1::2] + prev[1::2, 1::2]))
    return out


def central_gradients(image):
    """Per-pixel central differences (one-sided at the borders)."""
    image = np.asarray(image, dtype=float)
    gx = np.empty_like(image)
    gy = np.empty_like(image)
    gx[:, 1:-1] = 0.5 * (image[:, 2:] - image[:, :-2])
    gx[:, 0] = image[:, 1] - image[:, 0]
    gx[:, -1] = image[:, -1] - image[:, -2]
    gy[1:-1, :] = 0.5 * (image[2:, :] - image[:-2, :])
    gy[0, :] = image[1, :] - image[0, :]
    gy[-1, :] = image[-1, :] - image[-2, :]
    return gx, gy


def image_extent(img):
    if isinstance(img, np.ndarray):
        h, w = img.shape
        return w, h
    return img.width, img.height


def in_bounds_mask(img, x, y, margin=0.0):
    w, h = image_extent(img)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return ((x >= margin) & (x <= w - 1 - margin)
            & (y >= margin) & (y <= h - 1 - margin)
            & np.isfinite(x) & np.isfinite(y))


def _bilinear(img, x, y, want_grad):
    h, w = img.shape
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xs = np.clip(np.where(valid, x, 0.0), 0.0, w - 1.0)
    ys = np.clip(np.where(valid, y, 0.0), 0.0, h - 1.0)
    x0 = np.minimum(xs.astype(int), w - 2)
    y0 = np.minimum(ys.astype(int), h - 2)
    fx = xs - x0
    fy = ys - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    val = top + fy * (bot - top)
    valid = valid & np.isfinite(val)
    if not want_grad:
        return val, valid
    gx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = (1.0 - fx) * (i10 - i00) + fx * (i11 - i01)
    return val, gx, gy, valid


def sample(img, x, y):
    """Sub-pixel sample. Returns (value, valid_mask)."""
    if isinstance(img, np.ndarray):
        return _bilinear(img, x, y, want_grad=False)
    val = img.sample(x, y)
    return val, in_bounds_mask(img, x, y) & np.isfinite(val)


def sample_with_grad(img, x, y):
    """Sub-pixel sample plus spatial gradient of the sampled function.

    For ndarrays the gradient is the derivative of the bilinear
    interpolant inside the cell containing (x, y), so finite differences
    of sampled values reproduce it exactly away from cell boundaries.
    """
    if isinstance(img, np.ndarray):
        return _bilinear(img, x, y, want_grad=True)
    val, gx, gy = img.sample_with_grad(x, y)
    return val, gx, gy, in_bounds_mask(img, x, y) & np.isfinite(val)

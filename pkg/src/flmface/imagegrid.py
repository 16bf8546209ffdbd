"""Image arrays, normalized coordinates and a differentiable bilinear sampler.

Images are float64 arrays of shape ``(H, W, C)`` with values in ``[0, 1]``.
Locations are expressed in normalized coordinates ``(u, v)`` where
``(-1, -1)`` is the center of the top-left pixel and ``(1, 1)`` the center of
the bottom-right pixel. ``u`` runs along columns, ``v`` along rows.

Sampling outside the image clamps to the border pixel. Inside, each sample
location belongs to the half-open cell ``[x0, x0 + 1) x [y0, y0 + 1)``; the
last row/column of centers is attached to the preceding cell, so gradients are
single valued everywhere.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def check_image(img) -> np.ndarray:
    """Validate ``img`` and return it as a float64 ``(H, W, C)`` array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWx1 or HxWx3, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"image must be at least 2x2, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return arr


def pixel_to_norm(row: int, col: int, h: int, w: int) -> tuple[float, float]:
    """Map a pixel center to normalized ``(u, v)``."""
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside {h}x{w} image")
    if h < 2 or w < 2:
        raise ValueError("normalized coordinates need h, w >= 2")
    return 2.0 * col / (w - 1) - 1.0, 2.0 * row / (h - 1) - 1.0


def norm_to_pixel(u, v, h: int, w: int):
    """Inverse of :func:`pixel_to_norm`; returns fractional ``(row, col)``."""
    return (np.asarray(v) + 1.0) * 0.5 * (h - 1), (np.asarray(u) + 1.0) * 0.5 * (w - 1)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """Normalized ``(u, v)`` of every pixel center, row-major, shape ``(h*w, 2)``."""
    v, u = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def _cells(img: np.ndarray, points: np.ndarray):
    h, w = img.shape[:2]
    y, x = norm_to_pixel(points[..., 0], points[..., 1], h, w)
    # outside the frame the sample is constant, so the coordinate gradient vanishes
    inside_x = (x >= 0.0) & (x <= w - 1)
    inside_y = (y >= 0.0) & (y <= h - 1)
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    return fx, fy, i00, i01, i10, i11, inside_x, inside_y


def bilinear_sample(img, points) -> np.ndarray:
    """Sample ``img`` at normalized ``points`` (``(..., 2)``).

    Returns an array of shape ``points.shape[:-1] + (C,)``.
    """
    img = np.asarray(img, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    fx, fy, i00, i01, i10, i11, _, _ = _cells(img, points)
    top = i00 + fx * (i01 - i00)
    bottom = i10 + fx * (i11 - i10)
    return top + fy * (bottom - top)


def bilinear_sample_grad(img, points) -> np.ndarray:
    """Derivative of :func:`bilinear_sample` w.r.t. ``(u, v)``.

    Returns shape ``points.shape[:-1] + (C, 2)``; the last axis holds
    ``(d/du, d/dv)``.
    """
    img = np.asarray(img, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    h, w = img.shape[:2]
    fx, fy, i00, i01, i10, i11, inside_x, inside_y = _cells(img, points)
    d_dx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    d_dy = (1.0 - fx) * (i10 - i00) + fx * (i11 - i01)
    d_du = d_dx * (0.5 * (w - 1)) * inside_x[..., None]
    d_dv = d_dy * (0.5 * (h - 1)) * inside_y[..., None]
    return np.stack([d_du, d_dv], axis=-1)


def write_pnm(path, img) -> None:
    """Write a PGM (one channel) or PPM (three channels) binary image."""
    arr = check_image(img)
    h, w, c = arr.shape
    data = np.round(arr * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def _pnm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM with maxval 255 into an ``(H, W, C)`` float array."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pnm_tokens(raw, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValueError(f"{path}: only P5/P6 with maxval 255 are supported")
    c = 1 if magic == b"P5" else 3
    w, h = int(w), int(h)
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * c, offset=offset)
    return data.reshape(h, w, c).astype(np.float64) / 255.0

"""Procedural card-suit test images (spade, heart) at any resolution.

Rasterized from implicit curves with supersampling, so desk-scale fixtures
and paper-scale runs share one generator and need no bundled data.
"""

from __future__ import annotations

import numpy as np

__all__ = ["heart_image", "spade_image", "disk_image"]


def _raster(inside, size: int, oversample: int = 4, window: float = 1.4) -> np.ndarray:
    m = size * oversample
    ys = np.linspace(window, -window, m)
    xs = np.linspace(-window, window, m)
    X, Y = np.meshgrid(xs, ys)
    mask = inside(X, Y).astype(np.float64)
    img = mask.reshape(size, oversample, size, oversample).mean(axis=(1, 3))
    return img


def heart_image(size: int, oversample: int = 4) -> np.ndarray:
    """Classic implicit heart (x^2 + y^2 - 1)^3 <= x^2 y^3."""

    def inside(x, y):
        return (x**2 + y**2 - 1.0) ** 3 - (x**2) * (y**3) <= 0.0

    return _raster(inside, size, oversample)


def spade_image(size: int, oversample: int = 4) -> np.ndarray:
    """Upside-down heart with a flared stem at the bottom."""

    def inside(x, y):
        yy = -(y + 0.25) * 1.15
        xx = x * 1.15
        body = (xx**2 + yy**2 - 1.0) ** 3 - (xx**2) * (yy**3) <= 0.0
        stem = (np.abs(x) <= 0.08 + 0.22 * np.clip(-(y + 0.45), 0.0, None)) & (
            y <= -0.35
        ) & (y >= -1.25)
        return body | stem

    return _raster(inside, size, oversample)


def disk_image(size: int, radius: float = 0.7, oversample: int = 4) -> np.ndarray:
    def inside(x, y):
        return x**2 + y**2 <= radius**2

    return _raster(inside, size, oversample)

"""Grid containers and elementary image operators.

Scalar fields are plain 2D ``float64`` arrays indexed ``[row, column]``;
a point annotation addresses them as ``(x, y) = (column, row)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidField, ShapeError


@dataclass(frozen=True)
class PointAnnotation:
    x: int
    y: int
    target_id: int = 0

    def inside(self, shape) -> bool:
        h, w = shape
        return 0 <= self.x < w and 0 <= self.y < h


def as_field(values, name="field") -> np.ndarray:
    """Validate and convert ``values`` to a finite 2D float64 array."""
    f = np.asarray(values, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise InvalidField(f"{name} must be a nonempty 2D grid, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise InvalidField(f"{name} contains non-finite values")
    return f


def as_mask(values, name="mask") -> np.ndarray:
    m = np.asarray(values)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidField(f"{name} must be a nonempty 2D grid, got shape {m.shape}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise InvalidField(f"{name} must be binary")
        m = m.astype(bool)
    return m


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def normalize_field(f) -> np.ndarray:
    """Affine map onto [0, 1]; a constant field maps to zeros."""
    f = as_field(f)
    lo, hi = f.min(), f.max()
    if hi == lo:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def _axis_diff(f, axis):
    n = f.shape[axis]
    if n == 1:
        return np.zeros_like(f)
    # np.gradient: central differences inside, one-sided at the borders
    return np.gradient(f, axis=axis, edge_order=1)


def gradient_magnitude(image) -> np.ndarray:
    image = as_field(image, "image")
    gx = _axis_diff(image, 1)
    gy = _axis_diff(image, 0)
    return np.hypot(gx, gy)


def delta_field(shape, point: PointAnnotation) -> np.ndarray:
    u = np.zeros(shape, dtype=np.float64)
    u[point.y, point.x] = 1.0
    return u

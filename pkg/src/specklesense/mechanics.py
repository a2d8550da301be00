"""Indenter contact geometry and the force/depth relation of the soft slab."""

from __future__ import annotations

import enum
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter


class Shape(enum.Enum):
    NONE = "none"          # default cylindrical indenter
    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"

    @property
    def code(self) -> int:
        return _SHAPE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Shape":
        try:
            return _CODE_SHAPES[int(code)]
        except KeyError:
            raise ValueError(f"unknown shape code {code}") from None

    @classmethod
    def parse(cls, value) -> "Shape":
        if isinstance(value, Shape):
            return value
        return cls(str(value).lower())


_SHAPE_CODES = {Shape.NONE: 0, Shape.CIRCLE: 1, Shape.SQUARE: 2, Shape.TRIANGLE: 3}
_CODE_SHAPES = {v: k for k, v in _SHAPE_CODES.items()}


def flat_punch_profile(r, depth: float, radius: float):
    """Vertical surface displacement of a rigid flat punch at radial distance ``r``.

    Constant ``depth`` under the punch and ``depth * (2/pi) * arcsin(radius/r)``
    outside it.  ``r`` and ``radius`` share units; the result has the units of
    ``depth``.
    """
    r = np.asarray(r, dtype=float)
    ratio = np.divide(radius, r, out=np.ones_like(r), where=r > radius)
    outside = (2.0 / np.pi) * np.arcsin(np.minimum(ratio, 1.0))
    return depth * np.where(r <= radius, 1.0, outside)


def _footprint(shape: Shape, dx_mm, dy_mm, radius):
    """Indicator of a shaped indenter whose area equals a disc of ``radius``."""
    if shape is Shape.SQUARE:
        half = 0.5 * radius * np.sqrt(np.pi)
        return (np.abs(dx_mm) <= half) & (np.abs(dy_mm) <= half)
    if shape is Shape.TRIANGLE:
        # equilateral, centroid at the contact centre, apex towards +y
        side = np.sqrt(4.0 * np.pi * radius**2 / np.sqrt(3.0))
        inradius = side / (2.0 * np.sqrt(3.0))
        inside = dy_mm >= -inradius
        for angle in (np.pi / 6, 5 * np.pi / 6):
            nx, ny = np.cos(angle), np.sin(angle)
            inside &= nx * dx_mm + ny * dy_mm <= inradius
        return inside
    raise ValueError(f"no footprint for {shape}")


def shaped_displacement(xx, yy, depth, center_y, shape: Shape, radius, pixel, supersample=4):
    """Displacement map for square/triangle indenters on a regular grid.

    The equal-area footprint is rasterised with ``supersample`` sub-pixels per
    side (so sub-pixel moves of the contact centre change the map), blurred with
    a Gaussian of sigma ``radius/2`` and rescaled so its peak equals ``depth``.
    """
    if depth == 0:
        return np.zeros_like(xx, dtype=float)
    n = xx.shape[0]
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    cover = np.zeros(xx.shape, dtype=float)
    for oy in offsets:
        for ox in offsets:
            cover += _footprint(shape, xx + ox * pixel, yy + oy * pixel - center_y, radius)
    cover /= supersample**2
    blurred = gaussian_filter(cover, sigma=0.5 * radius / pixel, mode="constant")
    peak = blurred.max()
    if peak <= 0:
        return np.zeros((n, n))
    return depth * blurred / peak


# Quartic fitted (no constant term, so zero depth gives zero force) to the
# synthetic strain-stiffening loading curve F = 1.2 N * expm1(d/120um)/expm1(190/120)
# sampled at 107 points on [0, 212] um.  Lowest order first, c0 .. c4.
DEFAULT_FORCE_COEFFS = (0.0, 2.54966459e-03, 1.21693266e-05, 1.14952547e-08, 1.51654870e-10)
FORCE_FIT_RANGE = (0.0, 212.0)


class Force(NamedTuple):
    newtons: float
    extrapolated: bool


def synthetic_loading_curve(depth):
    depth = np.asarray(depth, dtype=float)
    return 1.2 * np.expm1(depth / 120.0) / np.expm1(190.0 / 120.0)


def fit_force_polynomial(depths, forces):
    """Least-squares quartic through the origin; returns ``(c0, ..., c4)`` and RMSE."""
    depths = np.asarray(depths, dtype=float)
    forces = np.asarray(forces, dtype=float)
    basis = np.stack([depths**k for k in range(1, 5)], axis=1)
    coeffs, *_ = np.linalg.lstsq(basis, forces, rcond=None)
    rmse = float(np.sqrt(np.mean((basis @ coeffs - forces) ** 2)))
    return (0.0, *map(float, coeffs)), rmse


def force_from_depth(depth, coeffs=DEFAULT_FORCE_COEFFS, fit_range=FORCE_FIT_RANGE) -> Force:
    """Indentation force in newtons for a depth in micrometres."""
    if len(coeffs) != 5:
        raise ValueError("force polynomial needs exactly 5 coefficients")
    value = sum(c * depth**k for k, c in enumerate(coeffs))
    lo, hi = fit_range
    return Force(float(value), not (lo <= depth <= hi))

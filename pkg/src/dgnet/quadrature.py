"""Tensor-product Gauss-Legendre rules on axis-aligned elements and faces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "QuadratureRule",
    "gauss_legendre_1d",
    "element_rule",
    "face_rule",
    "default_points_per_axis",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and positive weights on one element or face.

    ``points`` has shape (npoints, dim) in physical coordinates, ``weights``
    sums to the measure of the integration domain.
    """

    points: np.ndarray
    weights: np.ndarray

    @property
    def npoints(self) -> int:
        return self.weights.size


@lru_cache(maxsize=128)
def gauss_legendre_1d(q: int) -> tuple[np.ndarray, np.ndarray]:
    """q-point Gauss-Legendre nodes and weights on [-1, 1]."""
    if q < 1:
        raise ValueError(f"points per axis must be >= 1, got {q}")
    x, w = np.polynomial.legendre.leggauss(q)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _as_bounds(obj) -> np.ndarray:
    bounds = getattr(obj, "bounds", obj)
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError(f"bounds must have shape (dim, 2), got {bounds.shape}")
    return bounds


def element_rule(element, points_per_axis: int) -> QuadratureRule:
    """Tensor Gauss-Legendre rule on an axis-aligned box.

    ``element`` is a (dim, 2) bounds array or any object with such a
    ``bounds`` attribute.  Weight sum equals the box volume.
    """
    bounds = _as_bounds(element)
    widths = bounds[:, 1] - bounds[:, 0]
    if np.any(widths <= 0):
        raise ValueError("element has a degenerate or reversed axis")
    return _tensor_rule(bounds, widths > 0, points_per_axis)


def face_rule(face, points_per_axis: int) -> QuadratureRule:
    """Tensor Gauss-Legendre rule on a codimension-1 axis-aligned face.

    The degenerate axis is detected from the bounds; its coordinate is held
    fixed in the returned points so they live in the full ambient dimension.
    Weight sum equals the face measure.
    """
    bounds = _as_bounds(face)
    widths = bounds[:, 1] - bounds[:, 0]
    active = widths > 0
    if np.count_nonzero(~active) != 1:
        raise ValueError("face must have exactly one degenerate axis")
    return _tensor_rule(bounds, active, points_per_axis)


def _tensor_rule(bounds: np.ndarray, active: np.ndarray, q: int) -> QuadratureRule:
    x1, w1 = gauss_legendre_1d(q)
    axes_pts = []
    axes_wts = []
    for lo_hi, is_active in zip(bounds, active):
        lo, hi = lo_hi
        if is_active:
            half = 0.5 * (hi - lo)
            axes_pts.append(lo + half * (x1 + 1.0))
            axes_wts.append(w1 * half)
        else:
            axes_pts.append(np.array([lo]))
            axes_wts.append(np.array([1.0]))
    grids = np.meshgrid(*axes_pts, indexing="ij")
    points = np.stack([g.reshape(-1) for g in grids], axis=-1)
    wgrids = np.meshgrid(*axes_wts, indexing="ij")
    weights = np.ones(points.shape[0])
    for wg in wgrids:
        weights = weights * wg.reshape(-1)
    return QuadratureRule(points=points, weights=weights)


def default_points_per_axis(wavenumber: float, h: float, degree: int = 0) -> int:
    """Default per-axis point count: max(10, ceil(|w| h) + degree + 2).

    Resolves oscillatory integrands at the wavenumbers and mesh widths the
    implemented experiments use, with margin.
    """
    return max(10, math.ceil(abs(wavenumber) * h) + int(degree) + 2)

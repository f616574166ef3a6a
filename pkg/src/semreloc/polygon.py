"""Polygon utilities for instance masks: area, hull, simplification, rasterization."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from skimage.draw import polygon as _fill_polygon
from skimage.measure import approximate_polygon, find_contours


def as_polygon(poly) -> np.ndarray:
    p = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(p) > 1 and np.array_equal(p[0], p[-1]):
        p = p[:-1]
    return p


def polygon_area(poly) -> float:
    p = as_polygon(poly)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def perimeter(poly) -> float:
    p = as_polygon(poly)
    return float(np.linalg.norm(p - np.roll(p, -1, axis=0), axis=1).sum())


def hull_area(poly) -> float:
    p = as_polygon(poly)
    if len(p) < 3:
        return 0.0
    try:
        return float(ConvexHull(p).volume)
    except QhullError:
        return 0.0


def _point_segment_distance(pts, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return np.linalg.norm(pts - a, axis=1)
    t = np.clip((pts - a) @ ab / L2, 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)


def _dp_open(pts, tol):
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        d = _point_segment_distance(pts[i + 1:j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > tol:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return keep


def simplify_closed(poly, tol: float) -> np.ndarray:
    """Douglas-Peucker on a closed polygon.

    Anchors are vertex 0 and the vertex farthest from it, so the result does
    not depend on where a roughly symmetric contour happens to start.
    """
    p = as_polygon(poly)
    if len(p) <= 3:
        return p
    far = int(np.argmax(np.linalg.norm(p - p[0], axis=1)))
    first = p[: far + 1]
    second = np.vstack([p[far:], p[:1]])
    k1 = _dp_open(first, tol)
    k2 = _dp_open(second, tol)
    out = np.vstack([first[k1], second[k2][1:-1]])
    return out


def rasterize(poly, shape) -> np.ndarray:
    """Boolean image of the pixels whose centers lie inside ``poly`` (x, y vertices)."""
    p = as_polygon(poly)
    out = np.zeros(shape, dtype=bool)
    if len(p) < 3:
        return out
    rr, cc = _fill_polygon(p[:, 1], p[:, 0], shape=shape)
    out[rr, cc] = True
    return out


def interior_pixels(poly, shape=None) -> np.ndarray:
    """Pixel-center coordinates (x, y) inside ``poly``, clipped to ``shape`` if given."""
    p = as_polygon(poly)
    if len(p) < 3:
        return np.zeros((0, 2))
    rr, cc = _fill_polygon(p[:, 1], p[:, 0], shape=shape)
    return np.stack([cc, rr], axis=1).astype(float)


def mask_to_polygon(mask: np.ndarray, tol: float = 0.25) -> np.ndarray | None:
    """Outer boundary (x, y vertices) of the largest component of a boolean mask.

    The contour runs halfway between inside and outside pixel centers, so
    ``rasterize(mask_to_polygon(m), m.shape)`` reproduces ``m`` up to holes.
    """
    if not mask.any():
        return None
    padded = np.pad(mask.astype(float), 1)
    contours = find_contours(padded, 0.5)
    if not contours:
        return None
    best = max(contours, key=lambda c: polygon_area(c))
    best = approximate_polygon(best, tol)
    xy = best[:, ::-1] - 1.0
    return as_polygon(xy)


def bbox_of_pixels(mask: np.ndarray):
    """``(x, y, w, h)`` covering whole pixels of a boolean mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return (float(cols[0]) - 0.5, float(rows[0]) - 0.5,
            float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))

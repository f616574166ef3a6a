"""Oriented cuboids and inscribed ellipsoids from object voxel models.

Objects are assumed to stand on the ground (world z up), so orientation
reduces to a yaw angle taken from the principal axis of the voxel centers
projected onto the ground plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .geometry import Ellipsoid, ellipsoid_from_pose_size, rot_z, wrap_half_pi
from .voxels import ObjectInstanceModel

DEGENERATE_GAP = 1e-9


@dataclass(frozen=True)
class OrientedCuboid:
    center: tuple[float, float, float]
    yaw: float
    size: tuple[float, float, float]  # (l, w, h): principal, perpendicular, vertical

    def __post_init__(self):
        if not all(s > 0 for s in self.size):
            raise InvalidArgument("cuboid sizes must be positive")
        object.__setattr__(self, "yaw", wrap_half_pi(self.yaw))


def _points(model_or_points) -> np.ndarray:
    if isinstance(model_or_points, ObjectInstanceModel):
        return model_or_points.centers()
    return np.asarray(model_or_points, dtype=float).reshape(-1, 3)


def estimate_yaw_pca(model_or_points) -> tuple[float, bool]:
    """Yaw of the ground-plane principal axis and a degeneracy flag.

    Returns ``(0.0, True)`` when the horizontal spread is isotropic (relative
    eigenvalue gap below 1e-9), otherwise the principal direction wrapped to
    [-pi/2, pi/2).
    """
    p = _points(model_or_points)
    if len(p) < 3:
        raise InvalidArgument("need at least 3 voxels")
    xy = p[:, :2] - p[:, :2].mean(axis=0)
    cov = xy.T @ xy / len(xy)
    w, V = np.linalg.eigh(cov)
    if w[1] <= 0:
        raise InvalidArgument("voxels have no ground-plane spread")
    if (w[1] - w[0]) <= DEGENERATE_GAP * w[1]:
        return 0.0, True
    return wrap_half_pi(math.atan2(V[1, 1], V[0, 1])), False


def compute_cuboid(model_or_points, yaw: float, resolution: float | None = None) -> OrientedCuboid:
    """Yaw-aligned extents of the voxel centers, padded by one voxel."""
    p = _points(model_or_points)
    if len(p) == 0:
        raise InvalidArgument("empty model")
    if resolution is None:
        if not isinstance(model_or_points, ObjectInstanceModel):
            raise InvalidArgument("resolution is required for raw points")
        resolution = model_or_points.resolution
    R = rot_z(yaw)
    local = p @ R  # rows R^T p: coordinates along (principal, perpendicular, up)
    lo, hi = local.min(axis=0), local.max(axis=0)
    size = hi - lo + resolution
    center = R @ ((lo + hi) / 2.0)
    return OrientedCuboid(tuple(center.tolist()), yaw, tuple(size.tolist()))


def build_ellipsoid(cuboid: OrientedCuboid, class_id: int = 0) -> Ellipsoid:
    """Ellipsoid inscribed in the cuboid (touches all six faces)."""
    return ellipsoid_from_pose_size(cuboid.center, cuboid.yaw, cuboid.size, class_id)


def ellipsoid_from_model(model: ObjectInstanceModel) -> tuple[Ellipsoid, OrientedCuboid, bool]:
    yaw, degenerate = estimate_yaw_pca(model)
    cuboid = compute_cuboid(model, yaw)
    label = model.final_label if model.final_label is not None else model.class_id
    return build_ellipsoid(cuboid, label), cuboid, degenerate

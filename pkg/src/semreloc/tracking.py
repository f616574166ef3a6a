"""2D detection-to-object association and 3D duplicate detection between voxel models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidArgument, NotVisible
from .frame import Detection2D
from .geometry import CameraIntrinsics, Pose
from .voxels import ObjectInstanceModel, encode_keys

LAMBDA1 = 1e6
LAMBDA2 = 1.0
XI = 0.5
RADIUS_VOXELS = 2.0

__all__ = [
    "AssociationResult", "Detection2D", "association_cost", "cost_matrix", "hungarian_assign",
    "iou", "match_3d", "neighbor_count", "project_object_bbox",
]


@dataclass
class AssociationResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_objects: list[int] = field(default_factory=list)
    total_cost: float = 0.0


def project_object_bbox(model: ObjectInstanceModel, pose: Pose, k: CameraIntrinsics):
    """Axis-aligned box ``(x, y, w, h)`` of the model's projected voxel centers, clamped to the image.

    Each projected center is treated as covering one pixel, so a single voxel
    gives a 1x1 box.
    """
    if len(model) == 0:
        raise NotVisible("model has no voxels")
    pc = pose.transform(model.centers())
    pc = pc[pc[:, 2] > 1e-9]
    if len(pc) == 0:
        raise NotVisible("no voxel in front of the camera")
    uv = k.project(pc)
    x0, y0 = uv.min(axis=0) - 0.5
    x1, y1 = uv.max(axis=0) + 0.5
    x0, x1 = np.clip([x0, x1], -0.5, k.width - 0.5)
    y0, y1 = np.clip([y0, y1], -0.5, k.height - 0.5)
    if x1 <= x0 or y1 <= y0:
        raise NotVisible("projection falls outside the image")
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def iou(b1, b2) -> float:
    ax0, ay0, aw, ah = b1
    bx0, by0, bw, bh = b2
    iw = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    ih = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _cost(class_a: int, class_b: int, box_a, box_b, lambda1: float, lambda2: float) -> float:
    # mismatch indicator: zero cost for equal class ids
    mismatch = 0.0 if class_a == class_b else 1.0
    return lambda1 * mismatch + lambda2 * (1.0 - iou(box_a, box_b))


def association_cost(obj: ObjectInstanceModel, det: Detection2D, pose: Pose, k: CameraIntrinsics,
                     lambda1: float = LAMBDA1, lambda2: float = LAMBDA2) -> float:
    """Semantic mismatch plus box overlap cost; ``inf`` when the object is not visible."""
    try:
        box = project_object_bbox(obj, pose, k)
    except NotVisible:
        return math.inf
    return _cost(obj.class_id, det.class_id, box, det.bbox, lambda1, lambda2)


def cost_matrix(objects: list[ObjectInstanceModel], detections: list[Detection2D], pose: Pose,
                k: CameraIntrinsics, lambda1: float = LAMBDA1, lambda2: float = LAMBDA2) -> np.ndarray:
    """Rows are objects, columns detections. Each object is projected once."""
    C = np.full((len(objects), len(detections)), math.inf)
    for i, obj in enumerate(objects):
        try:
            box = project_object_bbox(obj, pose, k)
        except NotVisible:
            continue
        for j, det in enumerate(detections):
            C[i, j] = _cost(obj.class_id, det.class_id, box, det.bbox, lambda1, lambda2)
    return C


def hungarian_assign(cost, gate: float = LAMBDA1 / 2, object_ids=None) -> AssociationResult:
    """Minimum-cost one-to-one assignment of rows (objects) to columns (detections).

    Pairs whose cost is ``>= gate`` (including the ``inf`` not-visible sentinel)
    are reported as unmatched. ``object_ids`` relabels rows in the output.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise InvalidArgument("cost must be a matrix")
    n, m = C.shape
    ids = list(range(n)) if object_ids is None else list(object_ids)
    if n == 0 or m == 0:
        return AssociationResult([], list(range(m)), ids)
    finite = C[np.isfinite(C)]
    big = (np.abs(finite).max() if finite.size else 1.0) * (n + m + 1) + 1.0
    rows, cols = linear_sum_assignment(np.where(np.isfinite(C), C, big))
    pairs, total = [], 0.0
    seen_r, seen_c = set(), set()
    for r, c in zip(rows.tolist(), cols.tolist()):
        if np.isfinite(C[r, c]) and C[r, c] < gate:
            pairs.append((ids[r], c))
            total += float(C[r, c])
            seen_r.add(r)
            seen_c.add(c)
    return AssociationResult(pairs, [j for j in range(m) if j not in seen_c],
                             [ids[i] for i in range(n) if i not in seen_r], total)


@lru_cache(maxsize=16)
def _ball_offsets(radius_cells: float) -> np.ndarray:
    R = int(math.floor(radius_cells))
    g = np.arange(-R, R + 1)
    d = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return d[(d**2).sum(axis=1) <= radius_cells**2 + 1e-9]


def neighbor_count(a: ObjectInstanceModel, b: ObjectInstanceModel, radius: float) -> int:
    """Number of voxels of ``a`` with at least one voxel of ``b`` within ``radius`` meters.

    Both models share the global grid, so the neighborhood is a fixed set of
    integer offsets and membership is a hash lookup on packed keys.
    """
    if not math.isclose(a.resolution, b.resolution):
        raise InvalidArgument("models live on different grids")
    if len(a) == 0 or len(b) == 0:
        return 0
    ka, kb = a.keys_array(), b.keys_array()
    codes_b = np.unique(encode_keys(kb))
    found = np.zeros(len(ka), dtype=bool)
    for off in _ball_offsets(radius / a.resolution):
        todo = ~found
        if not todo.any():
            break
        found[todo] = np.isin(encode_keys(ka[todo] + off), codes_b, assume_unique=False)
    return int(found.sum())


def match_3d(v: ObjectInstanceModel, vi: ObjectInstanceModel, r: float | None = None, xi: float = XI) -> bool:
    """Whether two voxel models describe the same physical object.

    Requires equal class ids and mutual overlap: more than ``xi * min(|v|, |vi|)``
    voxels of each model must have a neighbor in the other within ``r`` meters.
    """
    if v.class_id != vi.class_id:
        return False
    if r is None:
        r = RADIUS_VOXELS * v.resolution
    need = xi * min(len(v), len(vi))
    return neighbor_count(v, vi, r) > need and neighbor_count(vi, v, r) > need

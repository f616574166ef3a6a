"""Per-object probabilistic voxel models with semantic label fusion.

Each object keeps a sparse voxel set on a global uniform grid. A voxel
stores the probability that it belongs to the object's class; repeated
observations are fused with the binary Bayes filter (the log-odds update
familiar from occupancy mapping), and low-probability voxels are cleared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import IntegrationError, InvalidArgument
from .frame import Frame
from .geometry import CameraIntrinsics, Pose
from .polygon import as_polygon, interior_pixels

P_MIN, P_MAX = 0.001, 0.999

HIT_PROB = 0.7
MISS_PROB = 0.4
CLASS_PRIOR = 0.5
FILTER_THRESHOLD = 0.6
OMEGA0 = 3
RESOLUTION = 0.02


class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int

    @classmethod
    def from_point(cls, p, resolution: float) -> VoxelKey:
        i = np.floor(np.asarray(p, dtype=float) / resolution).astype(np.int64)
        return cls(int(i[0]), int(i[1]), int(i[2]))

    def center(self, resolution: float) -> np.ndarray:
        return (np.array(self, dtype=float) + 0.5) * resolution


_KEY_OFFSET = 1 << 20


def encode_keys(keys) -> np.ndarray:
    """Pack integer voxel indices (|i| < 2^20) into single int64 codes."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3) + _KEY_OFFSET
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(slots=True)
class SemanticVoxel:
    label_prob: float = CLASS_PRIOR
    hit_count: int = 0
    miss_count: int = 0

    @property
    def log_odds(self) -> float:
        return logit(self.label_prob)


@dataclass
class ObjectInstanceModel:
    object_id: int
    class_id: int
    resolution: float = RESOLUTION
    voxels: dict[VoxelKey, SemanticVoxel] = field(default_factory=dict)
    times_tracked: int = 0
    promoted: bool = False
    class_scores: dict[int, float] = field(default_factory=dict)
    final_label: int | None = None

    def __len__(self):
        return len(self.voxels)

    def keys_array(self) -> np.ndarray:
        if not self.voxels:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(list(self.voxels.keys()), dtype=np.int64)

    def centers(self) -> np.ndarray:
        return (self.keys_array() + 0.5) * self.resolution

    def probabilities(self) -> np.ndarray:
        return np.array([v.label_prob for v in self.voxels.values()])

    def add_class_evidence(self, class_id: int, score: float) -> None:
        self.class_scores[class_id] = self.class_scores.get(class_id, 0.0) + float(score)


def update_label_probability(prior: float, observation: float, class_prior: float = CLASS_PRIOR) -> float:
    """Fuse one observation into a voxel's class probability.

    ``[1 + (1-z)/z * (1-p)/p * c/(1-c)]^-1`` for prior ``p``, observation ``z``
    and class prior ``c``, clamped to [0.001, 0.999].
    """
    for name, v in (("prior", prior), ("observation", observation), ("class_prior", class_prior)):
        if not 0.0 < v < 1.0:
            raise InvalidArgument(f"{name} must lie in (0, 1), got {v}")
    odds = ((1.0 - observation) / observation) * ((1.0 - prior) / prior) * (class_prior / (1.0 - class_prior))
    return min(max(1.0 / (1.0 + odds), P_MIN), P_MAX)


def _mask_pixels(mask, shape):
    """Pixel rows/cols inside the mask and its bounding box ``(c0, r0, c1, r1)`` inclusive."""
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        if mask.shape != shape:
            raise IntegrationError("mask image does not match depth shape")
        rr, cc = np.nonzero(mask)
        inside = mask
    else:
        poly = as_polygon(mask)
        xy = interior_pixels(poly, shape)
        cc, rr = xy[:, 0].astype(int), xy[:, 1].astype(int)
        inside = np.zeros(shape, dtype=bool)
        inside[rr, cc] = True
    if len(rr) == 0:
        return rr, cc, inside, None
    return rr, cc, inside, (cc.min(), rr.min(), cc.max(), rr.max())


def integrate_observation(model: ObjectInstanceModel, frame: Frame, mask, pose: Pose | None,
                          k: CameraIntrinsics, hit_prob: float = HIT_PROB, miss_prob: float = MISS_PROB,
                          class_prior: float = CLASS_PRIOR, depth_margin: float | None = None) -> ObjectInstanceModel:
    """Fuse one masked depth observation into ``model`` (in place; also returned).

    Every valid depth pixel inside ``mask`` (polygon of (x, y) vertices or a
    boolean image) is back-projected and its voxel receives a hit. Existing
    voxels that were not hit and project inside the mask's bounding box get a
    miss when the depth image contradicts them: the pixel lies outside the mask
    and sees a surface at or behind the voxel, or lies inside the mask and sees
    through the voxel. Voxels hidden behind the observed surface are left alone.
    """
    if pose is None:
        raise IntegrationError("frame has no pose")
    depth = frame.depth
    if depth is None or depth.size == 0 or not np.any(depth > 0):
        raise IntegrationError("depth map is empty")
    res = model.resolution
    margin = 2.0 * res if depth_margin is None else depth_margin
    H, W = depth.shape

    rr, cc, inside, bbox = _mask_pixels(mask, depth.shape)
    if bbox is None:
        return model

    d = depth[rr, cc]
    valid = d > 0
    pts_cam = k.backproject(cc[valid], rr[valid], d[valid])
    pts_w = (pts_cam - pose.translation) @ pose.rotation
    hit_keys = np.unique(np.floor(pts_w / res).astype(np.int64), axis=0)

    existing = model.keys_array()
    if len(existing):
        c0, r0, c1, r1 = bbox
        not_hit = ~np.isin(encode_keys(existing), encode_keys(hit_keys))
        cand = existing[not_hit]
        pc = pose.transform((cand + 0.5) * res)
        z = pc[:, 2]
        front = z > 1e-6
        u = np.full(len(cand), -1, dtype=np.int64)
        v = np.full(len(cand), -1, dtype=np.int64)
        u[front] = np.rint(k.fx * pc[front, 0] / z[front] + k.cx).astype(np.int64)
        v[front] = np.rint(k.fy * pc[front, 1] / z[front] + k.cy).astype(np.int64)
        in_box = front & (u >= c0) & (u <= c1) & (v >= r0) & (v <= r1) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        idx = np.flatnonzero(in_box)
        dz = depth[v[idx], u[idx]]
        m = inside[v[idx], u[idx]]
        zi = z[idx]
        contradicted = (dz > 0) & ((~m & (dz >= zi - margin)) | (m & (dz > zi + margin)))
        for key in cand[idx[contradicted]].tolist():
            vox = model.voxels[VoxelKey(*key)]
            vox.label_prob = update_label_probability(vox.label_prob, miss_prob, class_prior)
            vox.miss_count += 1

    for key in hit_keys.tolist():
        vk = VoxelKey(*key)
        vox = model.voxels.get(vk)
        if vox is None:
            vox = model.voxels[vk] = SemanticVoxel(class_prior)
        vox.label_prob = update_label_probability(vox.label_prob, hit_prob, class_prior)
        vox.hit_count += 1
    return model


def filter_voxels(model: ObjectInstanceModel, threshold: float = FILTER_THRESHOLD) -> ObjectInstanceModel:
    """Drop voxels whose label probability is below ``threshold``."""
    model.voxels = {key: v for key, v in model.voxels.items() if v.label_prob >= threshold}
    return model


def promote_if_ready(model: ObjectInstanceModel, omega0: int = OMEGA0) -> bool:
    if not model.promoted and model.times_tracked >= omega0:
        model.promoted = True
        if model.class_scores:
            model.final_label = max(sorted(model.class_scores), key=lambda c: model.class_scores[c])
        else:
            model.final_label = model.class_id
    return model.promoted


def merge_models(dst: ObjectInstanceModel, src: ObjectInstanceModel,
                 class_prior: float = CLASS_PRIOR) -> ObjectInstanceModel:
    """Fold ``src`` into ``dst`` (in place). Shared voxels combine their evidence in log-odds."""
    if not math.isclose(dst.resolution, src.resolution):
        raise InvalidArgument("models live on different grids")
    prior = logit(class_prior)
    lo, hi = logit(P_MIN), logit(P_MAX)
    for key, v in src.voxels.items():
        mine = dst.voxels.get(key)
        if mine is None:
            dst.voxels[key] = SemanticVoxel(v.label_prob, v.hit_count, v.miss_count)
            continue
        l = min(max(mine.log_odds + v.log_odds - prior, lo), hi)
        mine.label_prob = min(max(1.0 / (1.0 + math.exp(-l)), P_MIN), P_MAX)
        mine.hit_count += v.hit_count
        mine.miss_count += v.miss_count
    dst.times_tracked += src.times_tracked
    for c, s in src.class_scores.items():
        dst.class_scores[c] = dst.class_scores.get(c, 0.0) + s
    if src.promoted or dst.promoted:
        dst.promoted = False
        promote_if_ready(dst, 1)
    return dst

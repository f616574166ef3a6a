"""Incremental object mapping from posed depth frames with 2D detections.

Per frame: associate detections with existing objects (semantic + IoU cost,
Hungarian), fuse each matched mask into its object's voxels, spawn candidates
for unmatched detections, filter, promote after enough sightings, and merge
objects that turn out to overlap in 3D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import TrackingConfig, VoxelConfig
from .ellipsoids import ellipsoid_from_model
from .errors import IntegrationError, InvalidArgument
from .frame import Frame
from .geometry import CameraIntrinsics, Ellipsoid
from .tracking import AssociationResult, cost_matrix, hungarian_assign, match_3d
from .voxels import (
    ObjectInstanceModel,
    filter_voxels,
    integrate_observation,
    merge_models,
    promote_if_ready,
)

MIN_VOXELS = 4


@dataclass
class MappedObject:
    object_id: int
    ellipsoid: Ellipsoid
    times_tracked: int
    model: ObjectInstanceModel
    degenerate_yaw: bool = False


class ObjectMapper:
    """Owns every object model; frames must be fed in timestamp order."""

    def __init__(self, k: CameraIntrinsics, voxel: VoxelConfig | None = None, tracking: TrackingConfig | None = None):
        self.k = k
        self.voxel = voxel or VoxelConfig()
        self.tracking = tracking or TrackingConfig()
        self.objects: dict[int, ObjectInstanceModel] = {}
        self._next_id = 0
        self._last_t = -math.inf

    def _integrate(self, model: ObjectInstanceModel, frame: Frame, mask) -> None:
        v = self.voxel
        integrate_observation(model, frame, mask, frame.pose, self.k, v.hit_prob, v.miss_prob, v.class_prior)

    def process(self, frame: Frame) -> AssociationResult:
        if frame.pose is None:
            raise IntegrationError(f"frame {frame.timestamp:.6f} has no pose")
        if frame.depth is None or not np.any(frame.depth > 0):
            raise IntegrationError(f"frame {frame.timestamp:.6f} has no valid depth")
        if frame.timestamp <= self._last_t:
            raise InvalidArgument("frames must arrive in increasing timestamp order")
        self._last_t = frame.timestamp
        tc = self.tracking
        dets = [d.clamped(self.k.width, self.k.height) for d in frame.detections]
        ids = sorted(self.objects)
        models = [self.objects[i] for i in ids]
        C = cost_matrix(models, dets, frame.pose, self.k, tc.lambda1, tc.lambda2)
        C[C > tc.gate] = math.inf
        assoc = hungarian_assign(C, tc.lambda1 / 2, ids)

        touched = set()
        for oid, j in assoc.pairs:
            m = self.objects[oid]
            if dets[j].mask is not None:
                self._integrate(m, frame, dets[j].mask)
            m.times_tracked += 1
            m.add_class_evidence(dets[j].class_id, dets[j].score)
            touched.add(oid)
        for j in assoc.unmatched_detections:
            d = dets[j]
            if d.mask is None:
                continue
            m = ObjectInstanceModel(self._next_id, d.class_id, self.voxel.resolution)
            self._integrate(m, frame, d.mask)
            if len(m) == 0:
                continue
            m.times_tracked = 1
            m.add_class_evidence(d.class_id, d.score)
            self.objects[self._next_id] = m
            touched.add(self._next_id)
            self._next_id += 1

        for oid in sorted(touched):
            m = self.objects[oid]
            filter_voxels(m, self.voxel.filter_threshold)
            if len(m) == 0:
                del self.objects[oid]
                continue
            promote_if_ready(m, self.voxel.omega0)
        self._merge_duplicates(touched)
        return assoc

    def _merge_duplicates(self, touched) -> None:
        r = self.tracking.radius_voxels * self.voxel.resolution
        for oid in sorted(touched):
            if oid not in self.objects:
                continue
            m = self.objects[oid]
            lo, hi = _extent(m, r)
            for other in sorted(self.objects):
                if other == oid or other not in self.objects:
                    continue
                o = self.objects[other]
                if o.class_id != m.class_id:
                    continue
                olo, ohi = _extent(o, 0.0)
                if np.any(olo > hi) or np.any(ohi < lo):
                    continue
                if match_3d(m, o, r, self.tracking.xi):
                    keep, drop = (o, m) if other < oid else (m, o)
                    merge_models(keep, drop, self.voxel.class_prior)
                    del self.objects[drop.object_id]
                    if drop is m:
                        break
                    lo, hi = _extent(m, r)

    def run(self, frames) -> list[MappedObject]:
        for f in frames:
            self.process(f)
        return self.finalize()

    def finalize(self) -> list[MappedObject]:
        """Ellipsoids of all promoted objects with enough voxels, in id order."""
        out = []
        for oid in sorted(self.objects):
            m = self.objects[oid]
            if not m.promoted or len(m) < MIN_VOXELS:
                continue
            try:
                q, _, degenerate = ellipsoid_from_model(m)
            except InvalidArgument:
                continue
            out.append(MappedObject(oid, q, m.times_tracked, m, degenerate))
        return out


def _extent(m: ObjectInstanceModel, pad: float):
    c = m.centers()
    return c.min(axis=0) - pad, c.max(axis=0) + pad

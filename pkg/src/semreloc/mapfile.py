"""Object-map persistence: a JSON document of ellipsoids plus an optional voxel sidecar.

Floats are written with ``repr`` precision and rotations are stored as the
unit quaternion held by each record, so save -> load -> save is byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DatasetError
from .geometry import Ellipsoid
from .voxels import ObjectInstanceModel, SemanticVoxel, VoxelKey

FORMAT = "semreloc-map/1"
QUAT_TOL = 1e-6


def _quat_from_matrix(R: np.ndarray) -> tuple[float, ...]:
    q = Rotation.from_matrix(R).as_quat()
    if q[3] < 0:
        q = -q
    return tuple(float(v) for v in q / np.linalg.norm(q))


@dataclass
class VoxelSidecar:
    resolution: float
    entries: list[tuple[int, int, int, float]] = field(default_factory=list)

    @classmethod
    def of(cls, model: ObjectInstanceModel) -> VoxelSidecar:
        rows = sorted((k.ix, k.iy, k.iz, float(v.label_prob)) for k, v in model.voxels.items())
        return cls(float(model.resolution), rows)

    def to_model(self, object_id: int, class_id: int) -> ObjectInstanceModel:
        m = ObjectInstanceModel(object_id, class_id, self.resolution)
        for ix, iy, iz, p in self.entries:
            m.voxels[VoxelKey(ix, iy, iz)] = SemanticVoxel(p)
        return m


@dataclass
class MapObject:
    id: int
    class_id: int
    center: tuple[float, float, float]
    # unit quaternion (x, y, z, w) of the object-to-world rotation
    rotation: tuple[float, float, float, float]
    semi_axes: tuple[float, float, float]
    times_tracked: int = 0
    voxels: VoxelSidecar | None = None

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.rotation = tuple(float(v) for v in self.rotation)
        self.semi_axes = tuple(float(v) for v in self.semi_axes)
        if len(self.center) != 3 or len(self.rotation) != 4 or len(self.semi_axes) != 3:
            raise DatasetError(f"map object {self.id}: wrong field sizes")
        n = float(np.linalg.norm(self.rotation))
        if abs(n - 1.0) > QUAT_TOL:
            raise DatasetError(f"map object {self.id}: quaternion norm {n} is not 1")

    @classmethod
    def from_ellipsoid(cls, object_id: int, q: Ellipsoid, times_tracked: int = 0,
                       voxels: VoxelSidecar | None = None) -> MapObject:
        return cls(object_id, q.class_id, tuple(q.center), _quat_from_matrix(q.rotation), tuple(q.semi_axes),
                   times_tracked, voxels)

    @property
    def ellipsoid(self) -> Ellipsoid:
        q = np.asarray(self.rotation)
        R = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
        return Ellipsoid(np.array(self.center), R, np.array(self.semi_axes), self.class_id)

    def record(self) -> dict:
        return {"id": self.id, "class_id": self.class_id, "center": list(self.center),
                "rotation": list(self.rotation), "semi_axes": list(self.semi_axes),
                "times_tracked": self.times_tracked}


@dataclass
class MapFile:
    objects: list[MapObject] = field(default_factory=list)

    def __len__(self):
        return len(self.objects)

    @property
    def ellipsoids(self) -> list[Ellipsoid]:
        return [o.ellipsoid for o in self.objects]

    @property
    def ids(self) -> list[int]:
        return [o.id for o in self.objects]

    def to_json(self) -> str:
        doc = {"format": FORMAT, "objects": [o.record() for o in self.objects]}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def sidecar_json(self) -> str | None:
        side = {str(o.id): {"resolution": o.voxels.resolution, "entries": [list(e) for e in o.voxels.entries]}
                for o in self.objects if o.voxels is not None}
        if not side:
            return None
        return json.dumps({"format": FORMAT, "voxels": side}, sort_keys=True) + "\n"

    def save(self, path, sidecar=None) -> None:
        path = Path(path)
        path.write_text(self.to_json())
        side = self.sidecar_json()
        if side is not None:
            Path(sidecar or default_sidecar(path)).write_text(side)

    @classmethod
    def from_json(cls, text: str, sidecar_text: str | None = None, source="map") -> MapFile:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{source}: not valid JSON ({exc})") from None
        if doc.get("format") != FORMAT:
            raise DatasetError(f"{source}: unsupported map format {doc.get('format')!r}")
        side = {}
        if sidecar_text is not None:
            side = json.loads(sidecar_text).get("voxels", {})
        objs = []
        try:
            for r in doc["objects"]:
                vox = side.get(str(r["id"]))
                sc = None if vox is None else VoxelSidecar(float(vox["resolution"]),
                                                           [(int(a), int(b), int(c), float(p))
                                                            for a, b, c, p in vox["entries"]])
                objs.append(MapObject(int(r["id"]), int(r["class_id"]), r["center"], r["rotation"], r["semi_axes"],
                                      int(r.get("times_tracked", 0)), sc))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{source}: malformed object record ({exc})") from None
        ids = [o.id for o in objs]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"{source}: duplicate object ids")
        return cls(objs)

    @classmethod
    def load(cls, path, sidecar=None) -> MapFile:
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"map file {path} does not exist")
        side_path = Path(sidecar) if sidecar else default_sidecar(path)
        side = side_path.read_text() if side_path.exists() else None
        return cls.from_json(path.read_text(), side, str(path))


def default_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".voxels.json")

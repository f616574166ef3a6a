"""TUM-style dataset directories.

Layout::

    calib.txt          fx fy cx cy width height
    depth/<ts>.png     16-bit depth, meters x 5000
    detections/<ts>.json
    groundtruth.txt    timestamp tx ty tz qx qy qz qw   (camera-to-world)
    rgb/<ts>.png       optional

Timestamps are written with six decimals and double as file stems.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import DatasetError
from .frame import Detection2D, Frame
from .geometry import CameraIntrinsics, Pose

DEPTH_SCALE = 5000.0
QUAT_TOL = 1e-6


def ts_name(t: float) -> str:
    return f"{t:.6f}"


# --- poses ------------------------------------------------------------------

def pose_to_tum(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Camera center and camera-to-world quaternion (x, y, z, w) with w >= 0."""
    q = Rotation.from_matrix(pose.rotation.T).as_quat()
    if q[3] < 0:
        q = -q
    return pose.center, q


def pose_from_tum(position, quat, tol: float = QUAT_TOL) -> Pose:
    q = np.asarray(quat, dtype=float)
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > tol:
        raise DatasetError(f"quaternion norm {n:.9f} is not 1 within {tol}")
    R_wc = Rotation.from_quat(q / n).as_matrix()
    R = R_wc.T
    return Pose(R, -R @ np.asarray(position, dtype=float))


def write_trajectory(path, stamped_poses) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in stamped_poses:
        c, q = pose_to_tum(pose)
        lines.append(" ".join([ts_name(t), *(repr(float(v)) for v in c), *(repr(float(v)) for v in q)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[tuple[float, Pose]]:
    out = []
    last = -math.inf
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise DatasetError(f"{path}:{n}: non-numeric field") from None
        if vals[0] <= last:
            raise DatasetError(f"{path}:{n}: timestamps must be strictly increasing")
        last = vals[0]
        try:
            out.append((vals[0], pose_from_tum(vals[1:4], vals[4:8])))
        except DatasetError as exc:
            raise DatasetError(f"{path}:{n}: {exc}") from None
    return out


# --- calibration ------------------------------------------------------------

def write_calib(path, k: CameraIntrinsics) -> None:
    Path(path).write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")


def read_calib(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing calibration file {path}")
    parts = [p for p in path.read_text().split() if p]
    if len(parts) != 6:
        raise DatasetError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(v) for v in parts[:4])
    return CameraIntrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


# --- detections -------------------------------------------------------------

def detections_to_json(timestamp: float, detections: list[Detection2D]) -> dict:
    return {
        "timestamp": timestamp,
        "detections": [
            {"class_id": d.class_id, "score": d.score, "bbox": list(d.bbox),
             "mask": None if d.mask is None else d.mask.tolist()}
            for d in detections
        ],
    }


def detections_from_json(doc: dict, source="detections") -> list[Detection2D]:
    try:
        return [Detection2D(int(d["class_id"]), float(d["score"]), tuple(d["bbox"]), d.get("mask"))
                for d in doc["detections"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{source}: malformed detection record ({exc})") from None


# --- depth ------------------------------------------------------------------

def write_depth(path, depth: np.ndarray) -> None:
    d = np.rint(np.asarray(depth) * DEPTH_SCALE)
    if d.max(initial=0) > np.iinfo(np.uint16).max:
        raise DatasetError("depth exceeds the 16-bit range at scale 5000")
    Image.fromarray(d.astype(np.uint16)).save(path)


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.array(im)
    if raw.dtype not in (np.uint16, np.int32, np.uint32):
        raise DatasetError(f"{path}: depth must be a 16-bit image")
    return raw.astype(float) / DEPTH_SCALE


# --- directory --------------------------------------------------------------

def write_dataset(root, frames: list[Frame], k: CameraIntrinsics, scene: dict | None = None,
                  with_groundtruth: bool = True) -> Path:
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "detections").mkdir(exist_ok=True)
    write_calib(root / "calib.txt", k)
    for f in frames:
        name = ts_name(f.timestamp)
        if f.depth is not None:
            write_depth(root / "depth" / f"{name}.png", f.depth)
        doc = detections_to_json(f.timestamp, f.detections)
        (root / "detections" / f"{name}.json").write_text(json.dumps(doc))
    if with_groundtruth:
        if any(f.pose is None for f in frames):
            raise DatasetError("every frame needs a pose to write groundtruth.txt")
        write_trajectory(root / "groundtruth.txt", [(f.timestamp, f.pose) for f in frames])
    if scene is not None:
        (root / "scene.json").write_text(json.dumps(scene, indent=1))
    return root


@dataclass
class Dataset:
    root: Path
    k: CameraIntrinsics
    timestamps: list[float]
    _poses: dict[str, Pose] | None = field(default=None, repr=False)

    @classmethod
    def open(cls, root) -> Dataset:
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"dataset directory {root} does not exist")
        k = read_calib(root / "calib.txt")
        det_dir = root / "detections"
        if not det_dir.is_dir():
            raise DatasetError(f"{root}: missing detections/ directory")
        names = sorted((p.stem for p in det_dir.glob("*.json")), key=float)
        depth_dir = root / "depth"
        if depth_dir.is_dir():
            depth_names = sorted((p.stem for p in depth_dir.glob("*.png")), key=float)
            if depth_names and depth_names != names:
                raise DatasetError(f"{root}: depth/ and detections/ list different frames")
        ts = [float(n) for n in names]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DatasetError(f"{root}: duplicate timestamps")
        return cls(root, k, ts)

    def __len__(self):
        return len(self.timestamps)

    @property
    def has_groundtruth(self) -> bool:
        return (self.root / "groundtruth.txt").exists()

    def groundtruth(self) -> list[tuple[float, Pose]]:
        path = self.root / "groundtruth.txt"
        if not path.exists():
            raise DatasetError(f"{self.root}: missing groundtruth.txt")
        return read_trajectory(path)

    def _pose_table(self) -> dict[str, Pose]:
        if self._poses is None:
            self._poses = {ts_name(t): p for t, p in self.groundtruth()}
        return self._poses

    def detections(self, i: int) -> list[Detection2D]:
        path = self.root / "detections" / f"{ts_name(self.timestamps[i])}.json"
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"{path}: unreadable ({exc})") from None
        return detections_from_json(doc, str(path))

    def frame(self, i: int, with_depth: bool = True, with_pose: bool = True) -> Frame:
        t = self.timestamps[i]
        name = ts_name(t)
        depth = pose = None
        if with_depth:
            path = self.root / "depth" / f"{name}.png"
            if not path.exists():
                raise DatasetError(f"frame {name}: missing depth image")
            depth = read_depth(path)
        if with_pose:
            pose = self._pose_table().get(name)
            if pose is None:
                raise DatasetError(f"frame {name}: no ground-truth pose")
        return Frame(t, depth, self.detections(i), pose)

    def frames(self, workers: int = 1, **kw):
        """Frames in timestamp order; loading may run on a thread pool."""
        if workers <= 1:
            for i in range(len(self)):
                yield self.frame(i, **kw)
            return
        with ThreadPoolExecutor(workers) as pool:
            yield from pool.map(lambda i: self.frame(i, **kw), range(len(self)))

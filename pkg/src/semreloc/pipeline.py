"""Batch pipeline: build an object map from a posed dataset, relocalize query frames, evaluate."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .dataset import Dataset, pose_from_tum, pose_to_tum, ts_name
from .errors import AlignmentError, DatasetError
from .geometry import CameraIntrinsics, Pose, rotation_angle
from .mapfile import MapFile, MapObject, VoxelSidecar
from .mapping import ObjectMapper
from .reloc import OK, RelocResult, relocalize_frame

RESULTS_FORMAT = "semreloc-results/1"
REPORT_FORMAT = "semreloc-eval/1"
TS_TOL = 1e-6


def _as_dataset(ds) -> Dataset:
    return ds if isinstance(ds, Dataset) else Dataset.open(ds)


# --- mapping ----------------------------------------------------------------

def build_map(dataset, config: Config | None = None, workers: int = 1, with_voxels: bool = True) -> MapFile:
    """Map every frame of a posed dataset. Loading may be parallel; the map is updated in timestamp order."""
    ds = _as_dataset(dataset)
    cfg = config or Config()
    if len(ds) == 0:
        raise DatasetError(f"{ds.root}: dataset has no frames")
    if not ds.has_groundtruth:
        raise DatasetError(f"{ds.root}: mapping needs poses (groundtruth.txt)")
    mapper = ObjectMapper(ds.k, cfg.voxel, cfg.tracking)
    objs = mapper.run(ds.frames(workers))
    return MapFile([MapObject.from_ellipsoid(o.object_id, o.ellipsoid, o.times_tracked,
                                             VoxelSidecar.of(o.model) if with_voxels else None)
                    for o in objs])


# --- relocalization ---------------------------------------------------------

def frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def relocalize_detections(detections, mapfile: MapFile, k: CameraIntrinsics, config: Config, seed: int,
                          timestamp=None) -> RelocResult:
    rc = config.reloc
    return relocalize_frame(detections, mapfile.ellipsoids, k, mode=rc.mode, tau=rc.tau_inlier,
                            delta=rc.huber_delta, max_iters=rc.max_iters, seed=seed, map_ids=mapfile.ids,
                            border_margin=rc.border_margin, timestamp=timestamp,
                            max_iterations=rc.max_iterations, outlier_rounds=rc.outlier_rounds)


_WORKER: dict = {}


def _init_worker(root, map_json, config_dict):
    _WORKER["ds"] = Dataset.open(root)
    _WORKER["map"] = MapFile.from_json(map_json)
    _WORKER["cfg"] = Config.from_dict(config_dict)


def _reloc_task(i: int) -> RelocResult:
    ds, mp, cfg = _WORKER["ds"], _WORKER["map"], _WORKER["cfg"]
    return relocalize_detections(ds.detections(i), mp, ds.k, cfg, frame_seed(cfg.seed, i), ds.timestamps[i])


def relocalize(dataset, mapfile: MapFile, config: Config | None = None, workers: int = 1) -> list[RelocResult]:
    """Relocalize every query frame from its detections alone (ground-truth poses are never read)."""
    ds = _as_dataset(dataset)
    cfg = config or Config()
    if len(mapfile) == 0:
        raise DatasetError("map has no objects")
    if workers <= 1:
        return [relocalize_detections(ds.detections(i), mapfile, ds.k, cfg, frame_seed(cfg.seed, i), t)
                for i, t in enumerate(ds.timestamps)]
    with ProcessPoolExecutor(workers, initializer=_init_worker,
                             initargs=(str(ds.root), mapfile.to_json(), cfg.to_dict())) as pool:
        return list(pool.map(_reloc_task, range(len(ds)), chunksize=4))


def _finite(x):
    return x if x is not None and math.isfinite(x) else None


def results_to_json(results: list[RelocResult]) -> str:
    rows = []
    for r in results:
        row = {"timestamp": r.timestamp, "status": r.status, "inlier_count": r.inlier_count,
               "correspondences": [list(c) for c in r.correspondences], "final_cost": _finite(r.final_cost),
               "refinement_failed": r.refinement_failed, "iterations": r.iterations,
               "position": None, "quaternion": None}
        if r.pose is not None:
            c, q = pose_to_tum(r.pose)
            row["position"], row["quaternion"] = c.tolist(), q.tolist()
        rows.append(row)
    return json.dumps({"format": RESULTS_FORMAT, "frames": rows}, indent=1, sort_keys=True) + "\n"


def results_from_json(text: str, source="results") -> list[RelocResult]:
    doc = json.loads(text)
    if doc.get("format") != RESULTS_FORMAT:
        raise DatasetError(f"{source}: unsupported results format")
    out = []
    for row in doc["frames"]:
        pose = None if row["position"] is None else pose_from_tum(row["position"], row["quaternion"])
        cost = row["final_cost"]
        out.append(RelocResult(pose, [tuple(c) for c in row["correspondences"]], row["inlier_count"],
                               math.inf if cost is None else cost, row["status"], row["refinement_failed"],
                               row["iterations"], [], row["timestamp"]))
    return out


def save_results(path, results) -> None:
    Path(path).write_text(results_to_json(results))


def load_results(path) -> list[RelocResult]:
    return results_from_json(Path(path).read_text(), str(path))


# --- evaluation -------------------------------------------------------------

@dataclass
class FrameError:
    timestamp: float
    position_error_cm: float | None
    rotation_error_deg: float | None
    valid: bool


@dataclass
class EvalReport:
    frames: list[FrameError] = field(default_factory=list)
    median_position_cm: float | None = None
    median_rotation_deg: float | None = None
    valid_ratio: float = 0.0
    max_position_cm: float = 30.0
    max_rotation_deg: float = 30.0

    @property
    def valid_count(self) -> int:
        return sum(f.valid for f in self.frames)

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT,
                "frames": [{"timestamp": f.timestamp, "position_error_cm": f.position_error_cm,
                            "rotation_error_deg": f.rotation_error_deg, "valid": f.valid} for f in self.frames],
                "median_position_cm": self.median_position_cm, "median_rotation_deg": self.median_rotation_deg,
                "valid_ratio": self.valid_ratio, "max_position_cm": self.max_position_cm,
                "max_rotation_deg": self.max_rotation_deg}

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        if d.get("format") != REPORT_FORMAT:
            raise DatasetError("unsupported evaluation report format")
        frames = [FrameError(f["timestamp"], f["position_error_cm"], f["rotation_error_deg"], bool(f["valid"]))
                  for f in d["frames"]]
        return cls(frames, d["median_position_cm"], d["median_rotation_deg"], d["valid_ratio"],
                   d["max_position_cm"], d["max_rotation_deg"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> EvalReport:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self) -> str:
        def fmt(v, nd):
            return "-" if v is None else f"{v:.{nd}f}"
        head = f"{'pos.err. (cm)':>14} {'rot.err. (deg)':>15} {'valid (%)':>10}"
        row = f"{fmt(self.median_position_cm, 2):>14} {fmt(self.median_rotation_deg, 2):>15} {self.valid_ratio:>10.1f}"
        return f"{head}\n{row}\n({self.valid_count}/{len(self.frames)} frames within "\
               f"{self.max_position_cm:g} cm and {self.max_rotation_deg:g} deg)"


def pose_errors(est: Pose, gt: Pose) -> tuple[float, float]:
    """Camera-center distance (cm) and relative rotation angle (deg)."""
    pos = float(np.linalg.norm(est.center - gt.center)) * 100.0
    rot = math.degrees(rotation_angle(est.rotation @ gt.rotation.T))
    return pos, rot


def evaluate(results: list[RelocResult], groundtruth, config: Config | None = None) -> EvalReport:
    """Per-frame errors against ground truth matched by timestamp; frames without a pose are invalid."""
    cfg = config or Config()
    gt = sorted(groundtruth.items() if isinstance(groundtruth, dict) else groundtruth, key=lambda r: r[0])
    gt_t = np.array([t for t, _ in gt])
    rows = []
    for r in results:
        if r.timestamp is None:
            raise AlignmentError("result without timestamp")
        i = int(np.searchsorted(gt_t, r.timestamp))
        near = [j for j in (i - 1, i) if 0 <= j < len(gt_t) and abs(gt_t[j] - r.timestamp) <= TS_TOL]
        if not near:
            raise AlignmentError(f"no ground-truth pose at timestamp {ts_name(r.timestamp)}")
        if r.status != OK or r.pose is None:
            rows.append(FrameError(float(r.timestamp), None, None, False))
            continue
        pos, rot = pose_errors(r.pose, gt[near[0]][1])
        valid = pos < cfg.eval.max_position_cm and rot < cfg.eval.max_rotation_deg
        rows.append(FrameError(float(r.timestamp), pos, rot, valid))
    rows.sort(key=lambda f: f.timestamp)
    ok = [f for f in rows if f.valid]
    med = (lambda xs: float(np.median(xs)) if xs else None)
    ratio = 100.0 * len(ok) / len(rows) if rows else 0.0
    return EvalReport(rows, med([f.position_error_cm for f in ok]), med([f.rotation_error_deg for f in ok]),
                      ratio, cfg.eval.max_position_cm, cfg.eval.max_rotation_deg)

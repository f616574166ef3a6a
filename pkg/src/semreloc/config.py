"""Pipeline configuration: one JSON document with namespaced keys.

Every tunable constant of mapping, tracking, relocalization and evaluation
lives here with its default, so an acceptance run is fully described by its
config file and seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import reloc, tracking, voxels
from .errors import InvalidArgument


@dataclass
class VoxelConfig:
    resolution: float = voxels.RESOLUTION
    hit_prob: float = voxels.HIT_PROB
    miss_prob: float = voxels.MISS_PROB
    class_prior: float = voxels.CLASS_PRIOR
    filter_threshold: float = voxels.FILTER_THRESHOLD
    omega0: int = voxels.OMEGA0

    def validate(self):
        if self.resolution <= 0:
            raise InvalidArgument("voxel.resolution must be positive")
        for name in ("hit_prob", "miss_prob", "class_prior", "filter_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvalidArgument(f"voxel.{name} must lie in (0, 1)")
        if self.omega0 < 1:
            raise InvalidArgument("voxel.omega0 must be at least 1")


@dataclass
class TrackingConfig:
    lambda1: float = tracking.LAMBDA1
    lambda2: float = tracking.LAMBDA2
    # detections overlapping a projected object less than this start a new object
    min_iou: float = 0.1
    xi: float = tracking.XI
    radius_voxels: float = tracking.RADIUS_VOXELS

    def validate(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise InvalidArgument("tracking weights must be positive")
        if self.lambda1 <= 2 * self.lambda2:
            raise InvalidArgument("tracking.lambda1 must dominate the IoU term")
        if not 0.0 <= self.min_iou < 1.0:
            raise InvalidArgument("tracking.min_iou must lie in [0, 1)")
        if not 0.0 <= self.xi < 1.0 or self.radius_voxels <= 0:
            raise InvalidArgument("invalid 3D matching parameters")

    @property
    def gate(self) -> float:
        # same-class pairs only, with at least min_iou overlap
        return self.lambda2 * (1.0 - self.min_iou)


@dataclass
class RelocConfig:
    mode: str = reloc.MASK_FIT
    tau_inlier: float = reloc.TAU_INLIER
    huber_delta: float = reloc.HUBER_DELTA
    max_iters: int = reloc.MAX_ITERS
    border_margin: float = 2.0
    max_iterations: int = 100
    outlier_rounds: int = 4

    def validate(self):
        if self.mode not in reloc.MODES:
            raise InvalidArgument(f"reloc.mode must be one of {reloc.MODES}")
        if self.tau_inlier <= 0 or self.huber_delta <= 0:
            raise InvalidArgument("reloc thresholds must be positive")
        if self.max_iters < 1 or self.max_iterations < 1 or self.outlier_rounds < 0:
            raise InvalidArgument("invalid reloc iteration limits")


@dataclass
class EvalConfig:
    max_position_cm: float = 30.0
    max_rotation_deg: float = 30.0

    def validate(self):
        if self.max_position_cm <= 0 or self.max_rotation_deg <= 0:
            raise InvalidArgument("evaluation thresholds must be positive")


@dataclass
class Config:
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    reloc: RelocConfig = field(default_factory=RelocConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for section in (self.voxel, self.tracking, self.reloc, self.eval):
            section.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Config:
        if not isinstance(d, dict):
            raise InvalidArgument("config must be a JSON object")
        kinds = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(kinds)
        if unknown:
            raise InvalidArgument(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, value in d.items():
            if name == "seed":
                kw[name] = int(value)
                continue
            section_cls = type(getattr(cls(), name))
            allowed = {f.name for f in fields(section_cls)}
            if not isinstance(value, dict) or set(value) - allowed:
                bad = sorted(set(value) - allowed) if isinstance(value, dict) else value
                raise InvalidArgument(f"invalid keys in config section {name!r}: {bad}")
            kw[name] = section_cls(**value)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> Config:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"{path}: not valid JSON ({exc})") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

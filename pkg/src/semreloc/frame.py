"""Per-frame data shared by mapping, tracking and relocalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose


@dataclass
class Detection2D:
    """One 2D instance detection: class, confidence, ``(x, y, w, h)`` box and optional mask polygon."""

    class_id: int
    score: float
    bbox: tuple[float, float, float, float]
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=float).reshape(-1, 2)

    def clamped(self, width: int, height: int) -> Detection2D:
        x0, y0, w, h = self.bbox
        x1, y1 = x0 + w, y0 + h
        x0, x1 = np.clip([x0, x1], -0.5, width - 0.5)
        y0, y1 = np.clip([y0, y1], -0.5, height - 0.5)
        return Detection2D(self.class_id, self.score, (x0, y0, x1 - x0, y1 - y0), self.mask)


@dataclass
class Frame:
    timestamp: float
    depth: np.ndarray | None = None
    detections: list[Detection2D] = field(default_factory=list)
    pose: Pose | None = None
    color: np.ndarray | None = None
    # simulator only: per-pixel object index (+1), 0 for background
    labels: np.ndarray | None = None

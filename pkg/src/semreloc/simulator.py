"""Synthetic RGBD scenes of ellipsoidal objects with exact ground truth.

Depth and instance labels come from per-pixel ray/ellipsoid intersection at
pixel centers; detections are derived from the label image and then
corrupted by a seeded noise model, one generator per frame index, so frames
render identically in any order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument
from .frame import Detection2D, Frame
from .geometry import CameraIntrinsics, Ellipsoid, Pose, ellipsoid_from_pose_size
from .polygon import bbox_of_pixels, mask_to_polygon


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple[float, float, float]
    yaw: float
    size: tuple[float, float, float]

    @property
    def ellipsoid(self) -> Ellipsoid:
        return ellipsoid_from_pose_size(self.center, self.yaw, self.size, self.class_id)


@dataclass(frozen=True)
class NoiseSpec:
    bbox_jitter_px: float = 0.0
    mask_dropout_prob: float = 0.0
    class_confusion_prob: float = 0.0
    depth_noise_m: float = 0.0

    def __post_init__(self):
        for name in ("mask_dropout_prob", "class_confusion_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgument(f"{name} must lie in [0, 1]")
        if self.bbox_jitter_px < 0 or self.depth_noise_m < 0:
            raise InvalidArgument("noise standard deviations must be non-negative")


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    camera: CameraIntrinsics
    trajectory: list[tuple[float, Pose]] = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    floor_z: float | None = None
    allow_overlap: bool = False
    min_mask_pixels: int = 30

    def __post_init__(self):
        if not self.allow_overlap:
            for i, a in enumerate(self.objects):
                for b in self.objects[i + 1:]:
                    d = np.linalg.norm(np.subtract(a.center, b.center))
                    if d <= max(a.size) / 2 + max(b.size) / 2:
                        raise InvalidArgument(f"objects at {a.center} and {b.center} overlap")
        times = [t for t, _ in self.trajectory]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise InvalidArgument("trajectory timestamps must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "objects": [asdict(o) for o in self.objects],
            "camera": asdict(self.camera),
            "trajectory": [{"timestamp": t, "rotation": p.rotation.tolist(), "translation": p.translation.tolist()}
                           for t, p in self.trajectory],
            "noise": asdict(self.noise),
            "seed": self.seed,
            "floor_z": self.floor_z,
            "allow_overlap": self.allow_overlap,
            "min_mask_pixels": self.min_mask_pixels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        return cls(
            objects=[SceneObject(o["class_id"], tuple(o["center"]), o["yaw"], tuple(o["size"])) for o in d["objects"]],
            camera=CameraIntrinsics(**d["camera"]),
            trajectory=[(float(p["timestamp"]), Pose(p["rotation"], p["translation"])) for p in d.get("trajectory", [])],
            noise=NoiseSpec(**d.get("noise", {})),
            seed=int(d.get("seed", 0)),
            floor_z=d.get("floor_z"),
            allow_overlap=bool(d.get("allow_overlap", False)),
            min_mask_pixels=int(d.get("min_mask_pixels", 30)),
        )


def ground_truth_map(scene: SceneSpec) -> list[Ellipsoid]:
    return [o.ellipsoid for o in scene.objects]


def _pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z through every pixel center, shape (H, W, 3)."""
    u = (np.arange(k.width) - k.cx) / k.fx
    v = (np.arange(k.height) - k.cy) / k.fy
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def raycast(scene: SceneSpec, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless z-depth (0 where nothing is hit) and label image (object index + 1, 0 = background)."""
    k = scene.camera
    rays = _pixel_rays(k).reshape(-1, 3)
    dirs = rays @ pose.rotation  # world directions, rows R^T d
    origin = pose.center
    depth = np.full(len(rays), np.inf)
    labels = np.zeros(len(rays), dtype=np.int32)
    for i, obj in enumerate(scene.objects):
        q = obj.ellipsoid
        A = q.shape_matrix
        oc = origin - q.center
        Ad = dirs @ A
        a = np.einsum("ij,ij->i", Ad, dirs)
        b = 2.0 * (Ad @ oc)
        c = float(oc @ A @ oc) - 1.0
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        lam = (-b - sq) / (2.0 * a)
        far = (-b + sq) / (2.0 * a)
        lam = np.where(lam > 0, lam, far)
        hit &= lam > 0
        closer = hit & (lam < depth)
        depth[closer] = lam[closer]
        labels[closer] = i + 1
    if scene.floor_z is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (scene.floor_z - origin[2]) / dirs[:, 2]
        closer = (lam > 0) & (lam < depth)
        depth[closer] = lam[closer]
        labels[closer] = 0
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(k.height, k.width), labels.reshape(k.height, k.width)


def render_frame(scene: SceneSpec, pose: Pose, index: int = 0, timestamp: float = 0.0) -> Frame:
    """Depth, labels and (noisy) detections for one camera pose."""
    k = scene.camera
    depth, labels = raycast(scene, pose)
    rng = np.random.default_rng([scene.seed, index])
    noise = scene.noise
    classes = sorted({o.class_id for o in scene.objects})

    detections = []
    for i, obj in enumerate(scene.objects):
        mask = labels == i + 1
        if mask.sum() < scene.min_mask_pixels:
            continue
        detections.append(Detection2D(obj.class_id, 1.0, bbox_of_pixels(mask), mask_to_polygon(mask)))

    # fixed order: dropout -> class confusion -> bbox jitter -> depth noise
    for det in detections:
        if noise.mask_dropout_prob > 0 and rng.random() < noise.mask_dropout_prob:
            det.mask = None
    for det in detections:
        if noise.class_confusion_prob > 0 and len(classes) > 1 and rng.random() < noise.class_confusion_prob:
            others = [c for c in classes if c != det.class_id]
            det.class_id = int(others[rng.integers(len(others))])
    if noise.bbox_jitter_px > 0:
        for j, det in enumerate(detections):
            x, y, w, h = det.bbox
            dx0, dy0, dx1, dy1 = rng.normal(scale=noise.bbox_jitter_px, size=4)
            x0, y0 = x + dx0, y + dy0
            x1, y1 = max(x + w + dx1, x0 + 1.0), max(y + h + dy1, y0 + 1.0)
            detections[j] = Detection2D(det.class_id, det.score, (x0, y0, x1 - x0, y1 - y0),
                                        det.mask).clamped(k.width, k.height)
    if noise.depth_noise_m > 0:
        valid = depth > 0
        depth = depth.copy()
        depth[valid] += rng.normal(scale=noise.depth_noise_m, size=int(valid.sum()))
        depth[depth < 0] = 0.0
    return Frame(timestamp, depth, detections, pose, labels=labels)


def render_sequence(scene: SceneSpec, workers: int = 1) -> list[Frame]:
    """Render every trajectory pose; results are independent of ``workers``."""
    jobs = [(i, t, p) for i, (t, p) in enumerate(scene.trajectory)]
    if workers <= 1:
        return [render_frame(scene, p, i, t) for i, t, p in jobs]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(lambda j: render_frame(scene, j[2], j[0], j[1]), jobs))


def generate_trajectory(kind: str, **params) -> list[Pose]:
    """Camera paths around a scene.

    ``orbit``: ``radius``, ``height``, ``steps``, optional ``center``, ``target``
    and ``start_angle``; equally spaced poses on a full circle.
    ``arc``: as orbit but from ``start_angle`` to ``end_angle`` inclusive.
    ``offset-replay``: ``poses`` rotated by ``offset`` radians about the
    vertical axis (or ``axis``) through ``center``.
    """
    if kind in ("orbit", "arc"):
        radius = float(params["radius"])
        height = float(params["height"])
        steps = int(params["steps"])
        if radius <= 0 or steps < 1:
            raise InvalidArgument("orbit needs a positive radius and at least one step")
        center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=float)
        target = np.asarray(params.get("target", center), dtype=float)
        a0 = float(params.get("start_angle", 0.0))
        if kind == "orbit":
            angles = a0 + 2.0 * math.pi * np.arange(steps) / steps
        else:
            a1 = float(params["end_angle"])
            angles = np.linspace(a0, a1, steps)
        poses = []
        for a in angles:
            eye = np.array([center[0] + radius * math.cos(a), center[1] + radius * math.sin(a), height])
            poses.append(Pose.look_at(eye, target))
        return poses
    if kind == "offset-replay":
        poses = params["poses"]
        theta = float(params["offset"])
        center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=float)
        axis = np.asarray(params.get("axis", (0.0, 0.0, 1.0)), dtype=float)
        if np.linalg.norm(axis) == 0:
            raise InvalidArgument("rotation axis must be non-zero")
        from .geometry import so3_exp
        G = so3_exp(axis / np.linalg.norm(axis) * theta)
        out = []
        for p in poses:
            c = G @ (p.center - center) + center
            R = p.rotation @ G.T
            out.append(Pose(R, -R @ c))
        return out
    raise InvalidArgument(f"unknown trajectory kind {kind!r}")


def with_timestamps(poses: list[Pose], t0: float = 0.0, dt: float = 1.0 / 30.0) -> list[tuple[float, Pose]]:
    return [(round(t0 + i * dt, 6), p) for i, p in enumerate(poses)]


DESK_CAMERA = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def desk_objects() -> list[SceneObject]:
    """Eight ground-standing objects; two class ids appear twice."""
    spec = [
        (1, (0.00, 0.05), 0.35, (0.60, 0.25, 0.42)),
        (2, (0.95, 0.30), -0.60, (0.50, 0.22, 0.16)),
        (3, (-0.85, 0.55), 1.05, (0.38, 0.26, 0.18)),
        (3, (0.45, -0.85), 0.17, (0.34, 0.24, 0.16)),
        (4, (-0.65, -0.70), 0.0, (0.36, 0.30, 0.46)),
        (5, (0.20, 0.95), 0.0, (0.22, 0.22, 0.30)),
        (6, (-1.15, -0.05), 0.78, (0.44, 0.30, 0.60)),
        (2, (0.90, -0.35), 1.30, (0.46, 0.20, 0.16)),
    ]
    return [SceneObject(c, (x, y, s[2] / 2.0), yaw, s) for c, (x, y), yaw, s in spec]


SCENE_CENTER = (0.0, 0.0, 0.15)


def desk_mapping_scene(seed: int = 0, noise: NoiseSpec | None = None, steps: int = 36) -> SceneSpec:
    poses = generate_trajectory("orbit", radius=2.8, height=1.4, steps=steps, center=(0, 0, 0), target=SCENE_CENTER)
    return SceneSpec(desk_objects(), DESK_CAMERA, with_timestamps(poses), noise or NoiseSpec(), seed)


def desk_query_poses(n: int = 100, offset: float = math.radians(30.0)) -> list[Pose]:
    """Lower, closer viewpoints than the mapping orbit, replayed with a viewpoint offset."""
    base = generate_trajectory("arc", radius=2.5, height=1.0, steps=n, start_angle=0.0,
                               end_angle=2.0 * math.pi * (n - 1) / n, center=(0, 0, 0), target=SCENE_CENTER)
    return generate_trajectory("offset-replay", poses=base, offset=offset, center=(0, 0, 0))


def desk_query_scene(seed: int = 0, noise: NoiseSpec | None = None, n: int = 100,
                     offset: float = math.radians(30.0)) -> SceneSpec:
    if noise is None:
        noise = NoiseSpec(bbox_jitter_px=2.0, mask_dropout_prob=0.05)
    return SceneSpec(desk_objects(), DESK_CAMERA, with_timestamps(desk_query_poses(n, offset), t0=100.0),
                     noise, seed)

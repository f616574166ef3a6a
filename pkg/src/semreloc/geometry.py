"""Projective geometry of ellipsoids and ellipses, rigid poses and pinhole cameras.

Conventions
-----------
* ``Pose`` maps world coordinates to camera coordinates: ``x_c = R @ x_w + t``.
* Pixel ``(row i, col j)`` has its center at image coordinates ``(x=j, y=i)``.
* Ellipsoids and ellipses are stored by their metric parameters; the dual
  forms ``Q*`` (4x4) and ``C*`` (3x3) are derived on demand and satisfy
  ``C* = P Q* P^T`` for ``P = K [R | t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FitDegenerate, InvalidArgument, ProjectionDegenerate

ORTHO_TOL = 1e-9
PSD_CLAMP = 1e-12


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise InvalidArgument(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def wrap_half_pi(angle: float) -> float:
    """Wrap an axis orientation (defined modulo pi) into [-pi/2, pi/2)."""
    a = math.fmod(angle + math.pi / 2, math.pi)
    if a < 0:
        a += math.pi
    a -= math.pi / 2
    # fmod can land exactly on +pi/2 through rounding
    if a >= math.pi / 2:
        a -= math.pi
    return a


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues' formula."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-12:
        return np.eye(3) + K
    return (np.eye(3) + math.sin(theta) / theta * K
            + (1.0 - math.cos(theta)) / theta**2 * K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    # acos is ill-conditioned near 0; use the skew part there
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return math.atan2(s, c)


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3):
        raise InvalidArgument("rotation must be 3x3")
    if not np.abs(R @ R.T - np.eye(3)).max() <= ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise InvalidArgument("rotation is not orthonormal with det +1")


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from world to camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        _check_rotation(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
        """Camera at ``eye`` with optical axis toward ``target``; image y points away from ``up``."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        n = np.linalg.norm(z)
        if n == 0:
            raise InvalidArgument("eye and target coincide")
        z /= n
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-12:
            raise InvalidArgument("viewing direction parallel to up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.vstack([x, y, z])
        return cls(R, -R @ eye)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """``(self ∘ other)(x) = self(other(x))``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def transform(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def retract(self, delta) -> Pose:
        """Left-multiplied increment ``delta = (rho, phi)``: ``R' = exp(phi) R``, ``t' = exp(phi) t + rho``."""
        delta = np.asarray(delta, dtype=float)
        dR = so3_exp(delta[3:])
        R = dR @ self.rotation
        # keep orthonormality exact after many increments
        R = project_to_rotation(R)
        return Pose(R, dR @ self.translation + delta[:3])

    def __repr__(self):
        return f"Pose(center={np.round(self.center, 6).tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, s: float) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                                int(round(self.width * s)), int(round(self.height * s)))

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)

    def backproject(self, u, v, depth) -> np.ndarray:
        u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, depth)))
        return np.stack([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth], axis=-1)


def projection_matrix(pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    return k.K @ np.hstack([pose.rotation, pose.translation[:, None]])


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: np.ndarray
    rotation: np.ndarray
    semi_axes: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        _check_rotation(R)
        axes = _frozen(self.semi_axes, (3,))
        if not np.all(axes > 0):
            raise InvalidArgument("semi-axes must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "center", _frozen(self.center, (3,)))

    @property
    def transform(self) -> np.ndarray:
        """Homogeneous object-to-world transform."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.center
        return T

    @property
    def dual_form(self) -> np.ndarray:
        T = self.transform
        Q = T @ np.diag([*(self.semi_axes**2), -1.0]) @ T.T
        return (Q + Q.T) / 2.0

    @property
    def shape_matrix(self) -> np.ndarray:
        """``A`` with ``(x-c)^T A (x-c) = 1`` on the surface."""
        R = self.rotation
        return R @ np.diag(1.0 / self.semi_axes**2) @ R.T

    @classmethod
    def from_dual(cls, Q, class_id: int = 0) -> Ellipsoid:
        Q = np.asarray(Q, dtype=float)
        Q = (Q + Q.T) / 2.0
        if Q[3, 3] >= 0:
            raise InvalidArgument("not the dual form of an ellipsoid")
        Q = Q / -Q[3, 3]
        c = -Q[:3, 3]
        S = Q[:3, :3] + np.outer(c, c)
        w, V = np.linalg.eigh(S)
        if np.any(w <= 0):
            raise InvalidArgument("not the dual form of an ellipsoid")
        if np.linalg.det(V) < 0:
            V[:, 2] = -V[:, 2]
        return cls(c, V, np.sqrt(w), class_id)

    def with_class(self, class_id: int) -> Ellipsoid:
        return Ellipsoid(self.center, self.rotation, self.semi_axes, class_id)

    def transformed(self, pose: Pose) -> Ellipsoid:
        """Image of the ellipsoid under the rigid map ``pose``."""
        return Ellipsoid(pose.transform(self.center), pose.rotation @ self.rotation,
                         self.semi_axes, self.class_id)

    def __repr__(self):
        return (f"Ellipsoid(center={np.round(self.center, 4).tolist()}, "
                f"semi_axes={np.round(self.semi_axes, 4).tolist()}, class_id={self.class_id})")


def ellipsoid_from_pose_size(center, yaw: float, size, class_id: int = 0) -> Ellipsoid:
    """Ground-standing ellipsoid with yaw about world z and full extents ``(l, w, h)``."""
    size = np.asarray(size, dtype=float)
    if size.shape != (3,) or not np.all(size > 0):
        raise InvalidArgument("size must be three positive extents")
    return Ellipsoid(center, rot_z(yaw), size / 2.0, class_id)


@dataclass(frozen=True, eq=False)
class Ellipse:
    center: np.ndarray
    semi_axes: np.ndarray
    angle: float = 0.0

    def __post_init__(self):
        axes = _frozen(self.semi_axes, (2,))
        if not np.all(axes > 0):
            raise InvalidArgument("semi-axes must be positive")
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "center", _frozen(self.center, (2,)))
        object.__setattr__(self, "angle", wrap_half_pi(float(self.angle)))

    @property
    def area(self) -> float:
        return math.pi * float(self.semi_axes[0] * self.semi_axes[1])

    @property
    def covariance(self) -> np.ndarray:
        R = rot2(self.angle)
        S = R @ np.diag(self.semi_axes**2) @ R.T
        return (S + S.T) / 2.0

    @property
    def dual_conic(self) -> np.ndarray:
        H = np.eye(3)
        H[:2, :2] = rot2(self.angle)
        H[:2, 2] = self.center
        C = H @ np.diag([*(self.semi_axes**2), -1.0]) @ H.T
        return (C + C.T) / 2.0

    @classmethod
    def from_gaussian(cls, mean, cov) -> Ellipse:
        """Ellipse whose 1-sigma level set is the Gaussian ``(mean, cov)``; major axis first."""
        cov = np.asarray(cov, dtype=float)
        w, V = np.linalg.eigh((cov + cov.T) / 2.0)
        if w[0] <= 0:
            raise InvalidArgument("covariance is not positive definite")
        a, b = math.sqrt(w[1]), math.sqrt(w[0])
        if w[1] - w[0] <= 1e-12 * w[1]:
            angle = 0.0
        else:
            angle = math.atan2(V[1, 1], V[0, 1])
        return cls(mean, (a, b), angle)

    @classmethod
    def from_dual_conic(cls, C) -> Ellipse:
        C = np.asarray(C, dtype=float)
        C = (C + C.T) / 2.0
        if not C[2, 2] < 0:
            raise ProjectionDegenerate("dual conic is not an ellipse (C*[2,2] >= 0)")
        C = C / -C[2, 2]
        m = -C[:2, 2]
        S = C[:2, :2] + np.outer(m, m)
        try:
            return cls.from_gaussian(m, S)
        except InvalidArgument as exc:
            raise ProjectionDegenerate("dual conic is not an ellipse") from exc

    def same_as(self, other: Ellipse, tol: float = 1e-9) -> bool:
        """Equality as Gaussians (independent of axis labelling)."""
        return (np.allclose(self.center, other.center, atol=tol)
                and np.allclose(self.covariance, other.covariance, atol=tol * max(1.0, float(self.semi_axes.max())**2)))

    def __repr__(self):
        return (f"Ellipse(center={np.round(self.center, 4).tolist()}, "
                f"semi_axes={np.round(self.semi_axes, 4).tolist()}, angle={self.angle:.6f})")


def project_dual(Q: np.ndarray, pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    P = projection_matrix(pose, k)
    C = P @ Q @ P.T
    return (C + C.T) / 2.0


def project_ellipsoid(q: Ellipsoid, pose: Pose, k: CameraIntrinsics) -> Ellipse:
    """Image ellipse of ``q`` seen by a camera at ``pose``.

    Raises ProjectionDegenerate when the ellipsoid center is behind the camera or
    the ellipsoid crosses the principal plane (its image is then unbounded).
    """
    if pose.transform(q.center)[2] <= 0:
        raise ProjectionDegenerate("ellipsoid center is behind the camera")
    return Ellipse.from_dual_conic(project_dual(q.dual_form, pose, k))


def fit_ellipse_to_points(points) -> Ellipse:
    """Second-moment ellipse of a 2D point set.

    Covariance eigenvalues are scaled by 4, so the result is the 2-sigma level
    set; for points filling an elliptical region this reproduces its boundary.
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 5:
        raise FitDegenerate("need at least 5 points")
    mean = p.mean(axis=0)
    d = p - mean
    cov = d.T @ d / len(p)
    w = np.linalg.eigvalsh(cov)
    if w[0] <= 1e-12 * max(w[1], 1e-300):
        raise FitDegenerate("point scatter is rank deficient")
    return Ellipse.from_gaussian(mean, 4.0 * cov)


def inscribed_ellipse(bbox) -> Ellipse:
    x, y, w, h = (float(v) for v in bbox)
    if not (w > 0 and h > 0):
        raise InvalidArgument("bounding box extents must be positive")
    return Ellipse((x + w / 2.0, y + h / 2.0), (w / 2.0, h / 2.0), 0.0)


def sqrtm_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2.0)
    w = np.where(w < PSD_CLAMP, 0.0, w)
    return (V * np.sqrt(w)) @ V.T


def wasserstein2_sq(e1: Ellipse, e2: Ellipse) -> float:
    """Squared 2-Wasserstein distance between the Gaussian views of two ellipses."""
    S1, S2 = e1.covariance, e2.covariance
    r2 = sqrtm_psd(S2)
    cross = sqrtm_psd(r2 @ S1 @ r2)
    d = float(np.sum((e1.center - e2.center) ** 2) + np.trace(S1 + S2 - 2.0 * cross))
    return max(d, 0.0)


def gaussian_w2_sq_2d(m1, S1, m2, S2) -> float:
    """Closed form of W2^2 for 2x2 covariances.

    Uses ``tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))`` for 2x2 PSD ``M``.
    """
    dm = np.asarray(m1) - np.asarray(m2)
    det1 = max(S1[0, 0] * S1[1, 1] - S1[0, 1] * S1[1, 0], 0.0)
    det2 = max(S2[0, 0] * S2[1, 1] - S2[0, 1] * S2[1, 0], 0.0)
    g = float(np.sum(S1 * S2.T)) + 2.0 * math.sqrt(det1 * det2)
    return float(dm @ dm + np.trace(S1) + np.trace(S2) - 2.0 * math.sqrt(max(g, 0.0)))

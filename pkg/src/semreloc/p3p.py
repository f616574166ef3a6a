"""Perspective-three-point absolute pose (Grunert's quartic)."""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, Pose

COLLINEAR_TOL = 1e-9
REPROJ_TOL = 1e-6


def _polish(coeffs, x: float, iters: int = 3) -> float:
    """Newton steps on the quartic (Horner evaluation)."""
    c = [float(v) for v in coeffs]
    for _ in range(iters):
        f, df = 0.0, 0.0
        for a in c:
            df = df * x + f
            f = f * x + a
        if df == 0.0:
            break
        x -= f / df
    return x


def _cosine_residuals(s1, s2, s3, a2, b2, c2, ca, cb, cg):
    return (s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2)


def _solve3(J, r):
    """3x3 solve by Cramer's rule, least squares when nearly singular."""
    (a, b, c), (d, e, f), (g, h, i) = J
    A = e * i - f * h
    B = f * g - d * i
    C = d * h - e * g
    det = a * A + b * B + c * C
    norm = max(abs(v) for row in J for v in row)
    if abs(det) <= 1e-12 * norm ** 3:
        return np.linalg.lstsq(np.array(J), np.array(r), rcond=None)[0]
    x, y, z = r
    return ((x * A + b * (f * z - y * i) + c * (y * h - e * z)) / det,
            (a * (y * i - f * z) + x * B + c * (d * z - y * g)) / det,
            (a * (e * z - y * h) + b * (y * g - d * z) + x * C) / det)


def _polish_depths(s, a2, b2, c2, ca, cb, cg, iters=8):
    """Newton on the three law-of-cosines equations; ``None`` if they are not satisfied."""
    s1, s2, s3 = (float(v) for v in s)
    scale = max(a2, b2, c2)
    for _ in range(iters):
        F = _cosine_residuals(s1, s2, s3, a2, b2, c2, ca, cb, cg)
        if max(abs(f) for f in F) <= 1e-15 * scale:
            break
        J = ((0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca),
             (2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb),
             (2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0))
        step = _solve3(J, (-F[0], -F[1], -F[2]))
        s1, s2, s3 = s1 + step[0], s2 + step[1], s3 + step[2]
    F = _cosine_residuals(s1, s2, s3, a2, b2, c2, ca, cb, cg)
    if max(abs(f) for f in F) > 1e-6 * scale or min(s1, s2, s3) <= 0:
        return None
    return np.array([s1, s2, s3])


def _absolute_orientation(world, cam):
    """Rigid ``(R, t)`` with ``cam ≈ R @ world + t`` (Kabsch, no scale)."""
    mw, mc = world.mean(axis=0), cam.mean(axis=0)
    H = (world - mw).T @ (cam - mc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mc - R @ mw


def p3p_pose(world_points, image_points, k: CameraIntrinsics) -> list[Pose]:
    """All real camera poses mapping three world points onto three pixels.

    Returns an empty list for collinear world points, coincident image points
    or when no real positive-depth solution exists.
    """
    X = np.asarray(world_points, dtype=float).reshape(3, 3)
    uv = np.asarray(image_points, dtype=float).reshape(3, 2)
    if np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0])) <= COLLINEAR_TOL * max(1.0, np.abs(X).max()) ** 2:
        return []
    rays = np.c_[(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy, np.ones(3)]
    j = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    if min(np.linalg.norm(j[0] - j[1]), np.linalg.norm(j[0] - j[2]), np.linalg.norm(j[1] - j[2])) < 1e-12:
        return []

    a = np.linalg.norm(X[1] - X[2])
    b = np.linalg.norm(X[0] - X[2])
    c = np.linalg.norm(X[0] - X[1])
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    a2, b2, c2 = a * a, b * b, c * c
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2

    A4 = (p - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (p * (1.0 - p) * cb - (1.0 - q) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (p * p - 1.0 + 2.0 * p * p * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
                - 4.0 * q * ca * cb * cg + 2.0 * (b2 - a2) / b2 * cg * cg)
    A1 = 4.0 * (-p * (1.0 + p) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - q) * ca * cg)
    A0 = (1.0 + p) ** 2 - 4.0 * a2 / b2 * cg * cg
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.allclose(coeffs, 0.0):
        return []
    roots = np.roots(coeffs)
    scale = max(1.0, np.abs(roots).max(initial=1.0))

    poses = []
    for r in roots:
        if abs(r.imag) > 1e-6 * scale:
            continue
        v = _polish(coeffs, float(r.real))
        # s1 from the (s1, s3) equation, then u from the (s1, s2) quadratic; the
        # closed-form u of the textbook elimination is 0/0 on symmetric configurations
        den = 1.0 + v * v - 2.0 * v * cb
        if not den > 0:
            continue
        s1sq = b2 / den
        disc = cg * cg - 1.0 + c2 / s1sq
        if disc < -1e-9:
            continue
        root = np.sqrt(max(disc, 0.0))
        for u in {cg + root, cg - root}:
            s = np.array([1.0, u, v]) * np.sqrt(s1sq)
            if np.any(s <= 0):
                continue
            s = _polish_depths(s, a2, b2, c2, ca, cb, cg)
            if s is None:
                continue
            R, t = _absolute_orientation(X, j * s[:, None])
            # Kabsch already returns an orthonormal rotation
            pose = Pose(R, t)
            pc = pose.transform(X)
            if np.any(pc[:, 2] <= 0):
                continue
            err = float(np.abs(k.project(pc) - uv).max())
            if err <= REPROJ_TOL:
                poses.append((pose, err))
    return _dedupe(poses)


def _dedupe(poses, tol: float = 1e-7, max_solutions: int = 4) -> list[Pose]:
    out: list = []
    for p, err in poses:
        if not any(np.abs(p.matrix - o.matrix).max() <= tol for o, _ in out):
            out.append((p, err))
    # near a double root the cluster can exceed four; merge the closest pair
    while len(out) > max_solutions:
        best = None
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                d = np.abs(out[i][0].matrix - out[j][0].matrix).max()
                if best is None or d < best[0]:
                    best = (d, i, j)
        _, i, j = best
        out.pop(j if out[j][1] >= out[i][1] else i)
    return [p for p, _ in out]

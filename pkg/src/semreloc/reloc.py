"""Camera relocalization against an ellipsoidal object map.

Detections become observation ellipses (mask fit for regular objects, the
inscribed bbox ellipse otherwise). A P3P loop over class-consistent object
triplets proposes poses and correspondences; the best proposal is refined by
minimizing the robust, area-normalized Wasserstein distance between observed
and projected ellipses.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import FitDegenerate, InvalidArgument
from .frame import Detection2D
from .geometry import CameraIntrinsics, Ellipse, Ellipsoid, Pose, fit_ellipse_to_points, inscribed_ellipse, skew
from .p3p import p3p_pose
from .polygon import as_polygon, hull_area, interior_pixels, perimeter, polygon_area, simplify_closed

TAU_INLIER = 1.0
HUBER_DELTA = 2.0
MAX_ITERS = 5000
CONVEXITY_MIN = 0.9
SIMPLIFY_TOL = 0.02
VERTEX_RANGE = (3, 6)

MASK_FIT = "mask-fit"
BBOX_INSCRIBED = "bbox-inscribed"
BBOX_ONLY = "bbox-only"
MODES = (MASK_FIT, BBOX_ONLY)

OK = "ok"
NO_SOLUTION = "no-solution"


@dataclass(frozen=True)
class ObservationEllipse:
    ellipse: Ellipse
    class_id: int
    source: str
    area: float

    def __post_init__(self):
        if self.source not in (MASK_FIT, BBOX_INSCRIBED):
            raise InvalidArgument(f"unknown observation source {self.source!r}")

    @classmethod
    def of(cls, ellipse: Ellipse, class_id: int, source: str = MASK_FIT) -> ObservationEllipse:
        return cls(ellipse, int(class_id), source, ellipse.area)


@dataclass
class RelocResult:
    pose: Pose | None
    correspondences: list[tuple[int, int]] = field(default_factory=list)
    inlier_count: int = 0
    final_cost: float = math.inf
    status: str = NO_SOLUTION
    refinement_failed: bool = False
    iterations: int = 0
    cost_history: list[float] = field(default_factory=list)
    timestamp: float | None = None

    @classmethod
    def failed(cls, timestamp: float | None = None) -> RelocResult:
        return cls(None, timestamp=timestamp)


# --- observations -----------------------------------------------------------

def classify_regular(mask, convexity_min: float = CONVEXITY_MIN, tol: float = SIMPLIFY_TOL,
                     vertex_range: tuple[int, int] = VERTEX_RANGE) -> bool:
    """Whether a mask polygon is a simple convex shape with few corners."""
    p = as_polygon(mask)
    if len(p) < 3:
        return False
    area = polygon_area(p)
    hull = hull_area(p)
    if area <= 0 or hull <= 0:
        return False
    if area / hull < convexity_min:
        return False
    n = len(simplify_closed(p, tol * perimeter(p)))
    return vertex_range[0] <= n <= vertex_range[1]


def observation_ellipse(det: Detection2D, mode: str = MASK_FIT) -> ObservationEllipse:
    """Observation ellipse of a detection.

    In ``mask-fit`` mode a regular mask is fitted from its interior pixel
    centers; everything else (and ``bbox-only`` mode) uses the ellipse
    inscribed in the bounding box.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown observation mode {mode!r}")
    if mode == MASK_FIT and det.mask is not None and len(det.mask) >= 3 and classify_regular(det.mask):
        try:
            return ObservationEllipse.of(fit_ellipse_to_points(interior_pixels(det.mask)), det.class_id, MASK_FIT)
        except FitDegenerate:
            pass
    return ObservationEllipse.of(inscribed_ellipse(det.bbox), det.class_id, BBOX_INSCRIBED)


# --- batched projection and distances ----------------------------------------

@dataclass
class _MapArrays:
    Q: np.ndarray  # (n, 4, 4) dual quadrics
    centers: np.ndarray
    classes: np.ndarray
    ids: list[int]

    @classmethod
    def build(cls, map_objects, ids=None) -> _MapArrays:
        ids = list(range(len(map_objects))) if ids is None else [int(i) for i in ids]
        if len(ids) != len(map_objects):
            raise InvalidArgument("one id per map object required")
        if not map_objects:
            return cls(np.zeros((0, 4, 4)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), ids)
        return cls(np.stack([q.dual_form for q in map_objects]), np.stack([q.center for q in map_objects]),
                   np.array([q.class_id for q in map_objects]), ids)


@dataclass
class _ObsArrays:
    m: np.ndarray  # (n, 2)
    S: np.ndarray  # (n, 2, 2)
    s: np.ndarray  # area normalizers
    classes: np.ndarray

    @classmethod
    def build(cls, observations) -> _ObsArrays:
        if not observations:
            return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0, dtype=np.int64))
        return cls(np.stack([o.ellipse.center for o in observations]),
                   np.stack([o.ellipse.covariance for o in observations]),
                   np.array([o.area for o in observations]), np.array([o.class_id for o in observations]))


def _project_gaussians(Q, pose: Pose, k: CameraIntrinsics, centers):
    """Mean/covariance of every projected quadric and a validity mask."""
    P = k.K @ np.c_[pose.rotation, pose.translation]
    C = np.einsum("ij,njk,lk->nil", P, Q, P)
    c22 = C[:, 2, 2]
    depth = centers @ pose.rotation[2] + pose.translation[2]
    valid = (c22 < 0) & (depth > 0)
    den = np.where(valid, -c22, 1.0)
    Cn = C / den[:, None, None]
    m = -Cn[:, :2, 2]
    S = Cn[:, :2, :2] + m[:, :, None] * m[:, None, :]
    det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
    valid &= (det > 0) & (S[:, 0, 0] > 0)
    return m, S, valid


def _w2_pairs(m1, S1, m2, S2):
    """Closed-form 2x2 W2^2 between broadcast-compatible Gaussian batches."""
    dm = m1 - m2
    d1 = np.maximum(S1[..., 0, 0] * S1[..., 1, 1] - S1[..., 0, 1] * S1[..., 1, 0], 0.0)
    d2 = np.maximum(S2[..., 0, 0] * S2[..., 1, 1] - S2[..., 0, 1] * S2[..., 1, 0], 0.0)
    g = np.einsum("...ij,...ji->...", S1, S2) + 2.0 * np.sqrt(d1 * d2)
    tr = np.einsum("...ii->...", S1) + np.einsum("...ii->...", S2)
    return np.maximum((dm * dm).sum(-1) + tr - 2.0 * np.sqrt(np.maximum(g, 0.0)), 0.0)


def normalized_distances(obs: _ObsArrays, mp: _MapArrays, pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Area-normalized W2^2 between every observation and every class-matched visible map object."""
    m, S, valid = _project_gaussians(mp.Q, pose, k, mp.centers)
    D = _w2_pairs(obs.m[:, None], obs.S[:, None], m[None], S[None]) / obs.s[:, None]
    ok = valid[None, :] & (obs.classes[:, None] == mp.classes[None, :])
    return np.where(ok, D, np.inf)


def _score(D: np.ndarray, tau: float):
    """One-to-one inlier assignment maximizing the inlier count, then minimizing total cost."""
    elig = D < tau
    if not elig.any():
        return 0, 0.0, []
    bonus = 4.0 * tau * (min(D.shape) + 1)
    W = np.where(elig, D - bonus, 0.0)
    rows, cols = linear_sum_assignment(W)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if elig[r, c]]
    return len(pairs), float(sum(D[r, c] for r, c in pairs)), pairs


# --- correspondence search ---------------------------------------------------

def _canonical_order(observations) -> list[int]:
    def key(i):
        e = observations[i].ellipse
        return (observations[i].class_id, float(e.center[0]), float(e.center[1]),
                float(e.semi_axes[0]), float(e.semi_axes[1]), float(e.angle))
    return sorted(range(len(observations)), key=key)


def _triplet_candidates(obs_classes, map_classes):
    """Per observation, the map indices sharing its class."""
    return [np.flatnonzero(map_classes == c).tolist() for c in obs_classes]


def _enumerate_triplets(cands, max_iters: int, rng):
    n = len(cands)
    obs_triplets = [t for t in itertools.combinations(range(n), 3) if all(cands[i] for i in t)]
    counts = []
    for t in obs_triplets:
        a, b, c = (cands[i] for i in t)
        counts.append(sum(1 for x in a for y in b for z in c if len({x, y, z}) == 3))
    total = sum(counts)
    if total <= max_iters:
        for t, cnt in zip(obs_triplets, counts):
            if cnt == 0:
                continue
            for combo in itertools.product(*(cands[i] for i in t)):
                if len(set(combo)) == 3:
                    yield t, combo
        return
    weights = np.array(counts, dtype=float) / total
    drawn = 0
    while drawn < max_iters:
        t = obs_triplets[int(rng.choice(len(obs_triplets), p=weights))]
        combo = tuple(int(rng.choice(cands[i])) for i in t)
        if len(set(combo)) != 3:
            continue
        drawn += 1
        yield t, combo


def _debias_triplet(pose: Pose, image: np.ndarray, mp: _MapArrays, idx: list[int], k: CameraIntrinsics,
                    iterations: int = 10, tol: float = 1e-12) -> Pose | None:
    """Re-solve P3P on the winning triplet with ellipse centers shifted onto projected ellipsoid centers.

    The center of a projected ellipsoid is not the image of its 3D center; the
    offset is evaluated at the current pose and the fixed point is usually
    reached in a few iterations.
    """
    world = mp.centers[idx]
    for _ in range(iterations):
        m, _, valid = _project_gaussians(mp.Q[idx], pose, k, world)
        pc = pose.transform(world)
        if not valid.all() or np.any(pc[:, 2] <= 0):
            return None
        sols = p3p_pose(world, image - (m - k.project(pc)), k)
        if not sols:
            return None
        nxt = min(sols, key=lambda s: np.abs(s.matrix - pose.matrix).sum())
        moved = np.abs(nxt.matrix - pose.matrix).max()
        pose = nxt
        if moved < tol:
            break
    return pose


def correspondence_search(observations: list[ObservationEllipse], map_objects: list[Ellipsoid], k: CameraIntrinsics,
                          max_iters: int = MAX_ITERS, tau: float = TAU_INLIER, seed: int = 0,
                          map_ids=None, delta: float = HUBER_DELTA) -> RelocResult:
    """P3P loop over class-consistent (observation, map object) triplets.

    Each P3P pose is scored by a one-to-one assignment of observations to
    class-matched projected map objects with normalized W2^2 below ``tau``.
    The best pose has the most inliers, then the lowest total cost, then the
    earliest triplet in canonical order. Correspondences refer to the caller's
    observation indices and map ids.
    """
    if len(observations) < 3 or len(map_objects) < 3:
        return RelocResult.failed()
    order = _canonical_order(observations)
    obs_sorted = [observations[i] for i in order]
    mp = _MapArrays.build(map_objects, map_ids)
    obs = _ObsArrays.build(obs_sorted)
    cands = _triplet_candidates(obs.classes, mp.classes)
    rng = np.random.default_rng(seed)

    best = None  # (inliers, -cost) with the pose and pairs
    for t, combo in _enumerate_triplets(cands, max_iters, rng):
        world = mp.centers[list(combo)]
        image = obs.m[list(t)]
        for pose in p3p_pose(world, image, k):
            D = normalized_distances(obs, mp, pose, k)
            n_in, cost, pairs = _score(D, tau)
            if n_in < 3:
                continue
            if best is None or n_in > best[0] or (n_in == best[0] and cost < best[1]):
                best = (n_in, cost, pose, pairs, t, combo)
    if best is None:
        return RelocResult.failed()
    n_in, cost, pose, pairs, t, combo = best
    fixed = _debias_triplet(pose, obs.m[list(t)], mp, list(combo), k)
    if fixed is not None:
        n2, c2, p2 = _score(normalized_distances(obs, mp, fixed, k), tau)
        if n2 > n_in or (n2 == n_in and c2 <= cost):
            n_in, pose, pairs = n2, fixed, p2
    corr = sorted((order[r], mp.ids[c]) for r, c in pairs)
    res = RelocResult(pose, corr, n_in, status=OK)
    res.final_cost = robust_cost(pose, observations, map_objects, k, corr, delta, map_ids)
    res.cost_history = [res.final_cost]
    return res


# --- robust Wasserstein objective -------------------------------------------

def huber(e, delta: float = HUBER_DELTA):
    """Robust kernel on a squared residual: ``e`` inside ``delta^2``, linear in ``sqrt(e)`` outside."""
    e = np.asarray(e, dtype=float)
    d2 = delta * delta
    return np.where(e <= d2, e, 2.0 * delta * np.sqrt(np.maximum(e, d2)) - d2)


def huber_weight(e, delta: float = HUBER_DELTA):
    e = np.asarray(e, dtype=float)
    d2 = delta * delta
    return np.where(e <= d2, 1.0, delta / np.sqrt(np.maximum(e, d2)))


def _pose_generators(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of (R, t) along the six left-perturbation directions (rho, phi)."""
    R, t = pose.rotation, pose.translation
    dR = np.zeros((6, 3, 3))
    dt = np.zeros((6, 3))
    for i in range(3):
        dt[i, i] = 1.0
        E = skew(np.eye(3)[i])
        dR[3 + i] = E @ R
        dt[3 + i] = E @ t
    return dR, dt


@dataclass
class _Problem:
    obs: _ObsArrays
    Q: np.ndarray
    centers: np.ndarray
    k: CameraIntrinsics
    delta: float

    @classmethod
    def build(cls, observations, map_objects, k, correspondences, delta, map_ids=None) -> _Problem:
        ids = list(range(len(map_objects))) if map_ids is None else [int(i) for i in map_ids]
        lookup = {mid: q for mid, q in zip(ids, map_objects)}
        obs_list, quads = [], []
        for oi, mid in correspondences:
            if mid not in lookup:
                raise InvalidArgument(f"unknown map object id {mid}")
            obs_list.append(observations[oi])
            quads.append(lookup[mid])
        return cls(_ObsArrays.build(obs_list), np.stack([q.dual_form for q in quads]) if quads else np.zeros((0, 4, 4)),
                   np.stack([q.center for q in quads]) if quads else np.zeros((0, 3)), k, delta)

    def cost(self, pose: Pose) -> float:
        m, S, valid = _project_gaussians(self.Q, pose, self.k, self.centers)
        if not valid.all():
            return math.inf
        e = _w2_pairs(self.obs.m, self.obs.S, m, S) / self.obs.s
        return float(huber(e, self.delta).sum())

    def residuals(self, pose: Pose) -> np.ndarray:
        """Area-normalized W2^2 per correspondence (``inf`` where the projection is invalid)."""
        m, S, valid = _project_gaussians(self.Q, pose, self.k, self.centers)
        e = _w2_pairs(self.obs.m, self.obs.S, m, S) / self.obs.s
        return np.where(valid, e, np.inf)

    def cost_and_gradient(self, pose: Pose):
        """Robust cost and its gradient w.r.t. the left increment ``(rho, phi)``."""
        K = self.k.K
        R, t = pose.rotation, pose.translation
        P = K @ np.c_[R, t]
        QP = np.einsum("njk,lk->njl", self.Q, P)  # Q P^T
        C = np.einsum("ij,njl->nil", P, QP)
        c22 = C[:, 2, 2]
        depth = self.centers @ R[2] + t[2]
        if np.any(c22 >= 0) or np.any(depth <= 0):
            return math.inf, np.full(6, np.nan)
        m = C[:, :2, 2] / c22[:, None]
        S = -C[:, :2, :2] / c22[:, None, None] + m[:, :, None] * m[:, None, :]
        detS = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] ** 2
        if np.any(detS <= 0):
            return math.inf, np.full(6, np.nan)

        mo, So, s = self.obs.m, self.obs.S, self.obs.s
        detSo = So[:, 0, 0] * So[:, 1, 1] - So[:, 0, 1] ** 2
        root = np.sqrt(np.maximum(detS * detSo, 0.0))
        g = np.einsum("nij,nji->n", S, So) + 2.0 * root
        sg = np.sqrt(np.maximum(g, 1e-300))
        dm_ = m - mo
        f = np.maximum((dm_ ** 2).sum(1) + np.einsum("nii->n", S) + np.einsum("nii->n", So) - 2.0 * sg, 0.0)
        e = f / s
        cost = float(huber(e, self.delta).sum())

        Sinv = np.linalg.inv(S)
        Gm = 2.0 * dm_
        GS = np.eye(2)[None] - (So + root[:, None, None] * Sinv) / sg[:, None, None]
        w = huber_weight(e, self.delta) / s

        dRg, dtg = _pose_generators(pose)
        dP = np.einsum("ij,kjl->kil", K, np.concatenate([dRg, dtg[:, :, None]], axis=2))  # (6, 3, 4)
        X = np.einsum("kij,njl->knil", dP, QP)  # dP Q P^T, (6, n, 3, 3)
        dC = X + np.swapaxes(X, -1, -2)
        dc22 = dC[..., 2, 2]
        dm = (dC[..., :2, 2] - m[None] * dc22[..., None]) / c22[None, :, None]
        dS = (-dC[..., :2, :2] / c22[None, :, None, None]
              + C[None, :, :2, :2] * (dc22 / c22[None] ** 2)[..., None, None]
              + dm[..., :, None] * m[None, :, None, :] + m[None, :, :, None] * dm[..., None, :])
        df = np.einsum("ni,kni->kn", Gm, dm) + np.einsum("nij,knij->kn", GS, dS)
        grad = df @ w
        return cost, grad


def robust_cost(pose: Pose, observations, map_objects, k: CameraIntrinsics, correspondences,
                delta: float = HUBER_DELTA, map_ids=None) -> float:
    """Sum over correspondences of ``rho(W2^2 / s_i)`` with ``s_i`` the observation ellipse area."""
    return _Problem.build(observations, map_objects, k, correspondences, delta, map_ids).cost(pose)


def robust_cost_gradient(pose: Pose, observations, map_objects, k: CameraIntrinsics, correspondences,
                         delta: float = HUBER_DELTA, map_ids=None):
    return _Problem.build(observations, map_objects, k, correspondences, delta, map_ids).cost_and_gradient(pose)


def _hessian(problem: _Problem, pose: Pose, h: float = 1e-6) -> np.ndarray:
    H = np.zeros((6, 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        _, gp = problem.cost_and_gradient(pose.retract(d))
        _, gm = problem.cost_and_gradient(pose.retract(-d))
        H[:, i] = (gp - gm) / (2.0 * h)
    return (H + H.T) / 2.0


def _damped_newton(problem: _Problem, pose: Pose, max_iterations: int, grad_tol: float, step_tol: float,
                   max_rejections: int):
    """Returns ``(pose, cost, history, iterations, failed)``; accepted costs never increase."""
    cost, grad = problem.cost_and_gradient(pose)
    history = [cost]
    if not math.isfinite(cost):
        return pose, cost, history, 0, True
    lam = None
    rejections = accepted = it = 0
    failed = False
    while it < max_iterations:
        if np.linalg.norm(grad) < grad_tol:
            break
        H = _hessian(problem, pose)
        if not np.all(np.isfinite(H)):
            failed = accepted == 0
            break
        scale = max(float(np.abs(np.diag(H)).mean()), 1e-12)
        if lam is None:
            lam = 1e-4 * scale
        it += 1
        A = H + lam * np.eye(6)
        try:
            np.linalg.cholesky(A)
            step = np.linalg.solve(A, -grad)
        except np.linalg.LinAlgError:
            step = None
        if step is not None and np.linalg.norm(step) < step_tol:
            break
        if step is not None:
            cand = pose.retract(step)
            c_new, g_new = problem.cost_and_gradient(cand)
            if math.isfinite(c_new) and c_new < cost:
                pose, cost, grad = cand, c_new, g_new
                history.append(cost)
                accepted += 1
                rejections = 0
                lam = max(lam / 3.0, 1e-12 * scale)
                continue
        rejections += 1
        lam *= 4.0
        if rejections >= max_rejections:
            failed = accepted == 0
            break
    return pose, cost, history, it, failed


def refine_pose(initial: RelocResult, observations: list[ObservationEllipse], map_objects: list[Ellipsoid],
                k: CameraIntrinsics, delta: float = HUBER_DELTA, max_iterations: int = 100,
                grad_tol: float = 1e-8, step_tol: float = 1e-10, max_rejections: int = 10,
                map_ids=None, tau: float = TAU_INLIER, outlier_rounds: int = 4) -> RelocResult:
    """Damped Newton refinement of the robust Wasserstein objective over SE(3).

    The gradient is analytic; the Hessian is a central difference of the
    gradient. A step is accepted only if it lowers the cost, so accepted
    costs never increase. Between rounds, correspondences whose normalized
    W2^2 exceeds ``tau`` at the current pose are excluded (and readmitted if
    they drop back below it); at least three are always kept. If the first
    round makes no progress within ``max_rejections`` damped steps the initial
    pose is returned with ``refinement_failed`` set.
    """
    if initial.status != OK or initial.pose is None:
        raise InvalidArgument("refinement needs a successful initial result")
    if not initial.correspondences:
        raise InvalidArgument("refinement needs correspondences")
    full = _Problem.build(observations, map_objects, k, initial.correspondences, delta, map_ids)
    active = list(initial.correspondences)
    pose = initial.pose
    history: list[float] = []
    iterations = 0
    cost = math.inf
    for round_ in range(max(outlier_rounds, 1)):
        problem = _Problem.build(observations, map_objects, k, active, delta, map_ids)
        pose_r, cost_r, hist, it, failed = _damped_newton(problem, pose, max_iterations, grad_tol, step_tol,
                                                          max_rejections)
        iterations += it
        if failed and round_ == 0:
            return replace(initial, refinement_failed=True, iterations=iterations, cost_history=hist)
        if failed:
            break
        pose, cost = pose_r, cost_r
        # dropping terms at a fixed pose can only lower the cost, so the history stays monotone
        history.extend(hist)
        e = full.residuals(pose)
        keep = [c for c, ei in zip(initial.correspondences, e) if ei < tau]
        if len(keep) < 3 or keep == active:
            break
        active = keep
    return replace(initial, pose=pose, final_cost=cost, iterations=iterations, cost_history=history,
                   correspondences=sorted(active), inlier_count=len(active), refinement_failed=False)


def reassociate(result: RelocResult, observations, map_objects, k: CameraIntrinsics, tau: float = TAU_INLIER,
                map_ids=None) -> RelocResult:
    """Recompute the one-to-one inlier set at the result's pose."""
    if result.status != OK or result.pose is None or len(observations) == 0:
        return result
    mp = _MapArrays.build(map_objects, map_ids)
    D = normalized_distances(_ObsArrays.build(observations), mp, result.pose, k)
    n_in, _, pairs = _score(D, tau)
    if n_in < 3:
        return result
    corr = sorted((r, mp.ids[c]) for r, c in pairs)
    return replace(result, correspondences=corr, inlier_count=n_in)


def relocalize_frame(detections: list[Detection2D], map_objects: list[Ellipsoid], k: CameraIntrinsics,
                     mode: str = MASK_FIT, tau: float = TAU_INLIER, delta: float = HUBER_DELTA,
                     max_iters: int = MAX_ITERS, seed: int = 0, map_ids=None, border_margin: float = 2.0,
                     timestamp: float | None = None, max_iterations: int = 100,
                     outlier_rounds: int = 4) -> RelocResult:
    """Full per-frame relocalization: observations, P3P loop, refinement, one re-association pass.

    Detections whose box touches the image border (within ``border_margin``
    pixels) are skipped, since their boxes and masks are truncated.
    Correspondences index into ``detections``.
    """
    kept = [i for i, d in enumerate(detections) if _inside(d.bbox, k, border_margin)]
    observations = [observation_ellipse(detections[i], mode) for i in kept]
    res = correspondence_search(observations, map_objects, k, max_iters, tau, seed, map_ids, delta)
    if res.status != OK:
        return RelocResult.failed(timestamp)
    opts = dict(map_ids=map_ids, tau=tau, max_iterations=max_iterations, outlier_rounds=outlier_rounds)
    res = refine_pose(res, observations, map_objects, k, delta, **opts)
    again = reassociate(res, observations, map_objects, k, tau, map_ids)
    if again.correspondences != res.correspondences:
        res = refine_pose(again, observations, map_objects, k, delta, **opts)
    res.correspondences = [(kept[i], m) for i, m in res.correspondences]
    res.timestamp = timestamp
    return res


def _inside(bbox, k: CameraIntrinsics, margin: float) -> bool:
    x, y, w, h = bbox
    return (x >= -0.5 + margin and y >= -0.5 + margin
            and x + w <= k.width - 0.5 - margin and y + h <= k.height - 0.5 - margin)

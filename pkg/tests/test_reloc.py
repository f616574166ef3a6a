import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semreloc.errors import InvalidArgument
from semreloc.frame import Detection2D
from semreloc.geometry import (
    CameraIntrinsics,
    Ellipse,
    Pose,
    project_ellipsoid,
    rotation_angle,
    so3_exp,
    wrap_half_pi,
)
from semreloc.p3p import p3p_pose
from semreloc.reloc import (
    BBOX_INSCRIBED,
    MASK_FIT,
    OK,
    ObservationEllipse,
    RelocResult,
    classify_regular,
    correspondence_search,
    huber,
    observation_ellipse,
    refine_pose,
    relocalize_frame,
    robust_cost,
    robust_cost_gradient,
)
from semreloc.simulator import DESK_CAMERA, desk_mapping_scene, ground_truth_map

from . import oracles

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
MAP = ground_truth_map(desk_mapping_scene())
MAP_POSES = [p for _, p in desk_mapping_scene().trajectory]


def exact_observations(pose, objs=MAP, k=DESK_CAMERA):
    return [ObservationEllipse.of(project_ellipsoid(q, pose, k), q.class_id) for q in objs]


def pose_errors(a: Pose, b: Pose):
    return float(np.linalg.norm(a.center - b.center)), math.degrees(rotation_angle(a.rotation @ b.rotation.T))


def perturb(pose: Pose, rng, dist=0.10, angle_deg=5.0):
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    R = so3_exp(ax * math.radians(angle_deg)) @ pose.rotation
    c = pose.center + dist * d
    return Pose(R, -R @ c)


def rect_polygon(center, w, h, angle):
    c, s = math.cos(angle), math.sin(angle)
    local = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    return local @ np.array([[c, s], [-s, c]]) + center


class TestClassifyRegular:
    def test_square(self):
        assert classify_regular([(0, 0), (10, 0), (10, 10), (0, 10)])

    def test_rotated_rectangle(self):
        assert classify_regular(rect_polygon((50, 50), 40, 15, 0.4))

    def test_l_shape(self):
        t = 1.0 - math.sqrt(0.4)
        L = np.array([(0, 0), (1, 0), (1, t), (t, t), (t, 1), (0, 1)]) * 50
        assert oracles.shoelace(L) / oracles.shoelace(oracles.convex_hull(L)) == pytest.approx(0.75)
        assert not classify_regular(L)

    def test_circle_64(self):
        t = np.arange(64) * 2 * math.pi / 64
        assert not classify_regular(np.stack([30 * np.cos(t), 30 * np.sin(t)], 1))

    def test_degenerate(self):
        assert not classify_regular([(0, 0), (1, 1), (2, 2)])
        assert not classify_regular([(0, 0), (1, 1)])


class TestObservationEllipse:
    def test_rotated_rectangle_mask(self):
        poly = rect_polygon((200.0, 150.0), 80.0, 30.0, math.radians(30))
        det = Detection2D(3, 0.9, (150, 120, 100, 60), poly)
        obs = observation_ellipse(det)
        assert obs.source == MASK_FIT
        # covariance oracle on the interior pixel centers
        yy, xx = np.mgrid[0:400, 0:400]
        pts = np.stack([xx.ravel(), yy.ravel()], 1).astype(float)
        local = (pts - [200.0, 150.0]) @ np.array([[math.cos(0.5236), -math.sin(0.5236)],
                                                   [math.sin(0.5236), math.cos(0.5236)]])
        inside = pts[(np.abs(local[:, 0]) < 40) & (np.abs(local[:, 1]) < 15)]
        w, V = np.linalg.eigh(np.cov(inside.T))
        oracle = math.degrees(math.atan2(V[1, 1], V[0, 1]))
        assert math.degrees(obs.ellipse.angle) == pytest.approx(30.0, abs=1.0)
        assert abs(wrap_half_pi(obs.ellipse.angle - math.radians(oracle))) < math.radians(0.5)
        assert obs.area == pytest.approx(math.pi * obs.ellipse.semi_axes.prod(), abs=1e-9)

    def test_bbox_without_mask(self):
        obs = observation_ellipse(Detection2D(1, 1.0, (0, 0, 4, 2)))
        assert obs.source == BBOX_INSCRIBED
        assert np.allclose(obs.ellipse.center, (2, 1)) and np.allclose(obs.ellipse.semi_axes, (2, 1))
        assert obs.area == pytest.approx(2 * math.pi, abs=1e-12)

    def test_concave_mask_uses_bbox(self):
        L = np.array([(0, 0), (60, 0), (60, 10), (10, 10), (10, 60), (0, 60)], float)
        obs = observation_ellipse(Detection2D(1, 1.0, (0, 0, 60, 60), L))
        assert obs.source == BBOX_INSCRIBED

    def test_bbox_only_mode(self):
        poly = rect_polygon((100.0, 100.0), 60.0, 20.0, 0.3)
        obs = observation_ellipse(Detection2D(1, 1.0, (60, 80, 80, 40), poly), mode="bbox-only")
        assert obs.source == BBOX_INSCRIBED

    def test_unknown_mode(self):
        with pytest.raises(InvalidArgument):
            observation_ellipse(Detection2D(1, 1.0, (0, 0, 4, 2)), mode="magic")


class TestP3P:
    def random_case(self, rng):
        while True:
            X = rng.uniform(-1, 1, (3, 3))
            eye = rng.normal(size=3)
            eye *= rng.uniform(3, 6) / np.linalg.norm(eye)
            pose = Pose.look_at(eye, X.mean(0) + rng.normal(scale=0.2, size=3), up=rng.normal(size=3))
            pc = pose.transform(X)
            if np.all(pc[:, 2] > 0.1):
                return X, pose, K.project(pc)

    def test_contains_ground_truth(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            X, pose, uv = self.random_case(rng)
            sols = p3p_pose(X, uv, K)
            assert 1 <= len(sols) <= 4
            best = min(sols, key=lambda s: np.abs(s.matrix - pose.matrix).max())
            assert rotation_angle(best.rotation @ pose.rotation.T) < 1e-6
            assert np.linalg.norm(best.translation - pose.translation) < 1e-6

    def test_map_object_centers(self):
        pose = MAP_POSES[3]
        X = np.stack([q.center for q in MAP[:3]])
        sols = p3p_pose(X, DESK_CAMERA.project(pose.transform(X)), DESK_CAMERA)
        assert any(rotation_angle(s.rotation @ pose.rotation.T) < 1e-6
                   and np.linalg.norm(s.translation - pose.translation) < 1e-6 for s in sols)

    def test_equilateral_frontal(self):
        X = np.array([[math.cos(a), math.sin(a), 5.0] for a in np.radians([90, 210, 330])])
        uv = K.project(X)
        sols = p3p_pose(X, uv, K)
        assert len(sols) >= 2
        assert any(np.allclose(s.matrix, np.eye(4), atol=1e-6) for s in sols)
        for s in sols:
            assert np.abs(K.project(s.transform(X)) - uv).max() < 1e-6
        # the non-trivial solutions come in mirror pairs about the vertical axis
        others = [s for s in sols if not np.allclose(s.matrix, np.eye(4), atol=1e-6)]
        flip = np.diag([-1.0, 1.0, 1.0])
        for s in others:
            mirrored = flip @ s.rotation @ flip
            assert any(np.allclose(mirrored, o.rotation, atol=1e-6) for o in others)

    def test_collinear(self):
        X = np.array([[0, 0, 5], [1, 0, 5], [2, 0, 5]], float)
        assert p3p_pose(X, K.project(X), K) == []

    def test_coincident_image_points(self):
        X = np.array([[0, 0, 5], [1, 0, 5], [0, 1, 5]], float)
        assert p3p_pose(X, np.array([[320, 240]] * 3, float), K) == []

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_every_solution_reprojects(self, seed):
        X, _, uv = self.random_case(np.random.default_rng(seed))
        for s in p3p_pose(X, uv, K):
            assert np.abs(K.project(s.transform(X)) - uv).max() < 1e-6


class TestCorrespondenceSearch:
    def test_exact_at_mapped_viewpoint(self):
        gt = MAP_POSES[5]
        obs = exact_observations(gt)
        res = correspondence_search(obs, MAP, DESK_CAMERA)
        assert res.status == OK
        assert res.inlier_count == 8
        assert res.correspondences == [(i, i) for i in range(8)]
        pe, re = pose_errors(res.pose, gt)
        assert pe < 1e-3 and re < 0.01

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        gt = MAP_POSES[11]
        obs = exact_observations(gt)
        ref = correspondence_search(obs, MAP, DESK_CAMERA)
        for _ in range(3):
            perm = rng.permutation(len(obs))
            res = correspondence_search([obs[i] for i in perm], MAP, DESK_CAMERA)
            # map back to the original observation indices
            assert sorted((int(perm[i]), m) for i, m in res.correspondences) == ref.correspondences
            assert np.allclose(res.pose.matrix, ref.pose.matrix)

    def test_two_observations(self):
        obs = exact_observations(MAP_POSES[0])[:2]
        assert correspondence_search(obs, MAP, DESK_CAMERA).status == "no-solution"

    def test_scale_invariant(self):
        gt = MAP_POSES[7]
        rng = np.random.default_rng(2)
        obs = [ObservationEllipse.of(Ellipse(o.ellipse.center + rng.normal(size=2), o.ellipse.semi_axes,
                                             o.ellipse.angle), o.class_id) for o in exact_observations(gt)]
        ref = correspondence_search(obs, MAP, DESK_CAMERA)
        for s in (0.5, 2.0, 3.0):
            k2 = DESK_CAMERA.scaled(s)
            scaled = [ObservationEllipse.of(Ellipse(o.ellipse.center * s, o.ellipse.semi_axes * s, o.ellipse.angle),
                                            o.class_id) for o in obs]
            res = correspondence_search(scaled, MAP, k2)
            assert res.correspondences == ref.correspondences
            assert res.inlier_count == ref.inlier_count

    def test_map_ids(self):
        gt = MAP_POSES[2]
        ids = [10 * i + 3 for i in range(8)]
        res = correspondence_search(exact_observations(gt), MAP, DESK_CAMERA, map_ids=ids)
        assert res.correspondences == [(i, ids[i]) for i in range(8)]

    def test_sampled_mode_deterministic(self):
        gt = MAP_POSES[9]
        obs = exact_observations(gt)
        a = correspondence_search(obs, MAP, DESK_CAMERA, max_iters=20, seed=4)
        b = correspondence_search(obs, MAP, DESK_CAMERA, max_iters=20, seed=4)
        assert a.correspondences == b.correspondences
        if a.status == OK:
            assert np.array_equal(a.pose.matrix, b.pose.matrix)


ALL = [(i, i) for i in range(8)]


class TestObjective:
    def test_huber(self):
        assert huber(1.0) == 1.0
        assert huber(16.0) == pytest.approx(2 * 2 * 4 - 4)
        # continuous with matching slope at the knee
        assert huber(4.0 + 1e-9) == pytest.approx(4.0, abs=1e-8)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for i in range(25):
            gt = MAP_POSES[i % len(MAP_POSES)]
            obs = exact_observations(gt)
            pose = gt.retract(rng.normal(scale=0.05, size=6))
            c, g = robust_cost_gradient(pose, obs, MAP, DESK_CAMERA, ALL)
            fd = np.zeros(6)
            for a in range(6):
                d = np.zeros(6)
                d[a] = 1e-6
                fd[a] = (robust_cost(pose.retract(d), obs, MAP, DESK_CAMERA, ALL)
                         - robust_cost(pose.retract(-d), obs, MAP, DESK_CAMERA, ALL)) / 2e-6
            worst = max(worst, np.linalg.norm(fd - g) / np.linalg.norm(fd))
        assert worst < 1e-4

    def test_zero_at_truth(self):
        gt = MAP_POSES[0]
        assert robust_cost(gt, exact_observations(gt), MAP, DESK_CAMERA, ALL) < 1e-9


class TestRefine:
    def test_truth_is_fixed_point(self):
        gt = MAP_POSES[4]
        res = refine_pose(RelocResult(gt, ALL, 8, status=OK), exact_observations(gt), MAP, DESK_CAMERA)
        assert res.final_cost < 1e-9
        assert np.abs(res.pose.matrix - gt.matrix).max() < 1e-8

    def test_converges_from_perturbation(self):
        rng = np.random.default_rng(4)
        for i in range(10):
            gt = MAP_POSES[3 * i]
            init = RelocResult(perturb(gt, rng), ALL, 8, status=OK)
            obs = exact_observations(gt)
            init.final_cost = robust_cost(init.pose, obs, MAP, DESK_CAMERA, ALL)
            res = refine_pose(init, obs, MAP, DESK_CAMERA)
            pe, re = pose_errors(res.pose, gt)
            assert pe < 1e-3 and re < 0.05
            assert res.iterations <= 100
            assert res.final_cost <= init.final_cost
            assert all(b <= a for a, b in zip(res.cost_history, res.cost_history[1:]))

    def test_outlier_suppressed(self):
        rng = np.random.default_rng(5)
        for i in range(10):
            gt = MAP_POSES[2 * i + 1]
            obs = [ObservationEllipse.of(Ellipse(o.ellipse.center + rng.normal(size=2),
                                                 o.ellipse.semi_axes * (1 + rng.normal(scale=0.02, size=2)),
                                                 o.ellipse.angle + rng.normal(scale=0.02)), o.class_id)
                   for o in exact_observations(gt)]
            init = RelocResult(gt.retract(rng.normal(scale=0.02, size=6)), ALL, 8, status=OK)
            clean = refine_pose(init, obs, MAP, DESK_CAMERA)
            j = int(rng.integers(8))
            e = obs[j].ellipse
            bad = list(obs)
            bad[j] = ObservationEllipse.of(Ellipse(e.center + [150.0, -120.0], e.semi_axes * [1.5, 0.7], e.angle + 1.0),
                                           obs[j].class_id)
            dirty = refine_pose(init, bad, MAP, DESK_CAMERA)
            e_clean, _ = pose_errors(clean.pose, gt)
            e_dirty, _ = pose_errors(dirty.pose, gt)
            assert e_dirty <= 3 * e_clean
            assert (j, j) not in dirty.correspondences

    def test_invalid_start_flags_failure(self):
        gt = MAP_POSES[0]
        behind = Pose(gt.rotation, gt.translation - 2 * gt.rotation @ (MAP[0].center - gt.center))
        init = RelocResult(behind, ALL, 8, status=OK)
        res = refine_pose(init, exact_observations(gt), MAP, DESK_CAMERA)
        assert res.refinement_failed
        assert res.pose is behind and res.status == OK

    def test_requires_ok(self):
        with pytest.raises(InvalidArgument):
            refine_pose(RelocResult.failed(), [], MAP, DESK_CAMERA)


class TestRelocalizeFrame:
    def test_no_detections(self):
        assert relocalize_frame([], MAP, DESK_CAMERA).status == "no-solution"

    def test_exact_detections(self):
        gt = MAP_POSES[8]
        dets = []
        for q in MAP:
            e = project_ellipsoid(q, gt, DESK_CAMERA)
            (x0, x1), (y0, y1) = _ellipse_extent(e)
            dets.append(Detection2D(q.class_id, 1.0, (x0, y0, x1 - x0, y1 - y0)))
        res = relocalize_frame(dets, MAP, DESK_CAMERA)
        assert res.status == OK
        pe, re = pose_errors(res.pose, gt)
        assert pe < 0.10 and re < 3.0


def _ellipse_extent(e):
    S = e.covariance
    hx, hy = math.sqrt(S[0, 0]), math.sqrt(S[1, 1])
    return (e.center[0] - hx, e.center[0] + hx), (e.center[1] - hy, e.center[1] + hy)

import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semreloc.errors import IntegrationError, InvalidArgument
from semreloc.frame import Frame
from semreloc.geometry import CameraIntrinsics, Pose
from semreloc.simulator import SceneObject, SceneSpec, raycast, with_timestamps
from semreloc.voxels import (
    ObjectInstanceModel,
    SemanticVoxel,
    VoxelKey,
    filter_voxels,
    integrate_observation,
    logit,
    promote_if_ready,
    update_label_probability,
)

K_LOW = CameraIntrinsics(130.0, 130.0, 79.5, 59.5, 160, 120)
SPHERE_C = np.array([0.0, 0.0, 0.3])
SPHERE_R = 0.3


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def replay(hits, misses, hit_prob=0.7, miss_prob=0.4):
    """Closed-form fusion of counts in log-odds (valid while no clamping occurs)."""
    return sigmoid(hits * logit(hit_prob) + misses * logit(miss_prob))


def sphere_scene(poses, k=K_LOW):
    obj = SceneObject(1, tuple(SPHERE_C), 0.0, (2 * SPHERE_R,) * 3)
    return SceneSpec([obj], k, with_timestamps(poses), floor_z=0.0)


def near_surface(centers, tol):
    return np.abs(np.linalg.norm(centers - SPHERE_C, axis=1) - SPHERE_R) <= tol


class TestVoxelKey:
    def test_round_trip_in_cell(self):
        rng = np.random.default_rng(0)
        res = 0.02
        for _ in range(200):
            key = VoxelKey(*rng.integers(-1000, 1000, 3).tolist())
            p = key.center(res) + rng.uniform(-0.49, 0.49, 3) * res
            assert VoxelKey.from_point(p, res) == key

    def test_center_formula(self):
        assert np.allclose(VoxelKey(0, -1, 2).center(0.02), [0.01, -0.01, 0.05])

    def test_log_odds_view(self):
        v = SemanticVoxel(0.7)
        assert abs(sigmoid(v.log_odds) - 0.7) < 1e-12


class TestUpdateLabelProbability:
    def test_uniform_prior_passes_observation(self):
        assert update_label_probability(0.5, 0.7, 0.5) == pytest.approx(0.7, abs=1e-15)

    def test_cancellation(self):
        assert update_label_probability(0.7, 0.3, 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_repeated_hit(self):
        direct = 1.0 / (1.0 + (0.3 / 0.7) * (0.3 / 0.7))
        assert direct == pytest.approx(49 / 58, abs=1e-15)
        assert update_label_probability(0.7, 0.7, 0.5) == pytest.approx(49 / 58, abs=1e-15)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(InvalidArgument):
            update_label_probability(bad, 0.7)
        with pytest.raises(InvalidArgument):
            update_label_probability(0.5, bad)
        with pytest.raises(InvalidArgument):
            update_label_probability(0.5, 0.7, bad)

    def test_clamped(self):
        p = 0.5
        for _ in range(50):
            p = update_label_probability(p, 0.9)
        assert p == 0.999
        for _ in range(100):
            p = update_label_probability(p, 0.1)
        assert p == 0.001

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_log_odds_addition(self, prior, obs):
        post = update_label_probability(prior, obs, 0.5)
        expected = sigmoid(logit(prior) + logit(obs))
        if 0.001 < expected < 0.999:
            assert abs(post - expected) < 1e-12

    @given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    def test_class_prior_term(self, prior, obs, c):
        post = update_label_probability(prior, obs, c)
        expected = sigmoid(logit(prior) + logit(obs) - logit(c))
        assert abs(post - min(max(expected, 0.001), 0.999)) < 1e-12


def fuse(seq, p=0.5):
    for z in seq:
        p = update_label_probability(p, z)
    return p


def unclamped_sequence(rng, n=20):
    """Observations whose partial log-odds sums all stay inside the clamp band."""
    u = rng.uniform(-1.0, 1.0, n)
    scale = rng.uniform(0.1, 0.95) * logit(0.999) / np.abs(u).sum()
    return 1.0 / (1.0 + np.exp(-u * scale))


class TestOrderInvariance:
    def test_permutations_agree(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            seq = unclamped_sequence(rng)
            ref = fuse(seq)
            for _ in range(5):
                assert abs(fuse(rng.permutation(seq)) - ref) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.42, 0.58), min_size=20, max_size=20), st.randoms(use_true_random=False))
    def test_hypothesis_permutation(self, seq, rnd):
        # 20 * |logit(0.58)| < logit(0.999): no clamping on any prefix
        shuffled = list(seq)
        rnd.shuffle(shuffled)
        assert abs(fuse(seq) - fuse(shuffled)) < 1e-12


class TestIntegrate:
    def test_single_frame_sphere(self):
        pose = Pose.look_at((1.6, 0.0, 1.2), SPHERE_C)
        scene = sphere_scene([pose])
        depth, labels = raycast(scene, pose)
        model = integrate_observation(ObjectInstanceModel(0, 1), Frame(0.0, depth), labels == 1, pose, K_LOW)
        assert len(model) > 50
        assert np.allclose(model.probabilities(), 0.7, atol=1e-15)
        assert all(v.hit_count == 1 for v in model.voxels.values())
        # every voxel contains a surface point, so its center is within half a diagonal of the surface
        assert near_surface(model.centers(), 0.5 * math.sqrt(3) * 0.02 + 1e-9).all()

    def test_three_consistent_frames(self):
        pose = Pose.look_at((1.6, 0.0, 1.2), SPHERE_C)
        depth, labels = raycast(sphere_scene([pose]), pose)
        model = ObjectInstanceModel(0, 1)
        for i in range(3):
            integrate_observation(model, Frame(float(i), depth), labels == 1, pose, K_LOW)
        expected = 0.7**3 / (0.7**3 + 0.3**3)
        assert expected == pytest.approx(0.927, abs=5e-4)
        assert np.allclose(model.probabilities(), expected, atol=1e-12)

    def test_polygon_and_bool_masks_agree(self):
        from semreloc.polygon import mask_to_polygon, rasterize
        pose = Pose.look_at((1.6, 0.0, 1.2), SPHERE_C)
        depth, labels = raycast(sphere_scene([pose]), pose)
        poly = mask_to_polygon(labels == 1)
        a = integrate_observation(ObjectInstanceModel(0, 1), Frame(0.0, depth), poly, pose, K_LOW)
        b = integrate_observation(ObjectInstanceModel(0, 1), Frame(0.0, depth), rasterize(poly, depth.shape), pose, K_LOW)
        assert set(a.voxels) == set(b.voxels)

    def test_voxels_inside_frustum(self):
        rng = np.random.default_rng(2)
        pose = Pose.look_at((1.6, 0.3, 1.2), SPHERE_C)
        depth = rng.uniform(0.5, 3.0, (K_LOW.height, K_LOW.width))
        mask = np.zeros(depth.shape, dtype=bool)
        mask[10:100, 20:150] = True
        model = integrate_observation(ObjectInstanceModel(0, 1), Frame(0.0, depth), mask, pose, K_LOW)
        # each voxel contains a back-projected point, so its center is within half a diagonal of the frustum
        pc = pose.transform(model.centers())
        slack = 0.5 * math.sqrt(3) * 0.02
        assert np.all(pc[:, 2] > -slack)
        x_lim = np.abs(pc[:, 0]) - slack * math.hypot(1, K_LOW.cx / K_LOW.fx)
        assert np.all(x_lim <= (K_LOW.width / 2 + 1) / K_LOW.fx * (pc[:, 2] + slack) + 1e-9)

    def test_errors(self):
        pose = Pose.identity()
        mask = np.ones((K_LOW.height, K_LOW.width), dtype=bool)
        with pytest.raises(IntegrationError):
            integrate_observation(ObjectInstanceModel(0, 1), Frame(0.0, np.zeros(mask.shape)), mask, pose, K_LOW)
        with pytest.raises(IntegrationError):
            integrate_observation(ObjectInstanceModel(0, 1), Frame(0.0, np.ones(mask.shape)), mask, None, K_LOW)

    def test_miss_when_surface_seen_through_voxel(self):
        pose = Pose.identity()
        depth = np.full((K_LOW.height, K_LOW.width), 2.0)
        model = ObjectInstanceModel(0, 1)
        mask = np.zeros(depth.shape, dtype=bool)
        mask[50:70, 70:90] = True
        model.voxels[VoxelKey.from_point((0.0, 0.0, 1.0), 0.02)] = SemanticVoxel(0.7, 1, 0)
        integrate_observation(model, Frame(0.0, depth), mask, pose, K_LOW)
        v = model.voxels[VoxelKey.from_point((0.0, 0.0, 1.0), 0.02)]
        assert v.miss_count == 1
        assert v.label_prob == pytest.approx(update_label_probability(0.7, 0.4), abs=1e-15)

    def test_occluded_voxel_untouched(self):
        pose = Pose.identity()
        depth = np.full((K_LOW.height, K_LOW.width), 1.0)
        mask = np.zeros(depth.shape, dtype=bool)
        mask[50:70, 70:90] = True
        model = ObjectInstanceModel(0, 1)
        key = VoxelKey.from_point((0.0, 0.0, 2.0), 0.02)
        model.voxels[key] = SemanticVoxel(0.7, 1, 0)
        integrate_observation(model, Frame(0.0, depth), mask, pose, K_LOW)
        assert model.voxels[key].miss_count == 0


class NoisySphere:
    """Sphere on a floor observed by near-static keyframes; 5% of mask pixels
    get a spurious depth in front of the surface in the first 10 frames."""

    def __init__(self, seed=3, noisy=10, clean=3):
        rng = np.random.default_rng(seed)
        base = Pose.look_at((1.6, 0.0, 1.2), SPHERE_C)
        n = noisy + clean
        self.poses = [base.retract(np.r_[rng.normal(scale=0.01, size=3), rng.normal(scale=math.radians(0.3), size=3)])
                      for _ in range(n)]
        scene = sphere_scene(self.poses)
        self.snapshots = {}
        model = ObjectInstanceModel(0, 1)
        for i, pose in enumerate(self.poses):
            depth, labels = raycast(scene, pose)
            mask = labels == 1
            if i < noisy:
                idx = np.flatnonzero(mask)
                salt = rng.choice(idx, int(round(0.05 * len(idx))), replace=False)
                depth = depth.copy()
                depth.flat[salt] *= rng.uniform(0.5, 0.95, len(salt))
            integrate_observation(model, Frame(float(i), depth), mask, pose, K_LOW)
            self.snapshots[i + 1] = copy.deepcopy(model)
        self.model = model


@pytest.fixture(scope="module")
def noisy_sphere():
    return NoisySphere()


class TestNoise:
    def test_probabilities_replay_counts(self, noisy_sphere):
        m = noisy_sphere.snapshots[10]
        checked = 0
        for v in m.voxels.values():
            # all hits first is the worst case for reaching the upper clamp
            if v.hit_count * logit(0.7) < logit(0.999):
                assert abs(v.label_prob - replay(v.hit_count, v.miss_count)) < 1e-12
                checked += 1
        assert checked > 0.5 * len(m)

    def test_noise_voxels_fall_below_half(self, noisy_sphere):
        m = noisy_sphere.snapshots[10]
        c = m.centers()
        noise = ~near_surface(c, 0.02)
        hits = np.array([v.hit_count for v in m.voxels.values()])
        misses = np.array([v.miss_count for v in m.voxels.values()])
        probs = m.probabilities()
        sel = noise & (hits == 1) & (misses >= 3)
        assert sel.sum() > 100
        assert np.all(probs[sel] < 0.5)
        # noise created early has had time to be contradicted
        early = m.voxels.keys() & set(noisy_sphere.snapshots[6].voxels)
        early_mask = np.array([key in early for key in m.voxels])
        assert (probs[noise & early_mask] < 0.5).mean() > 0.9

    def test_filter_keeps_surface(self, noisy_sphere):
        m = filter_voxels(copy.deepcopy(noisy_sphere.model), 0.6)
        assert len(m) > 500
        assert near_surface(m.centers(), 0.02).mean() >= 0.99


class TestFilter:
    def test_threshold(self):
        m = ObjectInstanceModel(0, 1)
        for i, p in enumerate([0.9, 0.59, 0.61]):
            m.voxels[VoxelKey(i, 0, 0)] = SemanticVoxel(p)
        filter_voxels(m, 0.6)
        assert sorted(v.label_prob for v in m.voxels.values()) == [0.61, 0.9]

    def test_empty(self):
        assert len(filter_voxels(ObjectInstanceModel(0, 1))) == 0

    @given(st.lists(st.floats(0.001, 0.999), max_size=50), st.floats(0.01, 0.99))
    def test_idempotent(self, probs, thr):
        m = ObjectInstanceModel(0, 1)
        for i, p in enumerate(probs):
            m.voxels[VoxelKey(i, 0, 0)] = SemanticVoxel(p)
        once = dict(filter_voxels(m, thr).voxels)
        assert filter_voxels(m, thr).voxels == once


class TestPromotion:
    def test_not_ready(self):
        m = ObjectInstanceModel(0, 1, times_tracked=2)
        assert not promote_if_ready(m)
        assert m.final_label is None

    def test_ready(self):
        m = ObjectInstanceModel(0, 1, times_tracked=3)
        assert promote_if_ready(m)
        assert m.final_label == 1

    def test_idempotent_and_label_fixed(self):
        m = ObjectInstanceModel(0, 1, times_tracked=3)
        m.add_class_evidence(1, 0.9)
        m.add_class_evidence(2, 0.8)
        m.add_class_evidence(2, 0.7)
        assert promote_if_ready(m)
        assert m.final_label == 2
        m.times_tracked = 10
        m.add_class_evidence(1, 5.0)
        assert promote_if_ready(m)
        assert m.final_label == 2

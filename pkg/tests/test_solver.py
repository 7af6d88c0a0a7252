import math

import numpy as np
import pytest

from posevolume.errors import CountMismatch, DegenerateConfiguration, TooFewPoints
from posevolume.geometry import RigidTransform, random_rotation, rot_z, rotation_angle_rad
from posevolume.solver import (
    Correspondences,
    SolverParams,
    aggregate_pose,
    enumerate_hypotheses,
    joint_loss,
    kabsch_align,
    pose_loss,
    score_hypotheses,
    solve,
)

from trialutils import outlier_trial, random_pose


class TestKabsch:
    def test_identity_when_scene_equals_model(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(6, 3))
        T = kabsch_align(pts, pts)
        np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(T.t, np.zeros(3), atol=1e-12)

    def test_recovers_constructed_transform(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(5, 3))
        R = rot_z(math.radians(30.0))
        t = np.array([0.1, 0.0, 0.0])
        T = kabsch_align(pts, pts @ R.T + t)
        np.testing.assert_allclose(T.R, R, atol=1e-9)
        np.testing.assert_allclose(T.t, t, atol=1e-9)

    def test_random_transforms_recovered(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pts = rng.normal(size=(rng.integers(3, 12), 3))
            gt = random_pose(rng)
            T = kabsch_align(pts, gt.apply(pts))
            assert np.linalg.norm(T.R - gt.R) < 1e-9
            assert np.linalg.norm(T.t - gt.t) < 1e-9

    def test_planar_sets_are_fine(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        gt = random_pose(np.random.default_rng(3))
        T = kabsch_align(pts, gt.apply(pts))
        assert np.linalg.norm(T.R - gt.R) < 1e-9

    def test_collinear_raises(self):
        pts = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], dtype=float)
        with pytest.raises(DegenerateConfiguration):
            kabsch_align(pts, pts)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            kabsch_align(np.zeros((2, 3)), np.zeros((2, 3)))


class TestEnumerate:
    def test_count_n3(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(3, 3))
        c = Correspondences(pts, pts)
        assert len(enumerate_hypotheses(c)) == 1

    def test_count_n9(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(9, 3))
        c = Correspondences(pts, pts)
        assert len(enumerate_hypotheses(c)) == 84

    def test_noise_free_all_equal_truth(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(7, 3))
        gt = random_pose(rng)
        c = Correspondences(pts, gt.apply(pts))
        for h in enumerate_hypotheses(c):
            assert np.linalg.norm(h.R - gt.R) < 1e-9
            assert np.linalg.norm(h.t - gt.t) < 1e-9

    def test_too_few_points_at_construction(self):
        with pytest.raises(TooFewPoints):
            Correspondences(np.zeros((2, 3)), np.zeros((2, 3)))


class TestScoring:
    def test_all_distances_at_threshold_give_half_each(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(5, 3))
        params = SolverParams()
        # scene placed so every residual is exactly gamma2
        offset = np.array([params.gamma2, 0.0, 0.0])
        c = Correspondences(pts, pts + offset)
        hset = score_hypotheses([RigidTransform.identity()], c, params)
        assert hset.raw_counts[0] == pytest.approx(5 * 0.5, abs=1e-12)

    def test_far_hypothesis_counts_zero(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(5, 3))
        c = Correspondences(pts, pts + np.array([5.0, 0, 0]))
        hset = score_hypotheses([RigidTransform.identity()], c, SolverParams())
        assert hset.raw_counts[0] < 1e-9

    def test_perfect_hypothesis_dominates(self):
        rng = np.random.default_rng(9)
        model = rng.uniform(-0.1, 0.1, (9, 3))
        gt = random_pose(rng)
        c = Correspondences(model, gt.apply(model))
        # 83 competitors displaced far enough that their raw count stays <= N/2
        others = [RigidTransform(gt.R, gt.t + rng.normal(0, 0.3, 3)) for _ in range(83)]
        hset = score_hypotheses([gt] + others, c, SolverParams())
        assert np.all(hset.raw_counts[1:] <= 4.5)
        assert np.argmax(hset.scores) == 0
        assert hset.scores[0] > np.max(hset.scores[1:])

    def test_scores_are_distribution(self):
        rng = np.random.default_rng(10)
        model, scene, _ = outlier_trial(rng)
        c = Correspondences(model, scene)
        _, hset = solve(c)
        assert np.all(hset.scores >= 0)
        assert abs(hset.scores.sum() - 1.0) <= 1e-9


class TestAggregate:
    def test_identical_hypotheses(self):
        T = random_pose(np.random.default_rng(11))
        c = Correspondences(np.eye(3), T.apply(np.eye(3)))
        hset = score_hypotheses([T, T, T], c, SolverParams())
        agg = aggregate_pose(hset)
        np.testing.assert_allclose(agg.R, T.R, atol=1e-12)
        np.testing.assert_allclose(agg.t, T.t, atol=1e-12)

    def test_equal_weight_translation_mean(self):
        a = RigidTransform(np.eye(3), np.zeros(3))
        b = RigidTransform(np.eye(3), np.array([0.1, 0.0, 0.0]))
        # symmetric residuals give equal raw counts, hence equal weights
        pts = np.array([[0.05, 0, 0], [0, 0.05, 0], [0, 0, 0.05]])
        c = Correspondences(pts, pts + np.array([0.05, 0, 0]))
        hset = score_hypotheses([a, b], c, SolverParams())
        np.testing.assert_allclose(hset.scores, [0.5, 0.5], atol=1e-12)
        agg = aggregate_pose(hset)
        np.testing.assert_allclose(agg.t, [0.05, 0, 0], atol=1e-12)

    def test_symmetric_rotations_average_to_identity(self):
        a = RigidTransform(rot_z(math.radians(10.0)), np.zeros(3))
        b = RigidTransform(rot_z(math.radians(-10.0)), np.zeros(3))
        pts = np.eye(3)
        c = Correspondences(pts, pts)
        hset = score_hypotheses([a, b], c, SolverParams())
        agg = aggregate_pose(hset)
        np.testing.assert_allclose(agg.R, np.eye(3), atol=1e-9)

    def test_aggregate_rotation_is_orthonormal(self):
        rng = np.random.default_rng(12)
        model, scene, _ = outlier_trial(rng)
        c = Correspondences(model, scene)
        pose, _ = solve(c)
        np.testing.assert_allclose(pose.R.T @ pose.R, np.eye(3), atol=1e-9)
        assert np.linalg.det(pose.R) == pytest.approx(1.0, abs=1e-9)


class TestSolve:
    def test_noise_free_recovers_truth(self):
        rng = np.random.default_rng(13)
        pts = rng.uniform(-0.1, 0.1, size=(9, 3))
        gt = random_pose(rng)
        pose, _ = solve(Correspondences(pts, gt.apply(pts)))
        assert pose_loss(pose, gt) < 1e-6

    def test_n3_equals_single_svd_solution(self):
        rng = np.random.default_rng(14)
        pts = rng.normal(size=(3, 3))
        gt = random_pose(rng)
        scene = gt.apply(pts) + rng.normal(0, 0.01, (3, 3))
        pose, hset = solve(Correspondences(pts, scene))
        direct = kabsch_align(pts, scene)
        assert hset.k == 1
        np.testing.assert_allclose(pose.R, direct.R, atol=1e-12)
        np.testing.assert_allclose(pose.t, direct.t, atol=1e-12)

    def test_equivariance_under_world_transform(self):
        rng = np.random.default_rng(15)
        pts = rng.uniform(-0.1, 0.1, size=(9, 3))
        gt = random_pose(rng)
        g = random_pose(rng)
        pose1, _ = solve(Correspondences(pts, gt.apply(pts)))
        pose2, _ = solve(Correspondences(pts, g.compose(gt).apply(pts)))
        expected = g.compose(pose1)
        assert pose_loss(pose2, expected) < 1e-6

    def test_outlier_robustness_beats_plain_kabsch(self):
        rng = np.random.default_rng(16)
        wins = 0
        rot_errs, trans_errs = [], []
        trials = 150
        for _ in range(trials):
            model, scene, gt = outlier_trial(rng)
            c = Correspondences(model, scene)
            pose, _ = solve(c)
            naive = kabsch_align(model, scene)
            if pose_loss(pose, gt) < pose_loss(naive, gt):
                wins += 1
            rot_errs.append(math.degrees(rotation_angle_rad(pose.R @ gt.R.T)))
            trans_errs.append(np.linalg.norm(pose.t - gt.t))
        assert wins / trials >= 0.95
        assert np.median(rot_errs) < 2.0
        assert np.median(trans_errs) < 0.005

    def test_no_outliers_stays_close_to_kabsch(self):
        rng = np.random.default_rng(17)
        ratios = []
        for _ in range(500):
            model, scene, gt = outlier_trial(rng, n_outliers=0, noise_m=0.003)
            c = Correspondences(model, scene)
            pose, _ = solve(c)
            naive = kabsch_align(model, scene)
            ratios.append(pose_loss(pose, gt) / max(pose_loss(naive, gt), 1e-12))
        assert np.median(ratios) <= 1.5

    def test_temperature_limits(self):
        rng = np.random.default_rng(18)
        model, scene, gt = outlier_trial(rng)
        c = Correspondences(model, scene)

        # near-zero temperature concentrates on the best raw count
        _, cold = solve(c, SolverParams(temperature=1e-4))
        best = int(np.argmax(cold.raw_counts))
        assert cold.scores[best] > 0.999

        # very high temperature approaches uniform weights
        _, hot = solve(c, SolverParams(temperature=1e6))
        np.testing.assert_allclose(hot.scores, 1.0 / hot.k, rtol=1e-3)


class TestLosses:
    def test_pose_loss_zero(self):
        T = random_pose(np.random.default_rng(19))
        assert pose_loss(T, T) == pytest.approx(0.0, abs=1e-12)

    def test_pose_loss_pure_translation(self):
        gt = RigidTransform.identity()
        est = RigidTransform(np.eye(3), np.array([0.05, 0, 0]))
        assert pose_loss(est, gt, alpha=1.0) == pytest.approx(0.05)

    def test_pose_loss_half_turn_frobenius(self):
        gt = RigidTransform.identity()
        est = RigidTransform(rot_z(math.pi), np.zeros(3))
        # ||diag(-2, -2, 0)||_F = 2 sqrt(2)
        assert pose_loss(est, gt, alpha=1.0) == pytest.approx(2.0 * math.sqrt(2.0), abs=1e-12)

    def test_joint_loss_zero(self):
        assert joint_loss([0.0], [0.0], [0.0], (1, 1, 1)) == 0.0

    def test_joint_loss_single_level(self):
        assert joint_loss([1.0], [1.0], [1.0], (1, 1, 1)) == pytest.approx(3.0)

    def test_joint_loss_two_levels_weighted(self):
        got = joint_loss([0.1, 0.1], [0.2, 0.2], [0.3, 0.3], (1.0, 0.5, 0.25))
        assert got == pytest.approx(0.55)

    def test_joint_loss_count_mismatch(self):
        with pytest.raises(CountMismatch):
            joint_loss([1.0], [1.0, 2.0], [1.0], (1, 1, 1))

import math

import numpy as np
import pytest

from posevolume.errors import (
    CountMismatch,
    KeypointOutsideGrid,
    NonFiniteInput,
    SpecMismatch,
)
from posevolume.field import (
    ProbabilityVolume,
    TargetHeatmaps,
    extract_keypoint,
    keypoint_loss,
    kl_divergence,
    normalize_field,
    rasterize_heatmap,
)
from posevolume.geometry import RigidTransform
from posevolume.volume import build_grid


def make_targets(points, sigma):
    points = np.asarray(points, dtype=float)
    return TargetHeatmaps(points, RigidTransform.identity(), np.full(len(points), sigma))


SPEC = build_grid((0.0, 0.0, 0.8), 0.1, 0.01)  # 20^3 cells


class TestRasterize:
    def test_peak_at_cell_center(self):
        kp = SPEC.cell_center((5, 9, 14))
        t = make_targets([kp, kp + 0.01, kp - 0.01, kp + 0.02], sigma=0.01)
        grid = rasterize_heatmap(t, SPEC, 0)
        assert np.unravel_index(np.argmax(grid), grid.shape) == (5, 9, 14)

    def test_deterministic(self):
        t = make_targets([[0, 0, 0.8]] * 4, sigma=0.02)
        a = rasterize_heatmap(t, SPEC, 0)
        b = rasterize_heatmap(t, SPEC, 0)
        assert np.array_equal(a, b)

    def test_normalized_for_random_keypoints(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            kp = rng.uniform(-0.08, 0.08, 3) + np.array([0, 0, 0.8])
            t = make_targets([kp] * 4, sigma=0.02)
            grid = rasterize_heatmap(t, SPEC, 0)
            assert abs(grid.sum() - 1.0) < 1e-6
            assert np.all(grid >= 0)

    def test_outside_grid_raises(self):
        t = make_targets([[1.0, 0, 0.8]] * 4, sigma=0.02)
        with pytest.raises(KeypointOutsideGrid):
            rasterize_heatmap(t, SPEC, 0)


class TestNormalizeField:
    def test_constant_grid_uniform(self):
        raw = np.full((60, 60, 60), 3.7)
        out = normalize_field(raw)
        np.testing.assert_allclose(out, 1.0 / 216000, rtol=1e-12)

    def test_single_hot_cell_closed_form(self):
        raw = np.zeros((20, 20, 20))
        raw[3, 4, 5] = 10.0
        out = normalize_field(raw)
        # softmax closed form: e^10 / (e^10 + 7999)
        expected = math.exp(10.0) / (math.exp(10.0) + 7999.0)
        assert out[3, 4, 5] == pytest.approx(expected, rel=1e-12)
        # a strongly dominant cell takes nearly all mass
        raw[3, 4, 5] = 16.0
        assert normalize_field(raw)[3, 4, 5] > 0.99

    def test_sums_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            out = normalize_field(rng.normal(size=(9, 9, 9)))
            assert abs(out.sum() - 1.0) < 1e-6

    def test_non_finite_rejected(self):
        raw = np.zeros((4, 4, 4))
        raw[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteInput):
            normalize_field(raw)


class TestKL:
    def test_identical_is_exactly_zero(self):
        rng = np.random.default_rng(6)
        q = normalize_field(rng.normal(size=(12, 12, 12)))
        assert kl_divergence(q, q) == 0.0

    def test_two_cell_hand_value(self):
        # 0.5*ln(0.5/0.9) + 0.5*ln(0.5/0.1), evaluated independently
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        got = kl_divergence(np.array([0.5, 0.5]), np.array([0.9, 0.1]))
        assert got == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.5108, abs=1e-4)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            a = rng.random(50)
            b = rng.random(50)
            a /= a.sum()
            b /= b.sum()
            assert kl_divergence(a, b) >= 0.0

    def test_zero_cells_use_zero_convention(self):
        a = np.array([0.0, 1.0])
        b = np.array([0.5, 0.5])
        assert kl_divergence(a, b) == pytest.approx(math.log(2.0))

    def test_shape_mismatch(self):
        with pytest.raises(SpecMismatch):
            kl_divergence(np.ones(4) / 4, np.ones(5) / 5)


class TestExtract:
    def test_point_mass(self):
        grid = np.zeros(SPEC.dims)
        grid[4, 7, 11] = 1.0
        p, conf = extract_keypoint(grid, SPEC)
        np.testing.assert_allclose(p, SPEC.cell_center((4, 7, 11)), atol=1e-12)
        assert conf == pytest.approx(1.0)

    def test_symmetric_gaussian_between_cells(self):
        # center exactly on the x midpoint between cells 9 and 10
        center = SPEC.cell_center((9, 10, 10)) + np.array([0.005, 0.0, 0.0])
        t = make_targets([center] * 4, sigma=0.02)
        grid = rasterize_heatmap(t, SPEC, 0)
        p, _ = extract_keypoint(grid, SPEC)
        assert abs(p[0] - center[0]) < 1e-9

    def test_round_trip_median_error_under_quarter_cell(self):
        rng = np.random.default_rng(99)
        errs = []
        for _ in range(300)        :
            kp = np.array([0, 0, 0.8]) + rng.uniform(-0.06, 0.06, 3)
            t = make_targets([kp] * 4, sigma=0.02)  # sigma = 2 * cell
            grid = rasterize_heatmap(t, SPEC, 0)
            p, _ = extract_keypoint(grid, SPEC)
            errs.append(np.linalg.norm(p - kp))
        assert np.median(errs) < 0.01 / 4

    def test_translation_equivariance(self):
        shift = np.array([0.05, -0.02, 0.03])
        spec2 = build_grid(np.array([0, 0, 0.8]) + shift, 0.1, 0.01)
        kp = np.array([0.013, -0.021, 0.804])
        t1 = make_targets([kp] * 4, sigma=0.02)
        t2 = make_targets([kp + shift] * 4, sigma=0.02)
        p1, _ = extract_keypoint(rasterize_heatmap(t1, SPEC, 0), SPEC)
        p2, _ = extract_keypoint(rasterize_heatmap(t2, spec2, 0), spec2)
        np.testing.assert_allclose(p2 - p1, shift, atol=1e-12)

    def test_uniform_field_returns_grid_center_low_confidence(self):
        grid = np.full(SPEC.dims, 1.0 / SPEC.n_cells)
        p, conf = extract_keypoint(grid, SPEC)
        np.testing.assert_allclose(p, SPEC.center, atol=1e-12)
        assert conf < 1e-3

    def test_finer_cells_reduce_median_round_trip_error(self):
        rng = np.random.default_rng(123)
        medians = []
        for cell in (0.02, 0.01, 0.005):
            spec = build_grid((0, 0, 0.8), 0.1, cell)
            errs = []
            for _ in range(150):
                kp = np.array([0, 0, 0.8]) + rng.uniform(-0.05, 0.05, 3)
                t = make_targets([kp] * 4, sigma=2 * cell)
                p, _ = extract_keypoint(rasterize_heatmap(t, spec, 0), spec)
                errs.append(np.linalg.norm(p - kp))
            medians.append(np.median(errs))
        assert medians[1] < medians[0]
        assert medians[2] < medians[1]


class TestKeypointLoss:
    def test_zero_for_exact(self):
        pts = np.random.default_rng(1).normal(size=(9, 3))
        assert keypoint_loss(pts, pts) == 0.0

    def test_half_unit_error_quadratic_branch(self):
        pred = np.array([[0.5, 0.0, 0.0]])
        target = np.zeros((1, 3))
        # 0.5 * 0.5^2 / 1.0 summed over coordinates, one keypoint
        assert keypoint_loss(pred, target) == pytest.approx(0.125)

    def test_two_unit_error_linear_branch(self):
        pred = np.array([[2.0, 0.0, 0.0]])
        target = np.zeros((1, 3))
        assert keypoint_loss(pred, target) == pytest.approx(1.5)

    def test_mean_over_keypoints(self):
        pred = np.array([[0.5, 0, 0], [0, 0, 0]])
        target = np.zeros((2, 3))
        assert keypoint_loss(pred, target) == pytest.approx(0.125 / 2)

    def test_count_mismatch(self):
        with pytest.raises(CountMismatch):
            keypoint_loss(np.zeros((3, 3)), np.zeros((4, 3)))


class TestProbabilityVolume:
    def test_valid_stack(self):
        rng = np.random.default_rng(2)
        grids = np.stack([normalize_field(rng.normal(size=SPEC.dims)) for _ in range(4)])
        pv = ProbabilityVolume(SPEC, grids)
        assert pv.n_keypoints == 4

    def test_rejects_unnormalized(self):
        grids = np.ones((2,) + SPEC.dims)
        with pytest.raises(ValueError):
            ProbabilityVolume(SPEC, grids)

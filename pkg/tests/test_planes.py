import numpy as np
import pytest

from seamosaic.errors import EmptyCloud, InsufficientInliers, TooFewPoints
from seamosaic.planes import (
    PlanarityConfig,
    Plane,
    PlaneFitReport,
    fit_plane_least_squares,
    horizontal_plane_from_ahrs,
    planarity_check,
    ransac_plane_fit,
)


def noisy_plane_cloud(seed: int, n_inliers: int = 700, n_outliers: int = 300):
    """Points near z = 2 with sigma 0.01 plus uniform outliers in a 1 m slab."""
    rng = np.random.default_rng(seed)
    inliers = np.column_stack(
        [
            rng.uniform(-5, 5, n_inliers),
            rng.uniform(-5, 5, n_inliers),
            2.0 + rng.normal(0.0, 0.01, n_inliers),
        ]
    )
    outliers = np.column_stack(
        [
            rng.uniform(-5, 5, n_outliers),
            rng.uniform(-5, 5, n_outliers),
            rng.uniform(1.5, 2.5, n_outliers),
        ]
    )
    return np.vstack([inliers, outliers])


class TestRansacPlaneFit:
    def test_exact_coplanar(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack(
            [rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100), np.zeros(100)]
        )
        plane, report = ransac_plane_fit(pts, threshold=0.01, seed=1)
        assert abs(abs(plane.normal[2]) - 1.0) < 1e-12
        assert abs(plane.offset) < 1e-12
        assert report.rms_residual == pytest.approx(0.0, abs=1e-12)
        assert report.inlier_count == 100

    def test_noisy_with_outliers(self):
        pts = noisy_plane_cloud(seed=42)
        plane, report = ransac_plane_fit(
            pts, threshold=0.03, seed=7, viewpoints=np.array([[0.0, 0.0, 4.0]])
        )
        angle = np.degrees(np.arccos(np.clip(plane.normal @ [0, 0, 1], -1, 1)))
        assert angle < 0.5
        assert abs(plane.offset - 2.0) < 0.01
        assert report.inlier_count >= 600

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            ransac_plane_fit(np.zeros((2, 3)), threshold=0.1)

    def test_insufficient_inliers(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, size=(100, 3))
        with pytest.raises(InsufficientInliers):
            ransac_plane_fit(pts, threshold=1e-6, min_inliers=50, seed=0)

    def test_deterministic_given_seed(self):
        pts = noisy_plane_cloud(seed=5)
        a = ransac_plane_fit(pts, threshold=0.03, seed=9)
        b = ransac_plane_fit(pts, threshold=0.03, seed=9)
        np.testing.assert_array_equal(a[0].normal, b[0].normal)
        assert a[0].offset == b[0].offset
        assert a[1].inlier_count == b[1].inlier_count
        assert a[1].rms_residual == b[1].rms_residual

    def test_rigid_motion_equivariance(self):
        pts = noisy_plane_cloud(seed=11)
        plane_a, report_a = ransac_plane_fit(pts, threshold=0.03, seed=2)
        theta = 0.3
        rot = np.array(
            [
                [np.cos(theta), 0.0, np.sin(theta)],
                [0.0, 1.0, 0.0],
                [-np.sin(theta), 0.0, np.cos(theta)],
            ]
        )
        shift = np.array([1.0, -2.0, 0.5])
        moved = pts @ rot.T + shift
        plane_b, report_b = ransac_plane_fit(moved, threshold=0.03, seed=2)
        expected_normal = rot @ plane_a.normal
        if expected_normal @ plane_b.normal < 0:
            expected_normal = -expected_normal
        np.testing.assert_allclose(plane_b.normal, expected_normal, atol=1e-9)
        assert report_b.rms_residual == pytest.approx(report_a.rms_residual, abs=1e-9)

    def test_refinement_is_local_minimum(self):
        # Perturbing the refined plane never decreases the inlier SSD.
        rng = np.random.default_rng(17)
        pts = np.column_stack(
            [rng.uniform(-2, 2, 200), rng.uniform(-2, 2, 200), rng.normal(0, 0.02, 200)]
        )
        plane = fit_plane_least_squares(pts)

        def ssd(normal, offset):
            normal = normal / np.linalg.norm(normal)
            return np.sum((pts @ normal - offset) ** 2)

        base = ssd(plane.normal, plane.offset)
        for _ in range(50):
            tilt = rng.normal(0, 1e-4, 3)
            shift = rng.normal(0, 1e-4)
            assert ssd(plane.normal + tilt, plane.offset + shift) >= base - 1e-12


class TestHorizontalPlane:
    def test_centroid_two_points(self):
        plane = horizontal_plane_from_ahrs(
            np.array([[0.0, 0.0, 1.0], [2.0, 0.0, 3.0]]), np.array([0.0, 0.0, -1.0])
        )
        np.testing.assert_allclose(plane.normal, [0.0, 0.0, 1.0])
        assert plane.offset == pytest.approx(2.0)

    def test_single_point(self):
        p = np.array([0.3, -0.7, 1.9])
        plane = horizontal_plane_from_ahrs(p[None, :], np.array([0.0, 0.0, -1.0]))
        assert abs(plane.signed_distance(p[None, :])[0]) < 1e-12

    def test_tilted_gravity(self):
        # Hand-rotated vertical case: gravity tilted 10 degrees about y.
        theta = np.radians(10.0)
        gravity = np.array([np.sin(theta), 0.0, -np.cos(theta)])
        plane = horizontal_plane_from_ahrs(np.zeros((1, 3)), gravity)
        angle = np.degrees(np.arccos(np.clip(plane.normal @ [0, 0, 1], -1, 1)))
        assert angle == pytest.approx(10.0, abs=1e-9)

    def test_empty_cloud(self):
        with pytest.raises(EmptyCloud):
            horizontal_plane_from_ahrs(np.zeros((0, 3)), np.array([0.0, 0.0, -1.0]))


class TestPlanarityCheck:
    def _report(self, rms, inliers=90, total=100):
        return PlaneFitReport(inliers, total, rms, np.array([0.0, 0.0, 1.0]))

    def test_accept(self):
        # 0.01 <= 0.05 * 2 and 0.9 >= 0.5.
        assert planarity_check(self._report(0.01), scene_scale=2.0) == "accept"

    def test_skip_on_residual(self):
        assert planarity_check(self._report(0.5), scene_scale=2.0) == "skip_projection"

    def test_zero_rms_always_accepts(self):
        assert planarity_check(self._report(0.0), scene_scale=1e-6) == "accept"

    def test_skip_on_inlier_fraction(self):
        report = self._report(0.0, inliers=10, total=100)
        assert planarity_check(report, scene_scale=2.0) == "skip_projection"

    def test_config_thresholds(self):
        cfg = PlanarityConfig(rel_residual_max=0.5, min_inlier_fraction=0.05)
        report = self._report(0.5, inliers=10, total=100)
        assert planarity_check(report, scene_scale=2.0, config=cfg) == "accept"


def test_plane_orientation_toward_cameras():
    plane = Plane(np.array([0.0, 0.0, -1.0]), -2.0)  # z = 2 plane, normal down
    oriented = plane.oriented_toward(np.array([[0.0, 0.0, 5.0]]))
    assert oriented.normal[2] > 0
    assert oriented.offset == pytest.approx(2.0)

"""Local projection-plane estimation from the sparse tie-point cloud.

The mosaicing blocks project onto a plane fitted to the current map by
RANSAC, or onto the horizontal plane through the map centroid when an
attitude reference is available. A planarity check decides whether the
scene is flat enough to project at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, EmptyCloud, InsufficientInliers, TooFewPoints

DEFAULT_MAX_ITERATIONS = 500
DEFAULT_REL_RESIDUAL_MAX = 0.05
DEFAULT_MIN_INLIER_FRACTION = 0.5


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . X = offset`` with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(normal)
        if abs(norm - 1.0) > 1e-12:
            normal = normal / norm
        normal.setflags(write=False)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def oriented_toward(self, viewpoints: np.ndarray) -> "Plane":
        """Flip the normal so most viewpoints lie on its positive side."""
        viewpoints = np.atleast_2d(np.asarray(viewpoints, dtype=np.float64))
        above = np.count_nonzero(self.signed_distance(viewpoints) > 0)
        if above * 2 < viewpoints.shape[0]:
            return Plane(-self.normal, -self.offset)
        return self


@dataclass(frozen=True)
class PlaneFitReport:
    """Support and residual summary of a plane fit."""

    inlier_count: int
    total_count: int
    rms_residual: float
    normal: np.ndarray

    @property
    def inlier_fraction(self) -> float:
        return self.inlier_count / self.total_count if self.total_count else 0.0


def fit_plane_least_squares(points: np.ndarray) -> Plane:
    """Total-least-squares plane through a point set.

    The plane passes through the centroid; its normal is the eigenvector of
    the point covariance with the smallest eigenvalue.
    """
    points = np.asarray(points, dtype=np.float64)
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    normal = eigenvectors[:, 0]
    if eigenvalues[1] < 1e-18 * max(eigenvalues[2], 1e-300):
        raise DegenerateGeometry("points are collinear")
    return Plane(normal, float(normal @ centroid))


def ransac_plane_fit(
    points: np.ndarray,
    threshold: float,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    min_inliers: int | None = None,
    seed: int = 0,
    viewpoints: np.ndarray | None = None,
) -> tuple[Plane, PlaneFitReport]:
    """RANSAC plane fit with least-squares refinement over the inliers.

    Three-point hypotheses are scored by inlier count (ties broken by lower
    inlier RMS); the winner is refined by a total-least-squares fit over its
    inliers. Deterministic for a given seed.

    Args:
        points: (N, 3) world points, N >= 3.
        threshold: Inlier distance threshold in meters.
        max_iterations: Number of sampled hypotheses.
        min_inliers: Required support; defaults to max(20, 30% of N) capped at N.
        seed: RNG seed.
        viewpoints: Optional camera centers used to orient the normal.

    Raises:
        TooFewPoints: Fewer than 3 points.
        DegenerateGeometry: Every sampled hypothesis was collinear.
        InsufficientInliers: Best support below ``min_inliers``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 3:
        raise TooFewPoints(f"plane fit needs >= 3 points, got {n}")
    if min_inliers is None:
        min_inliers = min(max(20, int(0.3 * n)), n)

    rng = np.random.default_rng(seed)
    best_mask: np.ndarray | None = None
    best_count = -1
    best_rms = np.inf
    for _ in range(max_iterations):
        sample = points[rng.choice(n, size=3, replace=False)]
        normal = np.cross(sample[1] - sample[0], sample[2] - sample[0])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        offset = normal @ sample[0]
        distances = np.abs(points @ normal - offset)
        mask = distances <= threshold
        count = int(np.count_nonzero(mask))
        if count < 3:
            continue
        rms = float(np.sqrt(np.mean(distances[mask] ** 2)))
        if count > best_count or (count == best_count and rms < best_rms):
            best_count, best_rms, best_mask = count, rms, mask

    if best_mask is None:
        raise DegenerateGeometry("all plane hypotheses were collinear")
    if best_count < min_inliers:
        raise InsufficientInliers(
            f"best support {best_count} below required {min_inliers}"
        )

    plane = fit_plane_least_squares(points[best_mask])
    if viewpoints is not None:
        plane = plane.oriented_toward(viewpoints)
    residuals = plane.signed_distance(points[best_mask])
    report = PlaneFitReport(
        inlier_count=best_count,
        total_count=n,
        rms_residual=float(np.sqrt(np.mean(residuals**2))),
        normal=plane.normal.copy(),
    )
    return plane, report


def horizontal_plane_from_ahrs(
    points: np.ndarray, gravity_direction: np.ndarray
) -> Plane:
    """Horizontal plane through the point centroid.

    ``gravity_direction`` is the unit vector pointing down in the map frame;
    the plane normal is its negation (up).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0:
        raise EmptyCloud("no points to anchor the horizontal plane")
    gravity = np.asarray(gravity_direction, dtype=np.float64).reshape(3)
    gravity = gravity / np.linalg.norm(gravity)
    normal = -gravity
    centroid = points.mean(axis=0)
    return Plane(normal, float(normal @ centroid))


@dataclass(frozen=True)
class PlanarityConfig:
    rel_residual_max: float = DEFAULT_REL_RESIDUAL_MAX
    min_inlier_fraction: float = DEFAULT_MIN_INLIER_FRACTION


def planarity_check(
    report: PlaneFitReport,
    scene_scale: float,
    config: PlanarityConfig = PlanarityConfig(),
) -> str:
    """Decide whether to project onto the fitted plane.

    Residuals are normalized by the scene scale (median camera-to-plane
    distance) so the same thresholds work at pool and wreck depths.

    Returns:
        ``"accept"`` or ``"skip_projection"``.
    """
    if report.rms_residual <= config.rel_residual_max * scene_scale and (
        report.inlier_fraction >= config.min_inlier_fraction
    ):
        return "accept"
    return "skip_projection"


def default_ransac_threshold(scene_scale: float) -> float:
    """Inlier threshold scaled to the scene: 2% of camera-to-plane distance."""
    return 0.02 * scene_scale

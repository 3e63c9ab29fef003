"""Pinhole camera model with Brown-Conrady lens distortion.

All projection, unprojection and resampling math shared by the mapping
blocks lives here. Conventions:

* World frame: right-handed, meters.
* Camera frame: x right, y down, z forward (optical axis).
* Raster frame: origin at the CENTER of the top-left pixel, u rightward,
  v downward. World-file export depends on this convention.
* Poses are stored camera-to-world: ``x_world = R @ x_cam + center``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import BehindCamera, ConfigError, NoConvergence

logger = logging.getLogger(__name__)

UNDISTORT_MAX_ITERATIONS = 20
UNDISTORT_TOLERANCE = 1e-6  # normalized image units


class PixelCoord(NamedTuple):
    """Raster coordinate; (0, 0) is the center of the top-left pixel."""

    u: float
    v: float


class Ray(NamedTuple):
    """World-frame ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class DistortionCoefficients:
    """Brown-Conrady coefficients applied to normalized image coordinates."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        for name in ("k1", "k2", "k3", "p1", "p2"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"distortion coefficient {name} is not finite")

    @property
    def is_zero(self) -> bool:
        return self.k1 == self.k2 == self.k3 == self.p1 == self.p2 == 0.0


@dataclass(frozen=True)
class CameraModel:
    """Pre-calibrated pinhole camera.

    Attributes:
        fx, fy: Focal lengths in pixels.
        cx, cy: Principal point in pixels.
        width, height: Raster size in pixels.
        distortion: Lens distortion coefficients.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: DistortionCoefficients = field(default_factory=DistortionCoefficients)

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError("principal point must lie inside the raster")

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, divisor: int) -> "CameraModel":
        """Camera for an image downscaled by an integer divisor.

        Box-filter downscaling maps pixel centers as u' = (u + 0.5)/d - 0.5,
        which is affine, so intrinsics follow directly. Normalized-coordinate
        distortion is unchanged.
        """
        d = float(divisor)
        return CameraModel(
            fx=self.fx / d,
            fy=self.fy / d,
            cx=(self.cx + 0.5) / d - 0.5,
            cy=(self.cy + 0.5) / d - 0.5,
            width=self.width // divisor,
            height=self.height // divisor,
            distortion=self.distortion,
        )


_CAMERA_KEYS = {"fx", "fy", "cx", "cy", "width", "height"}
_DISTORTION_KEYS = {"k1", "k2", "k3", "p1", "p2"}


def parse_keyvalue(text: str) -> dict[str, str]:
    """Parse the ``key = value`` text format used by calibration and config files.

    Blank lines and ``#`` comments are skipped; keys are lowercased.
    """
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip().lower()] = value.strip()
    return entries


def load_camera_file(path: str | Path) -> CameraModel:
    """Load a calibration file.

    Required keys: fx, fy, cx, cy, width, height. Distortion keys k1..k3,
    p1, p2 default to zero. Unrecognized coefficient keys are ignored with
    a warning so calibration exports with longer models still load.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"camera file not found: {path}")
    entries = parse_keyvalue(path.read_text())

    missing = _CAMERA_KEYS - entries.keys()
    if missing:
        raise ConfigError(f"camera file missing keys: {sorted(missing)}")
    extra = entries.keys() - _CAMERA_KEYS - _DISTORTION_KEYS
    if extra:
        logger.warning("ignoring unsupported calibration keys: %s", sorted(extra))

    dist = DistortionCoefficients(
        **{k: float(entries.get(k, "0")) for k in _DISTORTION_KEYS}
    )
    return CameraModel(
        fx=float(entries["fx"]),
        fy=float(entries["fy"]),
        cx=float(entries["cx"]),
        cy=float(entries["cy"]),
        width=int(entries["width"]),
        height=int(entries["height"]),
        distortion=dist,
    )


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform.

    ``rotation`` maps camera-frame vectors to world-frame vectors;
    ``center`` is the camera center in world coordinates.
    """

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-9:
            raise ConfigError("pose rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise ConfigError("pose rotation determinant is not +1 within 1e-9")
        rotation.setflags(write=False)
        center.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "center", center)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform world points (..., 3) into the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation


def distort_normalized(xy: np.ndarray, dist: DistortionCoefficients) -> np.ndarray:
    """Apply forward Brown-Conrady distortion to normalized coordinates (..., 2)."""
    xy = np.asarray(xy, dtype=np.float64)
    if dist.is_zero:
        return xy.copy()
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
    xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def undistort_normalized(
    xy_distorted: np.ndarray, dist: DistortionCoefficients
) -> tuple[np.ndarray, np.ndarray]:
    """Invert the forward distortion by fixed-point iteration.

    Args:
        xy_distorted: Observed normalized coordinates (..., 2).
        dist: Coefficients of the forward model.

    Returns:
        (ideal normalized coordinates, per-point convergence mask).
    """
    xy_distorted = np.asarray(xy_distorted, dtype=np.float64)
    if dist.is_zero:
        return xy_distorted.copy(), np.ones(xy_distorted.shape[:-1], dtype=bool)

    xd, yd = xy_distorted[..., 0], xy_distorted[..., 1]
    x, y = xd.copy(), yd.copy()
    converged = np.zeros(xd.shape, dtype=bool)
    for _ in range(UNDISTORT_MAX_ITERATIONS):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
        dx = 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x)
        dy = dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y
        x_new = (xd - dx) / radial
        y_new = (yd - dy) / radial
        step = np.maximum(np.abs(x_new - x), np.abs(y_new - y))
        x, y = x_new, y_new
        converged = step < UNDISTORT_TOLERANCE
        if np.all(converged):
            break
    return np.stack([x, y], axis=-1), converged


def pixels_to_normalized(uv: np.ndarray, camera: CameraModel) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack(
        [(uv[..., 0] - camera.cx) / camera.fx, (uv[..., 1] - camera.cy) / camera.fy],
        axis=-1,
    )


def normalized_to_pixels(xy: np.ndarray, camera: CameraModel) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack(
        [camera.cx + camera.fx * xy[..., 0], camera.cy + camera.fy * xy[..., 1]],
        axis=-1,
    )


def project(
    point: np.ndarray,
    pose: Pose,
    camera: CameraModel,
    apply_distortion: bool = True,
) -> PixelCoord:
    """Project a world point into the raster.

    Raises:
        BehindCamera: If the point depth in the camera frame is <= 1e-12.
    """
    p_cam = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.center)
    if p_cam[2] <= 1e-12:
        raise BehindCamera(f"point depth {p_cam[2]:.3e} is not positive")
    xy = p_cam[:2] / p_cam[2]
    if apply_distortion:
        xy = distort_normalized(xy, camera.distortion)
    uv = normalized_to_pixels(xy, camera)
    return PixelCoord(float(uv[0]), float(uv[1]))


def project_points(
    points: np.ndarray,
    pose: Pose,
    camera: CameraModel,
    apply_distortion: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of world points (N, 3).

    Returns:
        (pixels (N, 2), in-front mask (N,)). Pixels of behind-camera points
        are NaN.
    """
    p_cam = pose.world_to_camera(points)
    z = p_cam[:, 2]
    in_front = z > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = p_cam[:, :2] / z[:, None]
    xy[~in_front] = np.nan
    if apply_distortion:
        xy = distort_normalized(xy, camera.distortion)
    return normalized_to_pixels(xy, camera), in_front


def unproject(pixel: PixelCoord, pose: Pose, camera: CameraModel) -> Ray:
    """Back-project an observed pixel to a world ray through the camera center.

    The pixel is undistorted first, so projecting any point of the returned
    ray with distortion disabled lands on the undistorted pixel.
    """
    xy = pixels_to_normalized(np.array([pixel[0], pixel[1]]), camera)
    xy, converged = undistort_normalized(xy, camera.distortion)
    if not bool(np.all(converged)):
        raise NoConvergence("undistortion did not converge for this pixel")
    d_cam = np.array([xy[0], xy[1], 1.0])
    d_world = pose.rotation @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=pose.center.copy(), direction=d_world)


def unproject_pixels(uv: np.ndarray, pose: Pose, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized unprojection of raw pixels (N, 2) to unit world directions.

    Returns:
        (directions (N, 3), convergence mask of the undistortion).
    """
    xy = pixels_to_normalized(uv, camera)
    xy, converged = undistort_normalized(xy, camera.distortion)
    d_cam = np.concatenate([xy, np.ones((*xy.shape[:-1], 1))], axis=-1)
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return d_world, converged


def undistort_pixel(pixel: PixelCoord, camera: CameraModel) -> PixelCoord:
    """Return the ideal-pinhole location of an observed (distorted) pixel.

    Raises:
        NoConvergence: If the fixed-point iteration hits the cap, which
            signals pathological distortion coefficients.
    """
    xy = pixels_to_normalized(np.array([pixel[0], pixel[1]]), camera)
    xy, converged = undistort_normalized(xy, camera.distortion)
    if not bool(np.all(converged)):
        raise NoConvergence(
            f"undistortion exceeded {UNDISTORT_MAX_ITERATIONS} iterations"
        )
    uv = normalized_to_pixels(xy, camera)
    return PixelCoord(float(uv[0]), float(uv[1]))


def distort_pixel(pixel: PixelCoord, camera: CameraModel) -> PixelCoord:
    """Map an ideal-pinhole pixel to its observed (distorted) location."""
    xy = pixels_to_normalized(np.array([pixel[0], pixel[1]]), camera)
    xy = distort_normalized(xy, camera.distortion)
    uv = normalized_to_pixels(xy, camera)
    return PixelCoord(float(uv[0]), float(uv[1]))


def sample_bilinear(image: np.ndarray, pixel: PixelCoord) -> Optional[np.ndarray]:
    """Bilinearly interpolate the image at a raster coordinate.

    Returns ``None`` when the 2x2 support exits the raster.
    """
    colors, valid = sample_bilinear_many(
        image, np.array([[pixel[0], pixel[1]]], dtype=np.float64)
    )
    if not valid[0]:
        return None
    return colors[0]


def sample_bilinear_many(
    image: np.ndarray, uv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear sampling.

    Args:
        image: (H, W) or (H, W, C) raster.
        uv: (N, 2) raster coordinates.

    Returns:
        (samples (N,) or (N, C) float64, validity mask (N,)). Samples of
        invalid coordinates are zero.
    """
    if image.size == 0:
        raise ValueError("image is empty")
    h, w = image.shape[:2]
    u = np.asarray(uv, dtype=np.float64)[:, 0]
    v = np.asarray(uv, dtype=np.float64)[:, 1]
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    valid &= np.isfinite(u) & np.isfinite(v)

    # On the far edge the support collapses to the last pixel row/column.
    u0 = np.clip(np.floor(np.where(valid, u, 0.0)).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(np.where(valid, v, 0.0)).astype(np.int64), 0, max(h - 2, 0))
    fu = np.where(valid, u, 0.0) - u0
    fv = np.where(valid, v, 0.0) - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)

    img = image.astype(np.float64)
    if img.ndim == 2:
        fu_, fv_ = fu, fv
    else:
        fu_, fv_ = fu[:, None], fv[:, None]
    top = img[v0, u0] * (1.0 - fu_) + img[v0, u1] * fu_
    bottom = img[v1, u0] * (1.0 - fu_) + img[v1, u1] * fu_
    out = top * (1.0 - fv_) + bottom * fv_
    if img.ndim == 2:
        out = np.where(valid, out, 0.0)
    else:
        out = np.where(valid[:, None], out, 0.0)
    return out, valid

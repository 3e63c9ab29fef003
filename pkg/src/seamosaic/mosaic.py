"""Incremental 2D mosaicing: plane-induced rectification and stitching.

Each selected image is warped onto the current projection plane through the
plane-induced homography and composited into a growing canvas. When the
fitted plane drifts past the configured thresholds a new segment starts.
Every rectified tile is written with an ASCII world file so GIS software
can display it georeferenced in the local plane coordinate system.

Plane raster convention: plane coordinate ``a`` grows with canvas column,
``b`` shrinks with canvas row (north-up style), and all tile and canvas
origins sit on the global lattice of integer multiples of the GSD, which
makes compositing exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import (
    CameraModel,
    Pose,
    distort_normalized,
    normalized_to_pixels,
    pixels_to_normalized,
    sample_bilinear_many,
    undistort_normalized,
)
from .errors import CameraOnPlane, DegenerateHint, EmptyFootprint
from .planes import Plane, PlaneFitReport

DEFAULT_MAX_NORMAL_CHANGE_DEG = 10.0
DEFAULT_MAX_OFFSET_CHANGE = 0.15
DEFAULT_REL_RESIDUAL_MAX = 0.05
DEFAULT_MAX_CANVAS_DIM = 16384


@dataclass(frozen=True)
class PlaneFrame:
    """Orthonormal 2D coordinate frame on a plane."""

    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    normal: np.ndarray

    def to_plane(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) to plane coordinates (N, 2)."""
        delta = np.asarray(points, dtype=np.float64) - self.origin
        return np.column_stack([delta @ self.u_axis, delta @ self.v_axis])

    def to_world(self, ab: np.ndarray) -> np.ndarray:
        """Plane coordinates (N, 2) to world points (N, 3)."""
        ab = np.asarray(ab, dtype=np.float64)
        return (
            self.origin
            + ab[:, 0:1] * self.u_axis[None, :]
            + ab[:, 1:2] * self.v_axis[None, :]
        )


def build_plane_frame(
    plane: Plane, tie_points: np.ndarray, hint_axis: np.ndarray
) -> PlaneFrame:
    """Anchor a 2D frame on the plane at the projected inlier centroid.

    The u axis is the hint axis projected into the plane; when the hint is
    within 5 degrees of the normal the world Y axis is used instead.

    Raises:
        DegenerateHint: If both the hint and the fallback are near-parallel
            to the normal (unreachable for an orthogonal fallback; kept as
            a guard).
    """
    n = plane.normal
    centroid = np.atleast_2d(tie_points).mean(axis=0)
    origin = centroid - (centroid @ n - plane.offset) * n

    hint = np.asarray(hint_axis, dtype=np.float64)
    hint = hint / np.linalg.norm(hint)
    if abs(hint @ n) > np.cos(np.radians(5.0)):
        hint = np.array([0.0, 1.0, 0.0])
    in_plane = hint - (hint @ n) * n
    norm = np.linalg.norm(in_plane)
    if norm < 1e-9:
        raise DegenerateHint("hint and fallback both parallel to the normal")
    u_axis = in_plane / norm
    v_axis = np.cross(n, u_axis)
    return PlaneFrame(origin=origin, u_axis=u_axis, v_axis=v_axis, normal=n.copy())


@dataclass(frozen=True)
class Homography:
    """3x3 map from plane coordinates (a, b, 1) to homogeneous UNDISTORTED
    pixel coordinates, normalized so h[2, 2] = 1 where possible."""

    h: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=np.float64).reshape(3, 3)
        if abs(h[2, 2]) > 1e-12:
            h = h / h[2, 2]
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    def apply(self, ab: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map plane coords (N, 2) to undistorted pixels (N, 2).

        Returns (pixels, validity); points mapping behind the camera
        (non-positive homogeneous w) are invalid.
        """
        ab = np.asarray(ab, dtype=np.float64)
        hom = np.column_stack([ab, np.ones(len(ab))]) @ self.h.T
        w = hom[:, 2]
        valid = w > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = hom[:, :2] / w[:, None]
        return uv, valid

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.h)


def plane_to_image_homography(
    pose: Pose, camera: CameraModel, frame: PlaneFrame
) -> Homography:
    """Plane-induced homography for one camera.

    For plane coordinates (a, b) the world point is origin + a*u + b*v, so
    h ~ K [R^T u | R^T v | R^T (origin - center)].

    Raises:
        CameraOnPlane: If the camera center lies on the plane.
    """
    if abs(frame.normal @ pose.center - frame.normal @ frame.origin) <= 1e-9:
        raise CameraOnPlane("camera center lies on the projection plane")
    rt = pose.rotation.T
    k = camera.intrinsic_matrix
    h = k @ np.column_stack(
        [rt @ frame.u_axis, rt @ frame.v_axis, rt @ (frame.origin - pose.center)]
    )
    return Homography(h)


@dataclass(frozen=True)
class WorldFile:
    """Six-parameter affine pixel-to-world map.

    x = A*col + B*row + C, y = D*col + E*row + F, with (C, F) the world
    coordinates of the CENTER of the top-left pixel.
    """

    a: float
    d: float
    b: float
    e: float
    c: float
    f: float

    def to_text(self) -> str:
        return "".join(
            f"{value:.10f}\n"
            for value in (self.a, self.d, self.b, self.e, self.c, self.f)
        )

    @classmethod
    def parse(cls, text: str) -> "WorldFile":
        values = [float(line) for line in text.split()]
        if len(values) != 6:
            raise ValueError("world file must have six values")
        return cls(*values)

    def pixel_to_world(self, col: np.ndarray, row: np.ndarray) -> np.ndarray:
        return np.stack(
            [
                self.a * col + self.b * row + self.c,
                self.d * col + self.e * row + self.f,
            ],
            axis=-1,
        )

    def world_to_pixel(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        det = self.a * self.e - self.b * self.d
        dx = xy[:, 0] - self.c
        dy = xy[:, 1] - self.f
        col = (self.e * dx - self.b * dy) / det
        row = (-self.d * dx + self.a * dy) / det
        return np.stack([col, row], axis=-1)


def axis_aligned_world_file(gsd: float, origin_a: float, origin_b: float) -> WorldFile:
    return WorldFile(a=gsd, d=0.0, b=0.0, e=-gsd, c=origin_a, f=origin_b)


def write_world_file(path, world_file: WorldFile) -> None:
    from pathlib import Path

    Path(path).write_text(world_file.to_text())


@dataclass
class Tile:
    """One rectified image on the segment lattice."""

    colors: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    origin: tuple[float, float]  # plane coords of the top-left pixel center
    gsd: float

    @property
    def world_file(self) -> WorldFile:
        return axis_aligned_world_file(self.gsd, self.origin[0], self.origin[1])


def rectify_image(
    image: np.ndarray,
    homography: Homography,
    camera: CameraModel,
    gsd: float,
    max_tile_dim: int = DEFAULT_MAX_CANVAS_DIM,
) -> Tile:
    """Inverse-mapping rectification of one image onto the plane lattice.

    The tile bounding box comes from the undistorted image corners mapped
    through the inverse homography; each tile pixel is mapped back through
    the homography, redistorted, and sampled bilinearly from the source.

    Raises:
        EmptyFootprint: Grazing geometry (a corner maps behind the camera,
            zero-area footprint, or an unbounded tile).
    """
    h_img, w_img = image.shape[:2]
    corners = np.array(
        [[0.0, 0.0], [w_img - 1.0, 0.0], [0.0, h_img - 1.0], [w_img - 1.0, h_img - 1.0]]
    )
    xy = pixels_to_normalized(corners, camera)
    xy, _ = undistort_normalized(xy, camera.distortion)
    undist = normalized_to_pixels(xy, camera)
    inv = homography.inverse()
    hom = np.column_stack([undist, np.ones(4)]) @ inv.T
    if np.any(hom[:, 2] <= 1e-12):
        raise EmptyFootprint("image corner maps behind the plane horizon")
    ab = hom[:, :2] / hom[:, 2:3]

    a_min, b_min = ab.min(axis=0)
    a_max, b_max = ab.max(axis=0)
    if a_max - a_min < gsd or b_max - b_min < gsd:
        raise EmptyFootprint("projected footprint has zero area")
    # Snap the tile origin to the global gsd lattice so tiles composite
    # without resampling.
    a0 = np.floor(a_min / gsd) * gsd
    b0 = np.ceil(b_max / gsd) * gsd
    cols = int(np.ceil((a_max - a0) / gsd)) + 1
    rows = int(np.ceil((b0 - b_min) / gsd)) + 1
    if cols > max_tile_dim or rows > max_tile_dim:
        raise EmptyFootprint(f"tile {cols}x{rows} exceeds bound {max_tile_dim}")

    aa = a0 + np.arange(cols) * gsd
    bb = b0 - np.arange(rows) * gsd
    grid = np.stack(
        [np.repeat(bb, cols), np.tile(aa, rows)], axis=1
    )  # (rows*cols, 2) as (b, a)
    ab_flat = np.column_stack([grid[:, 1], grid[:, 0]])
    undist_uv, valid = homography.apply(ab_flat)
    xy = pixels_to_normalized(undist_uv, camera)
    xy = distort_normalized(xy, camera.distortion)
    raw_uv = normalized_to_pixels(xy, camera)
    raw_uv[~valid] = -1e9
    samples, sample_ok = sample_bilinear_many(image, raw_uv)
    mask = (valid & sample_ok).reshape(rows, cols)
    if image.ndim == 2:
        samples = np.repeat(samples[:, None], 3, axis=1)
    colors = np.clip(np.rint(samples.reshape(rows, cols, -1)[:, :, :3]), 0, 255)
    colors = colors.astype(np.uint8)
    colors[~mask] = 0
    return Tile(colors=colors, mask=mask, origin=(float(a0), float(b0)), gsd=gsd)


@dataclass
class MosaicSegment:
    """A growing rectified canvas over one projection plane."""

    id: int
    plane: Plane
    plane_frame: PlaneFrame
    gsd: float
    blend: str = "last"  # "last" or "feather"
    max_canvas_dim: int = DEFAULT_MAX_CANVAS_DIM
    canvas_origin: tuple[float, float] | None = None
    contributing_frame_ids: list[int] = field(default_factory=list)
    _colors: np.ndarray | None = None  # last: uint8; feather: float32 sums
    _mask: np.ndarray | None = None  # last: bool
    _weights: np.ndarray | None = None  # feather only

    @property
    def empty(self) -> bool:
        return self._colors is None

    @property
    def shape(self) -> tuple[int, int]:
        return (0, 0) if self.empty else self._colors.shape[:2]

    def _tile_offset(self, tile: Tile) -> tuple[int, int]:
        col = round((tile.origin[0] - self.canvas_origin[0]) / self.gsd)
        row = round((self.canvas_origin[1] - tile.origin[1]) / self.gsd)
        return int(row), int(col)

    def grown_shape(self, tile: Tile) -> tuple[int, int]:
        """Canvas shape after compositing the tile (for the memory cap)."""
        if self.empty:
            return tile.colors.shape[:2]
        row0, col0 = self._tile_offset(tile)
        rows, cols = self.shape
        t_rows, t_cols = tile.colors.shape[:2]
        top = min(0, row0)
        left = min(0, col0)
        bottom = max(rows, row0 + t_rows)
        right = max(cols, col0 + t_cols)
        return bottom - top, right - left

    def exceeds_cap(self, tile: Tile) -> bool:
        rows, cols = self.grown_shape(tile)
        return rows > self.max_canvas_dim or cols > self.max_canvas_dim

    def _grow_to_fit(self, tile: Tile) -> tuple[int, int]:
        """Expand the canvas to cover the tile; returns the tile offset."""
        t_rows, t_cols = tile.colors.shape[:2]
        if self.empty:
            self.canvas_origin = tile.origin
            if self.blend == "feather":
                self._colors = np.zeros((t_rows, t_cols, 3), dtype=np.float32)
                self._weights = np.zeros((t_rows, t_cols), dtype=np.float32)
            else:
                self._colors = np.zeros((t_rows, t_cols, 3), dtype=np.uint8)
                self._mask = np.zeros((t_rows, t_cols), dtype=bool)
            return 0, 0

        row0, col0 = self._tile_offset(tile)
        rows, cols = self.shape
        top = min(0, row0)
        left = min(0, col0)
        bottom = max(rows, row0 + t_rows)
        right = max(cols, col0 + t_cols)
        if top < 0 or left < 0 or bottom > rows or right > cols:
            new_rows = bottom - top
            new_cols = right - left
            def grown(arr, fill=0):
                out = np.zeros((new_rows, new_cols, *arr.shape[2:]), dtype=arr.dtype)
                if fill:
                    out[...] = fill
                out[-top : -top + rows, -left : -left + cols] = arr
                return out

            self._colors = grown(self._colors)
            if self._mask is not None:
                self._mask = grown(self._mask)
            if self._weights is not None:
                self._weights = grown(self._weights)
            self.canvas_origin = (
                self.canvas_origin[0] + left * self.gsd,
                self.canvas_origin[1] - top * self.gsd,
            )
            row0 -= top
            col0 -= left
        return row0, col0

    def composite(self, tile: Tile, frame_id: int | None = None) -> None:
        """Blend a tile into the canvas, growing it as needed.

        Last-write-wins overwrites overlap; feathering accumulates
        distance-to-tile-edge weighted sums.
        """
        row0, col0 = self._grow_to_fit(tile)
        rows, cols = tile.colors.shape[:2]
        view = slice(row0, row0 + rows), slice(col0, col0 + cols)
        if self.blend == "feather":
            padded = np.zeros((rows + 2, cols + 2), dtype=bool)
            padded[1:-1, 1:-1] = tile.mask
            weight = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
            weight = weight.astype(np.float32)
            self._colors[view] += tile.colors.astype(np.float32) * weight[:, :, None]
            self._weights[view] += weight
        else:
            mask = tile.mask
            self._colors[view][mask] = tile.colors[mask]
            self._mask[view][mask] = True
        if frame_id is not None:
            self.contributing_frame_ids.append(frame_id)

    def render(self) -> tuple[np.ndarray, np.ndarray]:
        """(RGB uint8, validity mask) of the current canvas."""
        if self.empty:
            return np.zeros((0, 0, 3), dtype=np.uint8), np.zeros((0, 0), dtype=bool)
        if self.blend == "feather":
            mask = self._weights > 0
            colors = np.zeros_like(self._colors)
            np.divide(self._colors, self._weights[:, :, None], out=colors, where=mask[:, :, None])
            return np.clip(np.rint(colors), 0, 255).astype(np.uint8), mask
        return self._colors.copy(), self._mask.copy()

    @property
    def world_file(self) -> WorldFile:
        return axis_aligned_world_file(
            self.gsd, self.canvas_origin[0], self.canvas_origin[1]
        )

    def manifest_lines(self) -> list[str]:
        n = self.plane.normal
        o = self.plane_frame.origin
        u = self.plane_frame.u_axis
        return [
            f"segment = {self.id}",
            f"plane_normal = {n[0]:.12g} {n[1]:.12g} {n[2]:.12g}",
            f"plane_offset = {self.plane.offset:.12g}",
            f"frame_origin = {o[0]:.12g} {o[1]:.12g} {o[2]:.12g}",
            f"frame_u_axis = {u[0]:.12g} {u[1]:.12g} {u[2]:.12g}",
            f"gsd = {self.gsd:.12g}",
            "frames = " + " ".join(str(i) for i in self.contributing_frame_ids),
        ]


@dataclass(frozen=True)
class ReinitConfig:
    max_normal_change_deg: float = DEFAULT_MAX_NORMAL_CHANGE_DEG
    rel_residual_max: float = DEFAULT_REL_RESIDUAL_MAX
    max_offset_change: float = DEFAULT_MAX_OFFSET_CHANGE


def segment_reinit_check(
    current: Plane,
    new_fit: tuple[Plane, PlaneFitReport],
    scene_scale: float,
    config: ReinitConfig = ReinitConfig(),
    anchor_point: np.ndarray | None = None,
) -> str:
    """Decide whether the stitching assumptions still hold.

    Returns ``"continue"`` or ``"reinitialize"``. The offset change is the
    distance of the current segment's anchor (its plane-frame origin by
    default) from the new plane.
    """
    new_plane, report = new_fit
    cos_angle = float(np.clip(abs(current.normal @ new_plane.normal), -1.0, 1.0))
    if np.degrees(np.arccos(cos_angle)) > config.max_normal_change_deg:
        return "reinitialize"
    if report.rms_residual > config.rel_residual_max * scene_scale:
        return "reinitialize"
    anchor = (
        np.asarray(anchor_point, dtype=np.float64)
        if anchor_point is not None
        else current.normal * current.offset
    )
    offset_change = abs(new_plane.normal @ anchor - new_plane.offset)
    if offset_change > config.max_offset_change * scene_scale:
        return "reinitialize"
    return "continue"


def estimate_gsd(
    poses: list[Pose], camera: CameraModel, plane: Plane
) -> float:
    """Median ground footprint of the central pixel over the given poses."""
    footprints = []
    for pose in poses:
        for du in (0.0, 1.0):
            xy = pixels_to_normalized(
                np.array([[camera.cx + du, camera.cy]]), camera
            )
            d_cam = np.array([xy[0, 0], xy[0, 1], 1.0])
            d_world = pose.rotation @ d_cam
            denom = plane.normal @ d_world
            if abs(denom) < 1e-12:
                break
            t = (plane.offset - plane.normal @ pose.center) / denom
            if t <= 0:
                break
            point = pose.center + t * d_world
            if du == 0.0:
                p0 = point
            else:
                footprints.append(float(np.linalg.norm(point - p0)))
    if not footprints:
        raise EmptyFootprint("no pose sees the plane in front of the camera")
    return float(np.median(footprints))

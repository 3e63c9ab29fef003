"""Planar point-cloud projection: a subsampled image grid cast onto the plane.

Each selected image contributes one chunk: a uniform grid of pixels
(default 150 x 100, borders included) is undistorted, unprojected and
intersected with the current projection plane, carrying the pixel color.
Chunks accumulate into a streamable store and export as PLY.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel, Pose, sample_bilinear_many, unproject_pixels
from .errors import DuplicateFrame, EmptyChunk, EmptyCloud, InvalidSpec, IoFailure
from .planes import Plane

GRAZING_CUTOFF_DEG = 2.0


@dataclass(frozen=True)
class GridSpec:
    """Subsampling grid over the raster; defaults to the 150 x 100 pattern."""

    cols: int = 150
    rows: int = 100

    def __post_init__(self) -> None:
        if self.cols < 2 or self.rows < 2:
            raise InvalidSpec("grid needs at least 2 x 2 nodes")

    @property
    def point_budget(self) -> int:
        return self.cols * self.rows


@dataclass
class CloudChunk:
    """Colored planar points from one image."""

    frame_id: int
    segment_id: int
    points: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) uint8
    plane: Plane

    def __len__(self) -> int:
        return len(self.points)


def project_image_plane(
    image: np.ndarray,
    pose: Pose,
    camera: CameraModel,
    plane: Plane,
    grid: GridSpec = GridSpec(),
    frame_id: int = -1,
    segment_id: int = -1,
) -> CloudChunk:
    """Project a grid of image samples onto the plane as colored points.

    Grid nodes span the full raster inclusive of borders. Rays more grazing
    than 2 degrees of incidence or intersecting behind the camera are
    dropped.

    Raises:
        EmptyChunk: When every ray is rejected.
    """
    us = np.linspace(0.0, camera.width - 1.0, grid.cols)
    vs = np.linspace(0.0, camera.height - 1.0, grid.rows)
    uu, vv = np.meshgrid(us, vs)
    uv = np.column_stack([uu.ravel(), vv.ravel()])

    directions, converged = unproject_pixels(uv, pose, camera)
    denom = directions @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.offset - plane.normal @ pose.center) / denom
    keep = (
        converged
        & (np.abs(denom) > np.sin(np.radians(GRAZING_CUTOFF_DEG)))
        & (t > 0)
        & np.isfinite(t)
    )
    if not np.any(keep):
        raise EmptyChunk("all grid rays rejected")
    points = pose.center + t[keep, None] * directions[keep]

    samples, ok = sample_bilinear_many(image, uv[keep])
    if image.ndim == 2:
        samples = np.repeat(samples[:, None], 3, axis=1)
    colors = np.clip(np.rint(samples[:, :3]), 0, 255).astype(np.uint8)
    colors[~ok] = 128
    return CloudChunk(
        frame_id=frame_id,
        segment_id=segment_id,
        points=points,
        colors=colors,
        plane=plane,
    )


@dataclass
class CloudStore:
    """Accumulated chunks, retrievable by frame and by segment."""

    chunks: list[CloudChunk] = field(default_factory=list)
    _by_frame: dict[int, CloudChunk] = field(default_factory=dict)
    total_points: int = 0

    def accumulate(self, chunk: CloudChunk) -> None:
        """Append a chunk.

        Raises:
            DuplicateFrame: If this frame id was already accumulated.
        """
        if chunk.frame_id in self._by_frame:
            raise DuplicateFrame(f"frame {chunk.frame_id} already accumulated")
        self.chunks.append(chunk)
        self._by_frame[chunk.frame_id] = chunk
        self.total_points += len(chunk)

    def by_frame(self, frame_id: int) -> CloudChunk | None:
        return self._by_frame.get(frame_id)

    def by_segment(self, segment_id: int) -> list[CloudChunk]:
        return [c for c in self.chunks if c.segment_id == segment_id]

    def merged(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.chunks:
            return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
        return (
            np.vstack([c.points for c in self.chunks]),
            np.vstack([c.colors for c in self.chunks]),
        )

    def footprint_area(self) -> float:
        """Axis-aligned plan-view area of the accumulated cloud."""
        points, _ = self.merged()
        if len(points) == 0:
            return 0.0
        spans = points.max(axis=0) - points.min(axis=0)
        return float(spans[0] * spans[1])


PLY_VERTEX_BYTES = 27  # 3 float64 + 3 uint8


def export_ply(
    points: np.ndarray,
    colors: np.ndarray,
    path: str | Path,
    ascii_mode: bool = False,
) -> None:
    """Write a colored point cloud as PLY.

    Binary little-endian by default (x, y, z float64; red, green, blue
    uint8); ``ascii_mode`` switches to ASCII.

    Raises:
        EmptyCloud: Nothing to write.
        IoFailure: Filesystem error.
    """
    points = np.asarray(points, dtype="<f8").reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyCloud("refusing to write an empty PLY")
    fmt = "ascii" if ascii_mode else "binary_little_endian"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(points)}\n"
        "property float64 x\n"
        "property float64 y\n"
        "property float64 z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    try:
        with open(path, "wb") as handle:
            handle.write(header.encode("ascii"))
            if ascii_mode:
                lines = [
                    f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]} {c[1]} {c[2]}\n"
                    for p, c in zip(points, colors)
                ]
                handle.write("".join(lines).encode("ascii"))
            else:
                record = np.zeros(
                    len(points),
                    dtype=np.dtype(
                        [
                            ("x", "<f8"),
                            ("y", "<f8"),
                            ("z", "<f8"),
                            ("red", "u1"),
                            ("green", "u1"),
                            ("blue", "u1"),
                        ]
                    ),
                )
                record["x"], record["y"], record["z"] = points.T
                record["red"], record["green"], record["blue"] = colors.T
                handle.write(record.tobytes())
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Re-import a PLY written by :func:`export_ply` (test helper)."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    count = 0
    ascii_mode = False
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        if line.startswith("format ascii"):
            ascii_mode = True
    if ascii_mode:
        points = np.zeros((count, 3))
        colors = np.zeros((count, 3), dtype=np.uint8)
        body = raw[end:].decode("ascii").splitlines()
        for k in range(count):
            fields = body[k].split()
            points[k] = [float(v) for v in fields[:3]]
            colors[k] = [int(v) for v in fields[3:6]]
        return points, colors
    body = raw[end : end + count * PLY_VERTEX_BYTES]
    points = np.zeros((count, 3))
    colors = np.zeros((count, 3), dtype=np.uint8)
    for k in range(count):
        chunk = body[k * PLY_VERTEX_BYTES : (k + 1) * PLY_VERTEX_BYTES]
        points[k] = struct.unpack("<3d", chunk[:24])
        colors[k] = struct.unpack("<3B", chunk[24:])
    return points, colors

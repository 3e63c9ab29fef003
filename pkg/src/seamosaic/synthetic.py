"""Synthetic seabed scenes with exact ground truth.

Renders image sequences of procedurally textured terrains from known
trajectories and calibration, producing the replay files the pose engine
consumes plus ground-truth planes and marker coordinates for accuracy
checks. The texture is a band-limited sum of smooth random blobs rasterized
once per scene, so every consumer (renderer, tests, accuracy oracles)
evaluates the exact same function of world position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel, Pose, unproject_pixels
from .errors import DegenerateConfiguration, InvalidSpec
from .fileio import (
    R_NADIR,
    format_ahrs,
    format_trajectory,
    rotation_to_attitude,
    write_png,
)
from .planes import Plane

BASE_GRAY = 120.0
TINT = np.array([1.0, 0.96, 0.88])  # warm gray, keeps channels distinct
MARKER_COLOR = np.array([240.0, 32.0, 32.0])


@dataclass(frozen=True)
class SceneSpec:
    """Terrain + texture description.

    terrain: "flat", "two_level" (raised plateau for x >= step_position) or
    "inclined" (slope about the y axis). ``extent`` is the nominal surveyed
    corridor (x, y) in meters, centered on y; texture is generated with
    enough margin to cover the camera footprint beyond it.
    """

    terrain: str = "flat"
    extent: tuple[float, float] = (30.0, 1.2)
    texture_seed: int = 0
    blob_density: float = 120.0  # blobs per square meter
    step_height: float = 0.0
    step_position: float = 0.0
    incline_deg: float = 0.0
    markers: tuple[tuple[float, float], ...] = ()
    marker_radius: float = 0.05

    def __post_init__(self) -> None:
        if self.terrain not in ("flat", "two_level", "inclined"):
            raise InvalidSpec(f"unknown terrain {self.terrain!r}")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise InvalidSpec("extent must be positive")
        if self.step_height < 0:
            raise InvalidSpec("step height must be >= 0")
        if self.blob_density <= 0:
            raise InvalidSpec("blob density must be positive")


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path over the scene."""

    pattern: str = "single_strip"
    altitude: float = 2.0
    speed: float = 0.1  # m/s
    frame_rate: float = 0.5  # Hz
    overlap: float = 0.8  # lateral overlap between lawnmower strips

    def __post_init__(self) -> None:
        if self.pattern not in ("single_strip", "lawnmower"):
            raise InvalidSpec(f"unknown pattern {self.pattern!r}")
        if self.altitude <= 0:
            raise InvalidSpec("altitude must be positive")
        if not 0.0 < self.overlap < 1.0:
            raise InvalidSpec("overlap must be in (0, 1)")
        if self.speed < 0 or self.frame_rate <= 0:
            raise InvalidSpec("speed must be >= 0 and frame rate > 0")


class TextureField:
    """Band-limited procedural texture over the terrain, draped by (x, y).

    A gray blob field and a marker weight field are rasterized once at
    roughly the nadir ground sample distance; queries interpolate them
    bilinearly, so the function is identical for the renderer and for any
    oracle comparing colors at world positions.
    """

    def __init__(
        self,
        scene: SceneSpec,
        resolution: float,
        margin: float,
        seed: int,
    ) -> None:
        self.resolution = float(resolution)
        ex, ey = scene.extent
        self.x0 = -margin
        self.y0 = -ey / 2.0 - margin
        nx = int(np.ceil((ex + 2 * margin) / resolution)) + 1
        ny = int(np.ceil((ey + 2 * margin) / resolution)) + 1
        self.gray = np.full((ny, nx), BASE_GRAY, dtype=np.float32)
        self.marker_weight = np.zeros((ny, nx), dtype=np.float32)

        rng = np.random.default_rng(seed)
        area = (ex + 2 * margin) * (ey + 2 * margin)
        count = max(1, int(round(scene.blob_density * area)))
        cx = rng.uniform(self.x0, self.x0 + (nx - 1) * resolution, count)
        cy = rng.uniform(self.y0, self.y0 + (ny - 1) * resolution, count)
        sigma = rng.uniform(0.02, 0.08, count)
        amp = rng.uniform(20.0, 55.0, count) * rng.choice([-1.0, 1.0], count)
        for i in range(count):
            self._add_blob(cx[i], cy[i], sigma[i], amp[i])
        np.clip(self.gray, 10.0, 245.0, out=self.gray)

        for mx, my in scene.markers:
            self._add_marker(mx, my, scene.marker_radius)

    def _window(self, x: float, y: float, radius: float):
        col0 = max(int((x - radius - self.x0) / self.resolution), 0)
        row0 = max(int((y - radius - self.y0) / self.resolution), 0)
        col1 = min(int((x + radius - self.x0) / self.resolution) + 2, self.gray.shape[1])
        row1 = min(int((y + radius - self.y0) / self.resolution) + 2, self.gray.shape[0])
        if col0 >= col1 or row0 >= row1:
            return None
        xs = self.x0 + np.arange(col0, col1) * self.resolution
        ys = self.y0 + np.arange(row0, row1) * self.resolution
        return (slice(row0, row1), slice(col0, col1)), xs[None, :], ys[:, None]

    def _add_blob(self, x: float, y: float, sigma: float, amp: float) -> None:
        win = self._window(x, y, 4.0 * sigma)
        if win is None:
            return
        idx, xs, ys = win
        r2 = (xs - x) ** 2 + (ys - y) ** 2
        self.gray[idx] += amp * np.exp(-r2 / (2.0 * sigma * sigma))

    def _add_marker(self, x: float, y: float, radius: float) -> None:
        # Solid core with a smooth cosine skirt ~40% of the radius wide.
        skirt = 0.4 * radius
        win = self._window(x, y, radius + skirt)
        if win is None:
            return
        idx, xs, ys = win
        r = np.sqrt((xs - x) ** 2 + (ys - y) ** 2)
        w = np.where(
            r <= radius,
            1.0,
            0.5 * (1.0 + np.cos(np.clip((r - radius) / skirt, 0.0, 1.0) * np.pi)),
        )
        self.marker_weight[idx] = np.maximum(self.marker_weight[idx], w.astype(np.float32))

    def _lookup(self, raster: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        u = np.clip((x - self.x0) / self.resolution, 0.0, raster.shape[1] - 1.0)
        v = np.clip((y - self.y0) / self.resolution, 0.0, raster.shape[0] - 1.0)
        u0 = np.minimum(u.astype(np.int64), raster.shape[1] - 2)
        v0 = np.minimum(v.astype(np.int64), raster.shape[0] - 2)
        fu = u - u0
        fv = v - v0
        top = raster[v0, u0] * (1 - fu) + raster[v0, u0 + 1] * fu
        bot = raster[v0 + 1, u0] * (1 - fu) + raster[v0 + 1, u0 + 1] * fu
        return top * (1 - fv) + bot * fv

    def color(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """RGB (float, 0..255) of the texture at world (x, y)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gray = self._lookup(self.gray, x, y)
        rgb = gray[..., None] * TINT
        w = self._lookup(self.marker_weight, x, y)[..., None]
        return rgb * (1.0 - w) + MARKER_COLOR * w

    def marker_strength(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self._lookup(self.marker_weight, np.asarray(x), np.asarray(y))


def terrain_height(scene: SceneSpec, x: np.ndarray) -> np.ndarray:
    """Terrain elevation as a function of along-track coordinate x."""
    x = np.asarray(x, dtype=np.float64)
    if scene.terrain == "flat":
        return np.zeros_like(x)
    if scene.terrain == "two_level":
        return np.where(x >= scene.step_position, scene.step_height, 0.0)
    slope = np.tan(np.radians(scene.incline_deg))
    return x * slope


def terrain_planes(scene: SceneSpec) -> list[Plane]:
    if scene.terrain == "flat":
        return [Plane(np.array([0.0, 0.0, 1.0]), 0.0)]
    if scene.terrain == "two_level":
        return [
            Plane(np.array([0.0, 0.0, 1.0]), 0.0),
            Plane(np.array([0.0, 0.0, 1.0]), scene.step_height),
        ]
    alpha = np.radians(scene.incline_deg)
    return [Plane(np.array([-np.sin(alpha), 0.0, np.cos(alpha)]), 0.0)]


def _intersect_terrain(
    scene: SceneSpec, origins: np.ndarray, directions: np.ndarray
) -> np.ndarray:
    """Intersect world rays with the terrain; returns (N, 3) hit points."""
    planes = terrain_planes(scene)
    if scene.terrain != "two_level":
        plane = planes[0]
        denom = directions @ plane.normal
        t = (plane.offset - origins @ plane.normal) / denom
        return origins + t[:, None] * directions

    low, high = planes
    t_low = (low.offset - origins @ low.normal) / (directions @ low.normal)
    t_high = (high.offset - origins @ high.normal) / (directions @ high.normal)
    hit_low = origins + t_low[:, None] * directions
    hit_high = origins + t_high[:, None] * directions
    use_high = hit_high[:, 0] >= scene.step_position
    use_low = hit_low[:, 0] < scene.step_position
    points = np.where(use_high[:, None], hit_high, hit_low)
    # Rays that thread the step wall hit neither level's valid region;
    # clamp them onto the wall at x = step_position.
    wall = ~use_high & ~use_low
    if np.any(wall):
        t_wall = (scene.step_position - origins[wall, 0]) / directions[wall, 0]
        points[wall] = origins[wall] + t_wall[:, None] * directions[wall]
    return points


@dataclass
class SyntheticDataset:
    """Rendered sequence plus every ground-truth artifact tests rely on."""

    scene: SceneSpec
    trajectory: TrajectorySpec
    camera: CameraModel
    images: list[np.ndarray]
    poses: list[Pose]
    timestamps: list[float]
    texture: TextureField
    planes: list[Plane] = field(default_factory=list)
    marker_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def trajectory_text(self) -> str:
        return format_trajectory(
            [(i, t, p) for i, (t, p) in enumerate(zip(self.timestamps, self.poses))]
        )

    @property
    def ahrs_text(self) -> str:
        rows = []
        for t, pose in zip(self.timestamps, self.poses):
            roll, pitch, yaw = rotation_to_attitude(pose.rotation)
            rows.append((t, roll, pitch, yaw))
        return format_ahrs(rows)

    def write(self, out_dir: str | Path) -> Path:
        """Write images, trajectory, AHRS, camera and manifest files."""
        out = Path(out_dir)
        images_dir = out / "images"
        images_dir.mkdir(parents=True, exist_ok=True)
        for i, image in enumerate(self.images):
            write_png(images_dir / f"frame_{i:06d}.png", image)
        (out / "trajectory.txt").write_text(self.trajectory_text)
        (out / "ahrs.txt").write_text(self.ahrs_text)
        cam = self.camera
        lines = [
            f"fx = {cam.fx}",
            f"fy = {cam.fy}",
            f"cx = {cam.cx}",
            f"cy = {cam.cy}",
            f"width = {cam.width}",
            f"height = {cam.height}",
            f"k1 = {cam.distortion.k1}",
            f"k2 = {cam.distortion.k2}",
            f"k3 = {cam.distortion.k3}",
            f"p1 = {cam.distortion.p1}",
            f"p2 = {cam.distortion.p2}",
        ]
        (out / "camera.txt").write_text("\n".join(lines) + "\n")
        manifest = [f"terrain = {self.scene.terrain}"]
        for i, plane in enumerate(self.planes):
            n = plane.normal
            manifest.append(
                f"plane_{i} = {n[0]:.12g} {n[1]:.12g} {n[2]:.12g} {plane.offset:.12g}"
            )
        for i, m in enumerate(self.marker_points):
            manifest.append(f"marker_{i} = {m[0]:.12g} {m[1]:.12g} {m[2]:.12g}")
        (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
        return out


def _trajectory_poses(
    scene: SceneSpec, traj: TrajectorySpec, camera: CameraModel
) -> tuple[list[Pose], list[float]]:
    ex, ey = scene.extent
    footprint_x = traj.altitude * camera.width / camera.fx
    footprint_y = traj.altitude * camera.height / camera.fy
    margin = footprint_x / 2.0
    x_start, x_end = margin, max(ex - margin, margin)
    step = traj.speed / traj.frame_rate

    if traj.pattern == "single_strip":
        lines = [0.0]
    else:
        spacing = footprint_y * (1.0 - traj.overlap)
        half = ey / 2.0
        lines = list(np.arange(-half, half + spacing / 2, spacing)) or [0.0]

    positions: list[np.ndarray] = []
    times: list[float] = []
    t = 0.0
    for strip_index, y in enumerate(lines):
        if x_end <= x_start or step <= 0:
            xs = np.array([x_start])
        else:
            xs = np.arange(x_start, x_end + step / 2, step)
        if strip_index % 2 == 1:
            xs = xs[::-1]
        for x in xs:
            base_z = float(terrain_height(scene, np.array([x]))[0])
            positions.append(np.array([x, y, base_z + traj.altitude]))
            times.append(t)
            t += 1.0 / traj.frame_rate
    poses = [Pose(R_NADIR.copy(), p) for p in positions]
    return poses, times


def render_frame(
    scene: SceneSpec,
    texture: TextureField,
    pose: Pose,
    camera: CameraModel,
    pixel_dirs_cache: dict | None = None,
) -> np.ndarray:
    """Ray-cast one frame: per pixel, unproject, hit terrain, look up texture."""
    key = "dirs"
    if pixel_dirs_cache is not None and key in pixel_dirs_cache:
        dirs_cam = pixel_dirs_cache[key]
    else:
        us, vs = np.meshgrid(
            np.arange(camera.width, dtype=np.float64),
            np.arange(camera.height, dtype=np.float64),
        )
        uv = np.stack([us.ravel(), vs.ravel()], axis=1)
        # Undistort once: directions in the camera frame are pose-independent.
        dirs_world, _ = unproject_pixels(uv, Pose.identity(), camera)
        dirs_cam = dirs_world
        if pixel_dirs_cache is not None:
            pixel_dirs_cache[key] = dirs_cam
    dirs = dirs_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.center, dirs.shape)
    hits = _intersect_terrain(scene, origins, dirs)
    rgb = texture.color(hits[:, 0], hits[:, 1])
    image = rgb.reshape(camera.height, camera.width, 3)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def render_sequence(
    scene: SceneSpec,
    traj: TrajectorySpec,
    camera: CameraModel,
    seed: int = 0,
) -> SyntheticDataset:
    """Render a full sequence with ground truth; deterministic per seed."""
    poses, times = _trajectory_poses(scene, traj, camera)
    footprint_x = traj.altitude * camera.width / camera.fx
    margin = footprint_x / 2.0 + 1.0
    resolution = traj.altitude / max(camera.fx, camera.fy)
    texture = TextureField(scene, resolution=resolution, margin=margin, seed=seed)

    cache: dict = {}
    images = [render_frame(scene, texture, pose, camera, cache) for pose in poses]

    mx = np.array([m[0] for m in scene.markers], dtype=np.float64)
    my = np.array([m[1] for m in scene.markers], dtype=np.float64)
    markers = np.column_stack([mx, my, terrain_height(scene, mx)]) if len(mx) else np.zeros((0, 3))
    return SyntheticDataset(
        scene=scene,
        trajectory=traj,
        camera=camera,
        images=images,
        poses=poses,
        timestamps=times,
        texture=texture,
        planes=terrain_planes(scene),
        marker_points=markers,
    )


@dataclass(frozen=True)
class SimilarityReport:
    """Best-fit similarity between a point set and its reference."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residuals: np.ndarray  # (N, 3), in reference units
    rms: float  # component-wise: sqrt(sum(residuals^2) / (3N))

    @property
    def residual_norms(self) -> np.ndarray:
        return np.linalg.norm(self.residuals, axis=1)


def compare_to_reference(
    points: np.ndarray, reference: np.ndarray
) -> SimilarityReport:
    """Closed-form 7-parameter similarity alignment and residual report.

    Centroid alignment, rotation from the SVD of the cross-covariance,
    scale from the variance ratio (Umeyama's method). The RMS is over
    residual components, matching the chi-square expectation
    sigma * sqrt(1 - 7/(3N)) for isotropic noise.

    Raises:
        DegenerateConfiguration: Fewer than 3 points or collinear geometry.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] < 3 or p.shape != q.shape:
        raise DegenerateConfiguration("need >= 3 paired correspondences")
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    pc = p - p_mean
    qc = q - q_mean
    var_p = np.mean(np.sum(pc**2, axis=1))
    cov = qc.T @ pc / p.shape[0]
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12 * max(s[0], 1e-300) or var_p <= 0:
        raise DegenerateConfiguration("correspondences are collinear")
    d = np.sign(np.linalg.det(u @ vt))
    diag = np.array([1.0, 1.0, d])
    rotation = u @ np.diag(diag) @ vt
    scale = float(np.sum(s * diag) / var_p)
    translation = q_mean - scale * rotation @ p_mean
    aligned = scale * p @ rotation.T + translation
    residuals = aligned - q
    rms = float(np.sqrt(np.sum(residuals**2) / residuals.size))
    return SimilarityReport(scale, rotation, translation, residuals, rms)


def comex_like_specs(
    n_frames: int = 121,
    altitude: float = 2.0,
    with_markers: bool = True,
    terrain: str = "flat",
    step_height: float = 0.0,
) -> tuple[SceneSpec, TrajectorySpec, CameraModel]:
    """Dataset mimicking a 968x728, 0.5 fps single strip over a 1.2 x 30 m pool
    corridor; speed chosen so the strip yields exactly ``n_frames`` frames."""
    camera = CameraModel(fx=840.0, fy=840.0, cx=483.5, cy=363.5, width=968, height=728)
    length = 30.0
    footprint_x = altitude * camera.width / camera.fx
    travel = length - footprint_x
    frame_rate = 0.5
    speed = travel * frame_rate / max(n_frames - 1, 1)
    markers: tuple[tuple[float, float], ...] = ()
    if with_markers:
        xs = np.linspace(3.0, length - 3.0, 10)
        markers = tuple((float(x), float(y)) for x in xs for y in (-0.3, 0.3))
    scene = SceneSpec(
        terrain=terrain,
        extent=(length, 1.2),
        texture_seed=0,
        markers=markers,
        step_height=step_height,
        step_position=length / 2.0 if terrain == "two_level" else 0.0,
    )
    traj = TrajectorySpec(
        pattern="single_strip",
        altitude=altitude,
        speed=speed,
        frame_rate=frame_rate,
    )
    return scene, traj, camera

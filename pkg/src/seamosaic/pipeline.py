"""End-to-end orchestration: acquisition, pose engine, plane fitting,
mosaicing, point-cloud projection and streaming.

Stages run on their own threads connected by bounded queues, so
back-pressure propagates from the slowest stage up to the pacing loop and
a stalled viewer can never stall processing (the broker never blocks on a
client). The mapping stage consumes immutable keyframe snapshots only,
which keeps outputs bit-reproducible regardless of thread timing.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import load_camera_file, parse_keyvalue
from .cloud import CloudStore, GridSpec, export_ply, project_image_plane
from .errors import (
    ConfigError,
    EmptyChunk,
    EmptyFootprint,
    InputError,
    SeamosaicError,
)
from .fileio import attitude_to_rotation, parse_ahrs, read_png, write_png
from .mosaic import (
    MosaicSegment,
    ReinitConfig,
    build_plane_frame,
    estimate_gsd,
    plane_to_image_homography,
    rectify_image,
    segment_reinit_check,
    write_world_file,
)
from .planes import (
    PlanarityConfig,
    Plane,
    PlaneFitReport,
    horizontal_plane_from_ahrs,
    planarity_check,
    ransac_plane_fit,
)
from .stream import RateBudget, StreamBroker
from .vo import FrameEvent, PoseEngine, ReplayPoseProvider, VOConfig

logger = logging.getLogger(__name__)

FRAME_QUEUE_SIZE = 8
EVENT_QUEUE_SIZE = 16
CANVAS_PREVIEW_DIM = 2048


@dataclass
class RunConfig:
    """Everything one pipeline run needs; loadable from a key = value file."""

    camera_path: str = ""
    images_dir: str = ""
    input_mode: str = "replay_with_trajectory"  # or "image_directory"
    trajectory_path: str | None = None
    ahrs_path: str | None = None
    output_dir: str = "runs"
    run_name: str | None = None
    fps: float = 0.5
    mosaic_stride: int = 1  # forward every k-th keyframe to the mapping stage
    resolution_divisor: int = 1
    window_size: int = 5
    plane_source: str = "ransac"  # or "ahrs"
    blend: str = "last"
    grid_cols: int = 150
    grid_rows: int = 100
    gsd: float | None = None
    ransac_rel_threshold: float = 0.02
    rel_residual_max: float = 0.05
    min_inlier_fraction: float = 0.5
    max_normal_change_deg: float = 10.0
    max_offset_change: float = 0.15
    max_canvas_dim: int = 16384
    canvas_refresh_every: int = 5
    pose_hz: float = 5.0
    cloud_hz: float = 0.5
    seed: int = 0
    fast: bool = False
    batch: bool = False
    listen: str | None = None

    def validate(self) -> None:
        if self.input_mode not in ("image_directory", "replay_with_trajectory"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.input_mode == "replay_with_trajectory" and not self.trajectory_path:
            raise ConfigError("replay_with_trajectory requires trajectory_path")
        if self.resolution_divisor not in (1, 2, 4):
            raise ConfigError("resolution_divisor must be 1, 2 or 4")
        if self.window_size not in (3, 5):
            raise ConfigError("window_size must be 3 or 5")
        if self.plane_source not in ("ransac", "ahrs"):
            raise ConfigError(f"unknown plane_source {self.plane_source!r}")
        if self.plane_source == "ahrs" and not self.ahrs_path:
            raise ConfigError("plane_source ahrs requires ahrs_path")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.mosaic_stride < 1:
            raise ConfigError("mosaic_stride must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        entries = parse_keyvalue(path.read_text())
        config = cls()
        bools = {"fast", "batch"}
        ints = {
            "resolution_divisor", "window_size", "grid_cols", "grid_rows",
            "max_canvas_dim", "canvas_refresh_every", "seed", "mosaic_stride",
        }
        floats = {
            "fps", "gsd", "ransac_rel_threshold", "rel_residual_max",
            "min_inlier_fraction", "max_normal_change_deg", "max_offset_change",
            "pose_hz", "cloud_hz",
        }
        for key, value in entries.items():
            if not hasattr(config, key):
                raise ConfigError(f"unknown config key {key!r}")
            if key in bools:
                setattr(config, key, value.lower() in ("1", "true", "yes"))
            elif key in ints:
                setattr(config, key, int(value))
            elif key in floats:
                setattr(config, key, float(value))
            else:
                setattr(config, key, value)
        # Paths in the file are relative to the file itself.
        for key in ("camera_path", "images_dir", "trajectory_path", "ahrs_path",
                    "output_dir"):
            value = getattr(config, key)
            if value and not Path(value).is_absolute():
                setattr(config, key, str((path.parent / value).resolve()))
        config.validate()
        return config


@dataclass
class StageTimer:
    durations: list[float] = field(default_factory=list)

    def add(self, dt: float) -> None:
        self.durations.append(dt)

    def percentiles(self) -> dict[str, float]:
        if not self.durations:
            return {"p50": 0.0, "p90": 0.0, "max": 0.0}
        arr = np.array(self.durations)
        return {
            "p50": float(np.percentile(arr, 50)),
            "p90": float(np.percentile(arr, 90)),
            "max": float(arr.max()),
        }


@dataclass
class RunReport:
    frames_processed: int = 0
    frames_tracked: int = 0
    frames_lost: int = 0
    frames_pending: int = 0
    keyframes: int = 0
    segments_created: int = 0
    chunks_emitted: int = 0
    skipped_projection: int = 0
    elapsed_seconds: float = 0.0
    achieved_pose_hz: float = 0.0
    achieved_cloud_hz: float = 0.0
    stage_timings: dict = field(default_factory=dict)
    alerts: list[str] = field(default_factory=list)

    def consistent(self) -> bool:
        return (
            self.frames_tracked + self.frames_lost + self.frames_pending
            == self.frames_processed
        )

    def to_text(self) -> str:
        lines = [
            f"frames_processed = {self.frames_processed}",
            f"frames_tracked = {self.frames_tracked}",
            f"frames_lost = {self.frames_lost}",
            f"frames_pending = {self.frames_pending}",
            f"keyframes = {self.keyframes}",
            f"segments_created = {self.segments_created}",
            f"chunks_emitted = {self.chunks_emitted}",
            f"skipped_projection = {self.skipped_projection}",
            f"elapsed_seconds = {self.elapsed_seconds:.3f}",
            f"achieved_pose_hz = {self.achieved_pose_hz:.3f}",
            f"achieved_cloud_hz = {self.achieved_cloud_hz:.3f}",
        ]
        for stage, stats in self.stage_timings.items():
            lines.append(
                f"timing_{stage} = p50 {stats['p50']*1000:.1f} ms, "
                f"p90 {stats['p90']*1000:.1f} ms, max {stats['max']*1000:.1f} ms"
            )
        for alert in self.alerts:
            lines.append(f"alert = {alert}")
        return "\n".join(lines) + "\n"


def downscale(image: np.ndarray, divisor: int) -> np.ndarray:
    """Box-filter average over divisor x divisor blocks; size floor-divided."""
    if divisor == 1:
        return image
    h, w = image.shape[:2]
    h2, w2 = h // divisor, w // divisor
    cropped = image[: h2 * divisor, : w2 * divisor]
    if image.ndim == 2:
        blocks = cropped.reshape(h2, divisor, w2, divisor)
        out = blocks.mean(axis=(1, 3))
    else:
        blocks = cropped.reshape(h2, divisor, w2, divisor, image.shape[2])
        out = blocks.mean(axis=(1, 3))
    if np.issubdtype(image.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(image.dtype)
    return out.astype(image.dtype)


def list_input_images(images_dir: str | Path) -> list[Path]:
    directory = Path(images_dir)
    if not directory.is_dir():
        raise InputError(f"input directory not found: {directory}")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise InputError(f"no PNG frames in {directory}")
    return paths


class Pipeline:
    """One run of the four-block workflow over a replayed dataset."""

    def __init__(self, config: RunConfig, broker: StreamBroker | None = None) -> None:
        config.validate()
        self.config = config
        camera = load_camera_file(config.camera_path)
        if config.resolution_divisor > 1:
            camera = camera.scaled(config.resolution_divisor)
        self.camera = camera

        replay = None
        if config.input_mode == "replay_with_trajectory":
            replay = ReplayPoseProvider.from_file(config.trajectory_path)
        self.engine = PoseEngine(
            camera,
            VOConfig(window_size=config.window_size, seed=config.seed),
            replay=replay,
        )
        self.broker = broker if broker is not None else StreamBroker(
            budget=RateBudget(pose_hz=config.pose_hz, cloud_hz=config.cloud_hz)
        )
        self.broker.restart_callback = self._on_restart_command

        # AHRS rows are indexed by frame id (row k belongs to frame k).
        self._ahrs_rows: list[tuple[float, float, float, float]] = []
        if config.ahrs_path:
            self._ahrs_rows = parse_ahrs(Path(config.ahrs_path).read_text())

        run_name = config.run_name or time.strftime("%Y%m%d-%H%M%S")
        self.run_dir = Path(config.output_dir) / run_name
        (self.run_dir / "segments").mkdir(parents=True, exist_ok=True)
        (self.run_dir / "tiles").mkdir(parents=True, exist_ok=True)

        self.report = RunReport()
        self.cloud = CloudStore()
        self.segments: list[MosaicSegment] = []
        self.active_segment: MosaicSegment | None = None
        self._segment_tiles = 0
        self._restart_requested = threading.Event()
        self._abort = threading.Event()
        self._keyframe_counter = 0
        self._timers = {"acquire": StageTimer(), "pose": StageTimer(),
                        "mapping": StageTimer()}

    # --------------------------------------------------------------- control

    def _on_restart_command(self) -> None:
        self._restart_requested.set()

    # ------------------------------------------------------------------ run

    def run(self) -> RunReport:
        paths = list_input_images(self.config.images_dir)
        frames_q: queue.Queue = queue.Queue(maxsize=FRAME_QUEUE_SIZE)
        events_q: queue.Queue = queue.Queue(maxsize=EVENT_QUEUE_SIZE)
        start = time.perf_counter()

        acquirer = threading.Thread(
            target=self._acquire, args=(paths, frames_q), name="acquire"
        )
        poser = threading.Thread(
            target=self._pose_stage, args=(frames_q, events_q), name="pose"
        )
        mapper = threading.Thread(
            target=self._mapping_stage, args=(events_q,), name="mapping"
        )
        for thread in (acquirer, poser, mapper):
            thread.start()
        for thread in (acquirer, poser, mapper):
            thread.join()

        self._finalize_products()
        elapsed = time.perf_counter() - start
        self.report.elapsed_seconds = elapsed
        if elapsed > 0:
            self.report.achieved_pose_hz = self.report.frames_processed / elapsed
            self.report.achieved_cloud_hz = self.report.chunks_emitted / elapsed
        self.report.stage_timings = {
            name: timer.percentiles() for name, timer in self._timers.items()
        }
        (self.run_dir / "report.txt").write_text(self.report.to_text())
        return self.report

    # ------------------------------------------------------------ stage: I/O

    def _acquire(self, paths: list[Path], frames_q: queue.Queue) -> None:
        interval = 1.0 / self.config.fps
        for frame_id, path in enumerate(paths):
            if self._abort.is_set():
                break
            t0 = time.perf_counter()
            image = read_png(path)
            if self.config.resolution_divisor > 1:
                image = downscale(image, self.config.resolution_divisor)
            frames_q.put((frame_id, frame_id * interval, image))
            self._timers["acquire"].add(time.perf_counter() - t0)
            if not self.config.fast:
                leftover = interval - (time.perf_counter() - t0)
                if leftover > 0:
                    time.sleep(leftover)
        frames_q.put(None)

    # ----------------------------------------------------------- stage: pose

    def _pose_stage(self, frames_q: queue.Queue, events_q: queue.Queue) -> None:
        while True:
            item = frames_q.get()
            if item is None:
                break
            frame_id, timestamp, image = item
            if self.engine.state == "lost":
                if self.config.batch or self._abort.is_set():
                    self.report.frames_processed += 1
                    self.report.frames_lost += 1
                    continue
                if self._restart_requested.wait(timeout=0.1):
                    self._restart_requested.clear()
                    self.engine.reset()
                    logger.info("pose engine reset; acquisition restarted")
                else:
                    self.report.frames_processed += 1
                    self.report.frames_lost += 1
                    continue
            t0 = time.perf_counter()
            try:
                event = self.engine.process_frame(frame_id, timestamp, image)
            except SeamosaicError as exc:
                self.report.frames_processed += 1
                self.report.frames_lost += 1
                self.report.alerts.append(str(exc))
                self.broker.publish("alert", {"reason": str(exc)})
                if self.config.batch:
                    self._abort.set()
                continue
            self._timers["pose"].add(time.perf_counter() - t0)
            self.report.frames_processed += 1
            # Bootstrap outcomes retroactively settle earlier pending frames.
            for promoted in event.promoted_frames:
                self.report.frames_pending -= 1
                self.report.frames_tracked += 1
                self.broker.publish(
                    "pose",
                    {
                        "frame_id": promoted.id,
                        "rotation": promoted.pose.rotation.tolist(),
                        "center": promoted.pose.center.tolist(),
                        "status": promoted.status,
                    },
                    timestamp=promoted.timestamp,
                )
            for _ in event.demoted_frame_ids:
                self.report.frames_pending -= 1
                self.report.frames_lost += 1
            frame = event.frame
            if frame.status == "tracked":
                self.report.frames_tracked += 1
                self.broker.publish(
                    "pose",
                    {
                        "frame_id": frame.id,
                        "rotation": frame.pose.rotation.tolist(),
                        "center": frame.pose.center.tolist(),
                        "status": frame.status,
                    },
                    timestamp=frame.timestamp,
                )
            elif frame.status == "lost":
                self.report.frames_lost += 1
            else:
                self.report.frames_pending += 1
            if event.alert:
                self.report.alerts.append(event.alert)
                self.broker.publish("alert", {"reason": event.alert})
                if self.config.batch:
                    self._abort.set()
            if event.keyframe is not None:
                self._keyframe_counter += 1
                if (self._keyframe_counter - 1) % self.config.mosaic_stride == 0:
                    events_q.put(event)
        events_q.put(None)

    # -------------------------------------------------------- stage: mapping

    def _mapping_stage(self, events_q: queue.Queue) -> None:
        while True:
            event = events_q.get()
            if event is None:
                break
            t0 = time.perf_counter()
            try:
                self._map_keyframe(event)
            except SeamosaicError as exc:
                logger.warning(
                    "mapping keyframe %d failed: %s", event.keyframe.id, exc
                )
            self._timers["mapping"].add(time.perf_counter() - t0)

    def _fit_plane(
        self, event: FrameEvent
    ) -> tuple[Plane, PlaneFitReport, float] | None:
        points = event.map_positions
        if points is None or len(points) < 3:
            return None
        centers = np.array([p.center for p in event.window_poses])
        scale_guess = float(
            np.median(np.linalg.norm(centers - points.mean(axis=0), axis=1))
        )
        if self.config.plane_source == "ahrs" and self._ahrs_rows:
            # Gravity in the map frame: level-world down through the
            # keyframe's attitude into the camera, then out via its pose.
            row = self._ahrs_rows[min(event.keyframe.id, len(self._ahrs_rows) - 1)]
            attitude = attitude_to_rotation(row[1], row[2], row[3])
            g_camera = attitude.T @ np.array([0.0, 0.0, -1.0])
            gravity_world = event.keyframe_pose.rotation @ g_camera
            plane = horizontal_plane_from_ahrs(points, gravity_world)
            distances = np.abs(plane.signed_distance(points))
            threshold = self.config.ransac_rel_threshold * scale_guess
            inliers = distances <= threshold
            report = PlaneFitReport(
                inlier_count=int(np.count_nonzero(inliers)),
                total_count=len(points),
                rms_residual=float(
                    np.sqrt(np.mean(distances[inliers] ** 2)) if inliers.any() else 0.0
                ),
                normal=plane.normal.copy(),
            )
        else:
            try:
                plane, report = ransac_plane_fit(
                    points,
                    threshold=self.config.ransac_rel_threshold * scale_guess,
                    seed=self.config.seed + event.keyframe.id,
                    viewpoints=centers,
                )
            except SeamosaicError as exc:
                logger.warning("plane fit failed: %s", exc)
                return None
        plane = plane.oriented_toward(centers)
        scene_scale = float(np.median(np.abs(plane.signed_distance(centers))))
        return plane, report, scene_scale

    def _map_keyframe(self, event: FrameEvent) -> None:
        self.report.keyframes += 1
        keyframe = event.keyframe
        pose = event.keyframe_pose
        image = event.keyframe_image

        if event.map_positions is not None and len(event.map_positions):
            self.broker.publish(
                "sparse_points",
                {
                    "count": int(len(event.map_positions)),
                    "points": _pack(event.map_positions, event.map_colors),
                },
                timestamp=keyframe.timestamp,
            )

        fit = self._fit_plane(event)
        if fit is None:
            self.report.skipped_projection += 1
            return
        plane, fit_report, scene_scale = fit
        planarity = planarity_check(
            fit_report,
            scene_scale,
            PlanarityConfig(
                rel_residual_max=self.config.rel_residual_max,
                min_inlier_fraction=self.config.min_inlier_fraction,
            ),
        )
        if planarity != "accept":
            self.report.skipped_projection += 1
            if self.active_segment is not None:
                self._finalize_segment(self.active_segment)
                self.active_segment = None
            return

        reinit_config = ReinitConfig(
            max_normal_change_deg=self.config.max_normal_change_deg,
            rel_residual_max=self.config.rel_residual_max,
            max_offset_change=self.config.max_offset_change,
        )
        if self.active_segment is not None:
            decision = segment_reinit_check(
                self.active_segment.plane,
                (plane, fit_report),
                scene_scale,
                reinit_config,
                anchor_point=self.active_segment.plane_frame.origin,
            )
            if decision == "reinitialize":
                self._finalize_segment(self.active_segment)
                self.active_segment = None

        if self.active_segment is None:
            self.active_segment = self._start_segment(event, plane)

        segment = self.active_segment
        try:
            homography = plane_to_image_homography(
                pose, self.camera, segment.plane_frame
            )
            tile = rectify_image(
                image, homography, self.camera, segment.gsd,
                max_tile_dim=self.config.max_canvas_dim,
            )
        except (EmptyFootprint, SeamosaicError) as exc:
            logger.warning("rectification skipped for frame %d: %s", keyframe.id, exc)
            tile = None
        if tile is not None:
            if segment.exceeds_cap(tile):
                self._finalize_segment(segment)
                segment = self._start_segment(event, plane)
                self.active_segment = segment
            segment.composite(tile, frame_id=keyframe.id)
            tile_stem = self.run_dir / "tiles" / f"frame_{keyframe.id:06d}"
            write_png(
                tile_stem.with_suffix(".png"),
                np.dstack([tile.colors, tile.mask.astype(np.uint8) * 255]),
            )
            write_world_file(tile_stem.with_suffix(".pgw"), tile.world_file)
            self._segment_tiles += 1
            refresh = self._segment_tiles % self.config.canvas_refresh_every == 0
            if refresh:
                self._write_canvas_preview(segment)
            self.broker.publish(
                "mosaic_event",
                {
                    "event": "segment_updated",
                    "segment_id": segment.id,
                    "frame_id": keyframe.id,
                    "gsd": segment.gsd,
                    "tiles": len(segment.contributing_frame_ids),
                    "canvas_url": f"/products/segments/segment_{segment.id:03d}_preview.png",
                },
                timestamp=keyframe.timestamp,
            )

        # 3DSIP uses the freshest accepted plane (the local surface), while
        # the 2D canvas stays on its segment's plane so tiles share a frame.
        try:
            chunk = project_image_plane(
                image,
                pose,
                self.camera,
                plane,
                GridSpec(cols=self.config.grid_cols, rows=self.config.grid_rows),
                frame_id=keyframe.id,
                segment_id=segment.id if segment is not None else -1,
            )
        except EmptyChunk:
            return
        self.cloud.accumulate(chunk)
        self.report.chunks_emitted += 1
        self.broker.publish_chunk(
            chunk.frame_id,
            chunk.segment_id,
            chunk.points,
            chunk.colors,
            timestamp=keyframe.timestamp,
        )

    def _start_segment(self, event: FrameEvent, plane: Plane) -> MosaicSegment:
        centers = np.array([p.center for p in event.window_poses])
        travel = centers[-1] - centers[0]
        hint = travel if np.linalg.norm(travel) > 1e-9 else np.array([1.0, 0.0, 0.0])
        frame = build_plane_frame(plane, event.map_positions, hint)
        gsd = self.config.gsd or estimate_gsd(event.window_poses, self.camera, plane)
        segment = MosaicSegment(
            id=self.report.segments_created,
            plane=plane,
            plane_frame=frame,
            gsd=gsd,
            blend=self.config.blend,
            max_canvas_dim=self.config.max_canvas_dim,
        )
        self.report.segments_created += 1
        self._segment_tiles = 0
        self.segments.append(segment)
        self.broker.publish(
            "mosaic_event",
            {
                "event": "segment_started",
                "segment_id": segment.id,
                "gsd": gsd,
                "plane_normal": plane.normal.tolist(),
                "plane_offset": plane.offset,
            },
        )
        return segment

    def _write_canvas_preview(self, segment: MosaicSegment) -> None:
        rgb, mask = segment.render()
        if rgb.size == 0:
            return
        scale = max(rgb.shape[0], rgb.shape[1]) / CANVAS_PREVIEW_DIM
        if scale > 1:
            step = int(np.ceil(scale))
            rgb = rgb[::step, ::step]
            mask = mask[::step, ::step]
        write_png(
            self.run_dir / "segments" / f"segment_{segment.id:03d}_preview.png",
            np.dstack([rgb, mask.astype(np.uint8) * 255]),
        )

    def _finalize_segment(self, segment: MosaicSegment) -> None:
        if segment.empty:
            return
        rgb, mask = segment.render()
        stem = self.run_dir / "segments" / f"segment_{segment.id:03d}"
        write_png(stem.with_suffix(".png"), np.dstack([rgb, mask.astype(np.uint8) * 255]))
        write_world_file(stem.with_suffix(".pgw"), segment.world_file)
        self._write_canvas_preview(segment)

    def _finalize_products(self) -> None:
        self.broker.flush_all()
        if self.active_segment is not None:
            self._finalize_segment(self.active_segment)
            self.active_segment = None
        points, colors = self.cloud.merged()
        if len(points):
            export_ply(points, colors, self.run_dir / "cloud.ply")
        manifest = []
        for segment in self.segments:
            manifest.extend(segment.manifest_lines())
            manifest.append("")
        (self.run_dir / "manifest.txt").write_text("\n".join(manifest))


def _pack(points: np.ndarray, colors: np.ndarray | None) -> str:
    from .stream import pack_points

    if colors is None:
        colors = np.full((len(points), 3), 128, dtype=np.uint8)
    return pack_points(points, colors)


def run(config: RunConfig, broker: StreamBroker | None = None) -> RunReport:
    """Execute one pipeline run; see :class:`RunConfig`."""
    pipeline = Pipeline(config, broker=broker)
    return pipeline.run()

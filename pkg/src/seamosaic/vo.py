"""Pose engine: visual odometry with windowed bundle adjustment, or replay.

Produces per-frame poses and the sparse tie-point map. In VO mode the
engine bootstraps from the first ``window_size`` frames (first pose at the
identity, scale pinned by declaring the first baseline 1.0), then registers
each new frame by robust resection against the map and refines the last
``window_size`` poses with a bundle adjustment in which everything older is
frozen. In replay mode poses come from a trajectory file and tie points are
triangulated from feature matches under those poses, so the plane-fitting
block still receives a sparse cloud.

A tracking failure marks the engine lost; it never resumes silently and
must be reset explicitly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ba import BundleProblem
from .camera import (
    CameraModel,
    PixelCoord,
    Pose,
    pixels_to_normalized,
    sample_bilinear,
    undistort_normalized,
)
from .errors import (
    DivergedAdjustment,
    InitializationFailed,
    MissingPose,
    TooFewMatches,
    TrackingLost,
)
from .features import FeatureConfig, FeatureMatch, detect_features, match_features
from .fileio import parse_trajectory
from .twoview import (
    parallax_angles_deg,
    relative_pose_ransac,
    reprojection_errors,
    resect_ransac,
    triangulate_points,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VOConfig:
    window_size: int = 5
    features: FeatureConfig = field(default_factory=FeatureConfig)
    essential_threshold_px: float = 1.0
    essential_confidence: float = 0.999
    resection_threshold_px: float = 2.0
    min_resection_inliers: int = 15
    min_init_inliers: int = 30
    min_parallax_deg: float = 1.0
    ba_outlier_px: float = 2.0
    seed: int = 0


@dataclass
class Frame:
    id: int
    timestamp: float
    image: np.ndarray | None
    pose: Pose | None = None
    status: str = "pending"  # pending -> tracked | lost
    corners: np.ndarray | None = None  # raw pixels (N, 2)
    corners_norm: np.ndarray | None = None  # undistorted normalized (N, 2)
    descriptors: np.ndarray | None = None


@dataclass
class TiePoint:
    id: int
    position: np.ndarray
    observations: list[tuple[int, PixelCoord]]
    color: np.ndarray
    observations_norm: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class SlidingWindow:
    size: int
    member_ids: list[int] = field(default_factory=list)
    fixed_ids: list[int] = field(default_factory=list)

    @property
    def full(self) -> bool:
        return len(self.member_ids) == self.size


def select_keyframe(window: SlidingWindow) -> int:
    """Frame id of the central member of a full window."""
    if not window.full:
        raise ValueError("window is not full")
    return window.member_ids[len(window.member_ids) // 2]


class ReplayPoseProvider:
    """Per-frame poses from a precomputed trajectory file."""

    def __init__(self, poses: dict[int, tuple[float, Pose]]) -> None:
        self._poses = poses

    @classmethod
    def from_file(cls, path) -> "ReplayPoseProvider":
        from pathlib import Path

        return cls(parse_trajectory(Path(path).read_text()))

    def __len__(self) -> int:
        return len(self._poses)

    def pose_for(self, frame_id: int) -> Pose:
        if frame_id not in self._poses:
            raise MissingPose(f"no replay pose for frame {frame_id}")
        return self._poses[frame_id][1]


@dataclass
class FrameEvent:
    """What one processed frame produced.

    Keyframe events carry immutable snapshots (pose, image, window-local
    cloud) taken at emission time, so downstream stages running on other
    threads never read engine state that a later frame may refine.
    """

    frame: Frame
    keyframe: Frame | None = None
    keyframe_pose: Pose | None = None
    keyframe_image: np.ndarray | None = None
    map_positions: np.ndarray | None = None  # window-local tie points
    map_colors: np.ndarray | None = None
    window_poses: list[Pose] = field(default_factory=list)
    new_point_ids: list[int] = field(default_factory=list)
    adjusted: bool = False
    alert: str | None = None
    # Earlier frames whose status changed retroactively (bootstrap outcome).
    promoted_frames: list[Frame] = field(default_factory=list)
    demoted_frame_ids: list[int] = field(default_factory=list)


class PoseEngine:
    """Sequential state machine over the image stream."""

    def __init__(
        self,
        camera: CameraModel,
        config: VOConfig = VOConfig(),
        replay: ReplayPoseProvider | None = None,
    ) -> None:
        self.camera = camera
        self.config = config
        self.replay = replay
        self.state = "awaiting_init"  # awaiting_init -> tracking -> lost
        self.frames: dict[int, Frame] = {}
        self.map_points: dict[int, TiePoint] = {}
        self.window = SlidingWindow(size=config.window_size)
        self._init_buffer: list[Frame] = []
        self._init_matches: list[list[FeatureMatch]] = []
        self._obs_to_point: dict[tuple[int, int], int] = {}
        self._last_tracked: Frame | None = None
        self._next_point_id = 0
        self._emitted_keyframes: set[int] = set()
        self._last_id: int | None = None

    # ------------------------------------------------------------------ utils

    def _rng(self, frame_id: int) -> np.random.Generator:
        return np.random.default_rng((self.config.seed, frame_id))

    def _norm_threshold(self, px: float) -> float:
        return px / (0.5 * (self.camera.fx + self.camera.fy))

    def _undistort_corners(self, corners: np.ndarray) -> np.ndarray:
        xy = pixels_to_normalized(corners, self.camera)
        xy, _ = undistort_normalized(xy, self.camera.distortion)
        return xy

    def _sample_color(self, frame: Frame, pixel: PixelCoord) -> np.ndarray:
        color = None
        if frame.image is not None:
            color = sample_bilinear(frame.image, pixel)
        if color is None:
            return np.array([128, 128, 128], dtype=np.uint8)
        color = np.atleast_1d(color)
        if color.shape[0] == 1:
            color = np.repeat(color, 3)
        return np.clip(np.rint(color[:3]), 0, 255).astype(np.uint8)

    def reprojection_rms_px(self) -> float:
        """RMS reprojection error over every map observation (pixels)."""
        f = 0.5 * (self.camera.fx + self.camera.fy)
        sq_sum = 0.0
        count = 0
        for tp in self.map_points.values():
            for frame_id, xy in tp.observations_norm.items():
                frame = self.frames[frame_id]
                if frame.pose is None:
                    continue
                err = reprojection_errors(
                    frame.pose, tp.position[None, :], xy[None, :]
                )[0]
                if np.isfinite(err):
                    sq_sum += (err * f) ** 2
                    count += 1
        return float(np.sqrt(sq_sum / count)) if count else 0.0

    def sparse_cloud(self) -> tuple[np.ndarray, np.ndarray, list[int]]:
        """(positions (N, 3), colors (N, 3) uint8, tie-point ids)."""
        if not self.map_points:
            return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), []
        ids = sorted(self.map_points)
        pos = np.array([self.map_points[i].position for i in ids])
        col = np.array([self.map_points[i].color for i in ids])
        return pos, col, ids

    # ------------------------------------------------------------- lifecycle

    def reset(self) -> None:
        """Discard tracking state after a failure; completed products stay."""
        self.state = "awaiting_init"
        self.frames.clear()
        self.map_points.clear()
        self.window = SlidingWindow(size=self.config.window_size)
        self._init_buffer.clear()
        self._init_matches.clear()
        self._obs_to_point.clear()
        self._last_tracked = None
        self._emitted_keyframes.clear()

    def process_frame(
        self, frame_id: int, timestamp: float, image: np.ndarray
    ) -> FrameEvent:
        """Feed the next frame of the stream.

        Raises:
            TrackingLost: If called while the engine is lost (explicit
                restart required).
            MissingPose: In replay mode when the trajectory lacks the frame.
        """
        if self.state == "lost":
            raise TrackingLost("engine is lost; reset() before feeding frames")
        if self._last_id is not None and frame_id <= self._last_id:
            raise ValueError("frame ids must be strictly increasing")
        self._last_id = frame_id

        frame = Frame(id=frame_id, timestamp=timestamp, image=image)
        corners, descriptors = detect_features(image, self.config.features)
        frame.corners = corners
        frame.descriptors = descriptors
        frame.corners_norm = self._undistort_corners(corners) if len(corners) else np.zeros((0, 2))
        self.frames[frame_id] = frame

        if self.replay is not None:
            return self._process_replay(frame)
        if self.state == "awaiting_init":
            return self._process_bootstrap(frame)
        return self._process_tracking(frame)

    # ---------------------------------------------------------------- replay

    def _process_replay(self, frame: Frame) -> FrameEvent:
        frame.pose = self.replay.pose_for(frame.id)
        frame.status = "tracked"
        event = FrameEvent(frame=frame)
        previous = self._last_tracked
        if previous is not None:
            try:
                matches = match_features(
                    previous.corners,
                    previous.descriptors,
                    frame.corners,
                    frame.descriptors,
                    self.config.features,
                )
            except TooFewMatches:
                matches = []
            self._extend_map(previous, frame, matches, event)
        self._last_tracked = frame
        self._slide_window(frame, event)
        self._emit_keyframe(event)
        return event

    # ------------------------------------------------------------- bootstrap

    def _process_bootstrap(self, frame: Frame) -> FrameEvent:
        event = FrameEvent(frame=frame)
        if self._init_buffer:
            previous = self._init_buffer[-1]
            try:
                matches = match_features(
                    previous.corners,
                    previous.descriptors,
                    frame.corners,
                    frame.descriptors,
                    self.config.features,
                )
            except TooFewMatches:
                logger.warning(
                    "bootstrap: frame %d does not connect; restarting buffer",
                    frame.id,
                )
                for buffered in self._init_buffer:
                    buffered.status = "lost"
                    event.demoted_frame_ids.append(buffered.id)
                self._init_buffer = [frame]
                self._init_matches = []
                return event
            self._init_matches.append(matches)
        self._init_buffer.append(frame)
        if len(self._init_buffer) < self.config.window_size:
            return event

        try:
            self._initialize_block(event)
        except InitializationFailed as exc:
            logger.warning("initialization failed: %s", exc)
            for buffered in self._init_buffer:
                buffered.status = "lost"
                if buffered.id != frame.id:
                    event.demoted_frame_ids.append(buffered.id)
            self.state = "lost"
            event.alert = f"initialization_failed: {exc}"
            return event
        self.state = "tracking"
        self._last_tracked = self._init_buffer[-1]
        event.promoted_frames = [
            buffered for buffered in self._init_buffer if buffered.id != frame.id
        ]
        self._init_buffer = []
        self._init_matches = []
        self._emit_keyframe(event)
        return event

    def _initialize_block(self, event: FrameEvent) -> None:
        """Bootstrap poses and map from the first ``window_size`` frames."""
        cfg = self.config
        frames = self._init_buffer
        first, second = frames[0], frames[1]
        matches = self._init_matches[0]
        xy_a = first.corners_norm[[m.index_a for m in matches]]
        xy_b = second.corners_norm[[m.index_b for m in matches]]

        result = relative_pose_ransac(
            xy_a,
            xy_b,
            threshold=self._norm_threshold(cfg.essential_threshold_px),
            rng=self._rng(first.id),
            confidence=cfg.essential_confidence,
        )
        if result is None:
            raise InitializationFailed("relative orientation failed")
        rel_pose, inlier_mask = result
        if int(np.count_nonzero(inlier_mask)) < cfg.min_init_inliers:
            raise InitializationFailed(
                f"only {np.count_nonzero(inlier_mask)} epipolar inliers"
            )
        first.pose = Pose.identity()
        second.pose = rel_pose  # unit baseline by construction
        first.status = second.status = "tracked"

        created = self._triangulate_matches(
            first, second, [m for m, ok in zip(matches, inlier_mask) if ok], event
        )
        if created < cfg.min_init_inliers:
            raise InitializationFailed(
                f"degenerate motion: only {created} triangulated points"
            )

        for index in range(2, len(frames)):
            previous, frame = frames[index - 1], frames[index]
            matches = self._init_matches[index - 1]
            try:
                self._register(previous, frame, matches, event)
            except TrackingLost as exc:
                raise InitializationFailed(str(exc)) from exc

        self._full_block_adjust(frames)
        self._renormalize_baseline(frames)
        self._prune_outliers(set(self.map_points))
        self.window.member_ids = [f.id for f in frames]
        for frame in frames:
            if frame.status != "tracked":
                raise InitializationFailed(f"frame {frame.id} not tracked")

    def _renormalize_baseline(self, frames: list[Frame]) -> None:
        # Declare the first baseline length 1.0 (monocular gauge).
        origin = frames[0].pose.center
        baseline = float(np.linalg.norm(frames[1].pose.center - origin))
        if baseline < 1e-12:
            raise InitializationFailed("zero baseline after adjustment")
        scale = 1.0 / baseline
        for frame in frames:
            frame.pose = Pose(
                frame.pose.rotation, origin + scale * (frame.pose.center - origin)
            )
        for tp in self.map_points.values():
            tp.position = origin + scale * (tp.position - origin)

    def _full_block_adjust(self, frames: list[Frame]) -> None:
        free_mask = np.array([i > 0 for i in range(len(frames))])
        self._bundle_adjust([f.id for f in frames], free_mask)

    # ------------------------------------------------------------- tracking

    def _process_tracking(self, frame: Frame) -> FrameEvent:
        event = FrameEvent(frame=frame)
        previous = self._last_tracked
        try:
            matches = match_features(
                previous.corners,
                previous.descriptors,
                frame.corners,
                frame.descriptors,
                self.config.features,
            )
            self._register(previous, frame, matches, event)
            self._last_tracked = frame
            self._slide_window(frame, event)
            if self.window.full:
                adjusted_ids = self._bundle_adjust(
                    self.window.member_ids,
                    np.ones(len(self.window.member_ids), dtype=bool),
                )
                self._prune_outliers(adjusted_ids)
                event.adjusted = True
        except (TooFewMatches, TrackingLost, DivergedAdjustment) as exc:
            frame.pose = None  # invariant: pose present iff tracked
            frame.status = "lost"
            self.state = "lost"
            event.alert = f"tracking_lost: {exc}"
            logger.warning("tracking lost at frame %d: %s", frame.id, exc)
            return event
        self._emit_keyframe(event)
        return event

    def _register(
        self,
        previous: Frame,
        frame: Frame,
        matches: list[FeatureMatch],
        event: FrameEvent,
    ) -> None:
        """Resect the new frame against the map, then extend the map."""
        cfg = self.config
        point_ids = []
        frame_xy = []
        resection_matches = []
        new_matches = []
        for m in matches:
            tp_id = self._obs_to_point.get((previous.id, m.index_a))
            if tp_id is not None and tp_id in self.map_points:
                point_ids.append(tp_id)
                frame_xy.append(frame.corners_norm[m.index_b])
                resection_matches.append(m)
            else:
                new_matches.append(m)

        if len(point_ids) < 4:
            raise TrackingLost(
                f"only {len(point_ids)} map correspondences for resection"
            )
        positions = np.array([self.map_points[i].position for i in point_ids])
        xy = np.array(frame_xy)
        result = resect_ransac(
            positions,
            xy,
            threshold=self._norm_threshold(cfg.resection_threshold_px),
            rng=self._rng(frame.id),
        )
        if result is None:
            raise TrackingLost("resection found no valid pose")
        support = int(np.count_nonzero(result.inlier_mask))
        if support < cfg.min_resection_inliers:
            raise TrackingLost(
                f"resection support {support} below {cfg.min_resection_inliers}"
            )
        frame.pose = result.pose
        frame.status = "tracked"

        # Extend existing tracks with the resection inliers.
        outlier_norm = self._norm_threshold(cfg.ba_outlier_px)
        for ok, m, tp_id in zip(result.inlier_mask, resection_matches, point_ids):
            if not ok:
                continue
            tp = self.map_points[tp_id]
            err = reprojection_errors(
                frame.pose,
                tp.position[None, :],
                frame.corners_norm[m.index_b][None, :],
            )[0]
            if err < outlier_norm:
                tp.observations.append((frame.id, m.pixel_b))
                tp.observations_norm[frame.id] = frame.corners_norm[m.index_b]
                self._obs_to_point[(frame.id, m.index_b)] = tp_id

        self._triangulate_matches(previous, frame, new_matches, event)

    def _extend_map(
        self,
        previous: Frame,
        frame: Frame,
        matches: list[FeatureMatch],
        event: FrameEvent,
    ) -> None:
        """Replay-mode map growth: extend known tracks, triangulate the rest."""
        outlier_norm = self._norm_threshold(self.config.ba_outlier_px)
        new_matches = []
        for m in matches:
            tp_id = self._obs_to_point.get((previous.id, m.index_a))
            if tp_id is not None and tp_id in self.map_points:
                tp = self.map_points[tp_id]
                err = reprojection_errors(
                    frame.pose,
                    tp.position[None, :],
                    frame.corners_norm[m.index_b][None, :],
                )[0]
                if err < outlier_norm:
                    tp.observations.append((frame.id, m.pixel_b))
                    tp.observations_norm[frame.id] = frame.corners_norm[m.index_b]
                    self._obs_to_point[(frame.id, m.index_b)] = tp_id
            else:
                new_matches.append(m)
        self._triangulate_matches(previous, frame, new_matches, event)

    def _triangulate_matches(
        self,
        frame_a: Frame,
        frame_b: Frame,
        matches: list[FeatureMatch],
        event: FrameEvent,
    ) -> int:
        """Create tie points from two-view matches that pass the gates."""
        if not matches:
            return 0
        cfg = self.config
        xy_a = frame_a.corners_norm[[m.index_a for m in matches]]
        xy_b = frame_b.corners_norm[[m.index_b for m in matches]]
        points = triangulate_points(frame_a.pose, frame_b.pose, xy_a, xy_b)
        finite = np.isfinite(points).all(axis=1)
        err_a = reprojection_errors(frame_a.pose, points, xy_a)
        err_b = reprojection_errors(frame_b.pose, points, xy_b)
        outlier_norm = self._norm_threshold(cfg.ba_outlier_px)
        parallax = parallax_angles_deg(
            frame_a.pose.center, frame_b.pose.center, points
        )
        keep = (
            finite
            & (err_a < outlier_norm)
            & (err_b < outlier_norm)
            & (parallax >= cfg.min_parallax_deg)
        )
        created = 0
        for k in np.flatnonzero(keep):
            m = matches[k]
            tp_id = self._next_point_id
            self._next_point_id += 1
            tp = TiePoint(
                id=tp_id,
                position=points[k].copy(),
                observations=[(frame_a.id, m.pixel_a), (frame_b.id, m.pixel_b)],
                color=self._sample_color(frame_a, m.pixel_a),
            )
            tp.observations_norm[frame_a.id] = xy_a[k]
            tp.observations_norm[frame_b.id] = xy_b[k]
            self.map_points[tp_id] = tp
            self._obs_to_point[(frame_a.id, m.index_a)] = tp_id
            self._obs_to_point[(frame_b.id, m.index_b)] = tp_id
            event.new_point_ids.append(tp_id)
            created += 1
        return created

    # ------------------------------------------------------------ adjustment

    def _bundle_adjust(
        self, member_ids: list[int], free_mask: np.ndarray
    ) -> set[int]:
        """Adjust member poses and the points they observe; old blocks frozen.

        Returns the ids of adjusted (free) points.
        """
        member_set = set(member_ids)
        free_point_ids = [
            tp.id
            for tp in self.map_points.values()
            if any(fid in member_set for fid in tp.observations_norm)
        ]
        if not free_point_ids:
            return set()
        point_index = {tp_id: k for k, tp_id in enumerate(free_point_ids)}

        pose_ids = list(member_ids)
        pose_index = {fid: k for k, fid in enumerate(pose_ids)}
        obs_pose, obs_point, obs_uv = [], [], []
        cam = self.camera
        for tp_id in free_point_ids:
            tp = self.map_points[tp_id]
            for fid, xy in tp.observations_norm.items():
                frame = self.frames.get(fid)
                if frame is None or frame.pose is None:
                    continue
                if fid not in pose_index:
                    pose_index[fid] = len(pose_ids)
                    pose_ids.append(fid)
                obs_pose.append(pose_index[fid])
                obs_point.append(point_index[tp_id])
                # Undistorted pixel observation for the pinhole model.
                obs_uv.append(
                    [cam.cx + cam.fx * xy[0], cam.cy + cam.fy * xy[1]]
                )

        poses = [self.frames[fid].pose for fid in pose_ids]
        free_pose_mask = np.zeros(len(pose_ids), dtype=bool)
        for k, fid in enumerate(member_ids):
            free_pose_mask[pose_index[fid]] = bool(free_mask[k])

        points = np.array(
            [self.map_points[tp_id].position for tp_id in free_point_ids]
        )
        problem = BundleProblem(
            camera=cam,
            poses=poses,
            points=points,
            obs_pose=np.array(obs_pose),
            obs_point=np.array(obs_point),
            obs_uv=np.array(obs_uv),
            free_pose_mask=free_pose_mask,
            free_point_mask=np.ones(len(free_point_ids), dtype=bool),
        )
        result = problem.solve()
        for fid, pose in zip(pose_ids, result.poses):
            if free_pose_mask[pose_index[fid]]:
                self.frames[fid].pose = pose
        for tp_id, position in zip(free_point_ids, result.points):
            self.map_points[tp_id].position = position
        return set(free_point_ids)

    def _prune_outliers(self, point_ids: set[int]) -> None:
        """Enforce the tie-point invariant: every observation under the cutoff,
        at least two observations."""
        outlier_norm = self._norm_threshold(self.config.ba_outlier_px)
        for tp_id in list(point_ids):
            tp = self.map_points.get(tp_id)
            if tp is None:
                continue
            kept_obs = []
            for fid, pixel in tp.observations:
                frame = self.frames.get(fid)
                if frame is None or frame.pose is None:
                    continue
                err = reprojection_errors(
                    frame.pose,
                    tp.position[None, :],
                    tp.observations_norm[fid][None, :],
                )[0]
                if err < outlier_norm:
                    kept_obs.append((fid, pixel))
                else:
                    tp.observations_norm.pop(fid, None)
            tp.observations = kept_obs
            if len(kept_obs) < 2:
                self.map_points.pop(tp_id)

    # -------------------------------------------------------------- windowing

    def _slide_window(self, frame: Frame, event: FrameEvent) -> None:
        self.window.member_ids.append(frame.id)
        while len(self.window.member_ids) > self.window.size:
            dropped = self.window.member_ids.pop(0)
            self.window.fixed_ids.append(dropped)
            self._release_image(dropped)

    def _release_image(self, frame_id: int) -> None:
        frame = self.frames.get(frame_id)
        if frame is not None:
            frame.image = None
            frame.descriptors = None

    def _window_local_cloud(self) -> tuple[np.ndarray, np.ndarray]:
        """Tie points observed by the current window members (copied)."""
        member_set = set(self.window.member_ids)
        positions, colors = [], []
        for tp in self.map_points.values():
            if any(fid in member_set for fid in tp.observations_norm):
                positions.append(tp.position.copy())
                colors.append(tp.color)
        if not positions:
            return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
        return np.array(positions), np.array(colors, dtype=np.uint8)

    def _emit_keyframe(self, event: FrameEvent) -> None:
        if not self.window.full:
            return
        mid = select_keyframe(self.window)
        if mid in self._emitted_keyframes:
            return
        self._emitted_keyframes.add(mid)
        keyframe = self.frames[mid]
        event.keyframe = keyframe
        event.keyframe_pose = keyframe.pose
        event.keyframe_image = keyframe.image
        event.map_positions, event.map_colors = self._window_local_cloud()
        event.window_poses = [
            self.frames[fid].pose
            for fid in self.window.member_ids
            if self.frames[fid].pose is not None
        ]

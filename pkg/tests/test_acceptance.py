"""Acceptance suite: one test per criterion, each printing a PASS line and
enforcing its runtime budget.

The COMEX-like corpus (968 x 728, 0.5 fps, single strip over a 1.2 x 30 m
flat floor, 121 frames) is rendered once per session; its synthesis time
does not count against any criterion's budget (it is the oracle, not the
system under test).
"""

import shutil
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import write_run_config
from seamosaic.camera import (
    CameraModel,
    DistortionCoefficients,
    Pose,
    project,
    unproject,
)
from seamosaic.cloud import GridSpec, project_image_plane, read_ply
from seamosaic.mosaic import (
    axis_aligned_world_file,
    build_plane_frame,
    plane_to_image_homography,
    rectify_image,
)
from seamosaic.pipeline import RunConfig, run
from seamosaic.planes import Plane, ransac_plane_fit
from seamosaic.stream import StreamBroker, StreamMessage, decode_message, encode_message
from seamosaic.synthetic import comex_like_specs, compare_to_reference, render_sequence

from test_ba import synthetic_problem

GOLDEN_DIR = Path(__file__).parent / "golden"


@contextmanager
def criterion(name: str, budget_seconds: float):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    print(f"ACCEPTANCE PASS: {name} ({elapsed:.1f}s, budget {budget_seconds:.0f}s)")
    assert elapsed < budget_seconds, f"{name} exceeded budget: {elapsed:.1f}s"


@pytest.fixture(scope="session")
def comex_dataset(tmp_path_factory):
    scene, traj, camera = comex_like_specs(n_frames=121)
    data = render_sequence(scene, traj, camera, seed=0)
    out = tmp_path_factory.mktemp("comex_dataset")
    data.write(out)
    return out, data


def find_marker_centroids(points, colors, cluster_radius):
    """Weighted centroids of strongly red point clusters."""
    redness = colors[:, 0].astype(float) - 0.5 * (
        colors[:, 1].astype(float) + colors[:, 2].astype(float)
    )
    keep = redness > 100.0
    reds = points[keep]
    weights = redness[keep]
    clusters = []
    assigned = np.zeros(len(reds), dtype=bool)
    order = np.argsort(reds[:, 0])
    for idx in order:
        if assigned[idx]:
            continue
        near = np.linalg.norm(reds - reds[idx], axis=1) < cluster_radius
        members = near & ~assigned
        assigned |= members
        if members.sum() >= 5:
            w = weights[members]
            clusters.append((reds[members] * w[:, None]).sum(axis=0) / w.sum())
    return np.array(clusters)


def associate(estimated, truth, max_distance):
    pairs = []
    for est in estimated:
        d = np.linalg.norm(truth - est, axis=1)
        j = int(np.argmin(d))
        if d[j] < max_distance:
            pairs.append((est, truth[j]))
    est_arr = np.array([p[0] for p in pairs])
    true_arr = np.array([p[1] for p in pairs])
    return est_arr, true_arr


class TestGeometrySuite:
    def test_geometry(self):
        with criterion("geometry round-trips and homography", 5.0):
            rng = np.random.default_rng(0)
            ideal = CameraModel(fx=840.0, fy=840.0, cx=483.5, cy=363.5,
                                width=968, height=728)
            distorted = CameraModel(
                fx=840.0, fy=840.0, cx=483.5, cy=363.5, width=968, height=728,
                distortion=DistortionCoefficients(
                    k1=-0.12, k2=0.05, k3=-0.005, p1=1e-3, p2=-5e-4
                ),
            )
            down = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
            for camera, tol in ((ideal, 1e-9), (distorted, 1e-3)):
                pose = Pose(down, np.array([0.2, -0.1, 2.0]))
                for _ in range(200):
                    z_cam = rng.uniform(0.1, 100.0)
                    p_cam = np.array(
                        [rng.uniform(-0.4, 0.4) * z_cam,
                         rng.uniform(-0.3, 0.3) * z_cam, z_cam]
                    )
                    point = pose.rotation @ p_cam + pose.center
                    uv = project(point, pose, camera)
                    ray = unproject(uv, pose, camera)
                    t = (point - ray.origin) @ ray.direction
                    recovered = ray.origin + t * ray.direction
                    uv_back = project(recovered, pose, camera)
                    err = np.hypot(uv_back.u - uv.u, uv_back.v - uv.v)
                    assert err < tol

            # Homography vs direct projection on 50 random on-plane points.
            plane = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
            frame = build_plane_frame(
                plane, np.zeros((1, 3)), np.array([1.0, 0.0, 0.0])
            )
            pose = Pose(down, np.array([0.3, 0.1, 2.0]))
            h = plane_to_image_homography(pose, ideal, frame)
            ab = rng.uniform(-1.0, 1.0, size=(50, 2))
            uv, valid = h.apply(ab)
            assert valid.all()
            world = frame.to_world(ab)
            for k in range(50):
                expected = project(world[k], pose, ideal, apply_distortion=False)
                assert np.hypot(uv[k, 0] - expected.u, uv[k, 1] - expected.v) < 1e-9


class TestBACorrectness:
    def test_bundle_adjustment(self):
        with criterion("bundle adjustment correctness", 30.0):
            # Analytic Jacobian vs central differences on 20 configurations.
            step = 1e-6
            for seed in range(20):
                rng = np.random.default_rng(seed)
                problem, _, _ = synthetic_problem(
                    rng, n_poses=3, n_points=12,
                    perturb_rot=0.02, perturb_center=0.05, perturb_points=0.02,
                )
                jac = problem.jacobian()
                x0 = problem.pack()
                fd = np.empty_like(jac)
                for col in range(len(x0)):
                    plus, minus = x0.copy(), x0.copy()
                    plus[col] += step
                    minus[col] -= step
                    fd[:, col] = (
                        problem.residuals(plus) - problem.residuals(minus)
                    ) / (2 * step)
                scale = np.maximum(np.abs(fd), np.abs(jac)).max()
                assert np.abs(jac - fd).max() / scale < 1e-4

            # Perturb-and-recover on exact observations.
            rng = np.random.default_rng(100)
            problem, _, _ = synthetic_problem(
                rng, perturb_rot=np.radians(1.0), perturb_center=0.003,
                perturb_points=0.01,
            )
            initial_rms = np.sqrt(problem.cost() / problem.n_observations)
            result = problem.solve()
            final_rms = result.rms_px(problem.n_observations)
            assert final_rms <= initial_rms
            assert final_rms <= 0.1

            # Frozen poses bit-identical.
            rng = np.random.default_rng(200)
            free = np.array([False, False, True, True])
            problem, _, _ = synthetic_problem(
                rng, n_poses=4, free_pose_mask=free,
                perturb_rot=0.01, perturb_center=0.01, perturb_points=0.005,
            )
            fixed_before = [
                (problem.poses[i].rotation.copy(), problem.poses[i].center.copy())
                for i in range(2)
            ]
            result = problem.solve()
            assert result.accepted_steps > 0
            for i in range(2):
                assert np.array_equal(result.poses[i].rotation, fixed_before[i][0])
                assert np.array_equal(result.poses[i].center, fixed_before[i][1])


class TestRansacPlaneRecovery:
    def test_plane_recovery(self):
        with criterion("RANSAC plane recovery over 50 seeds", 10.0):
            successes = 0
            for seed in range(50):
                rng = np.random.default_rng(seed)
                inliers = np.column_stack(
                    [rng.uniform(-5, 5, 700), rng.uniform(-5, 5, 700),
                     2.0 + rng.normal(0.0, 0.01, 700)]
                )
                outliers = np.column_stack(
                    [rng.uniform(-5, 5, 300), rng.uniform(-5, 5, 300),
                     rng.uniform(1.5, 2.5, 300)]
                )
                points = np.vstack([inliers, outliers])
                try:
                    plane, report = ransac_plane_fit(
                        points, threshold=0.03, seed=seed,
                        viewpoints=np.array([[0.0, 0.0, 6.0]]),
                    )
                except Exception:
                    continue
                angle = np.degrees(
                    np.arccos(np.clip(plane.normal @ [0, 0, 1], -1, 1))
                )
                if angle < 0.5 and abs(plane.offset - 2.0) < 0.01:
                    successes += 1
            assert successes >= 49


class TestEndToEndFlat:
    def test_replay_and_vo(self, comex_dataset, tmp_path):
        dataset_dir, data = comex_dataset
        altitude = data.trajectory.altitude
        with criterion("end-to-end flat synthetic (replay + VO)", 300.0):
            # --- Replayed exact poses over the full 121-frame strip ---
            config_path = write_run_config(
                tmp_path, dataset_dir, run_name="replay", fps="0.5"
            )
            config = RunConfig.from_file(config_path)
            report = run(config)
            assert report.frames_processed == 121
            assert report.frames_tracked == 121
            assert report.segments_created >= 1
            assert report.achieved_cloud_hz >= 0.5

            run_dir = tmp_path / "runs" / "replay"
            points, colors = read_ply(run_dir / "cloud.ply")

            # Planarity: the cloud is exactly planar (construction guarantee
            # at 1e-6 x altitude against each chunk's plane); with exact
            # poses the fitted plane tracks the true floor to feature noise.
            fitted_plane, _ = ransac_plane_fit(
                points[:: max(len(points) // 5000, 1)], threshold=0.01, seed=0,
                viewpoints=np.array([[0.0, 0.0, altitude]]),
            )
            residual = np.abs(
                points @ fitted_plane.normal - fitted_plane.offset
            )
            assert residual.max() < 1e-6 * altitude + 0.005 * altitude
            assert np.abs(points[:, 2]).max() < 0.01 * altitude

            # Marker accuracy via the similarity-transform residual.
            centroids = find_marker_centroids(points, colors, cluster_radius=0.2)
            est, truth = associate(centroids, data.marker_points, max_distance=0.2)
            assert len(est) >= 10
            replay_report = compare_to_reference(est, truth)
            assert replay_report.rms < 0.005 * altitude

            # --- Built-in VO over a 50-frame strip of the same corpus ---
            vo_dir = tmp_path / "vo_subset"
            (vo_dir / "images").mkdir(parents=True)
            frames = sorted((dataset_dir / "images").glob("*.png"))[:50]
            for path in frames:
                shutil.copy(path, vo_dir / "images" / path.name)
            shutil.copy(dataset_dir / "camera.txt", vo_dir / "camera.txt")
            config_path = write_run_config(
                tmp_path, vo_dir, run_name="vo", input_mode="image_directory",
                fps="0.5",
            )
            vo_config = RunConfig.from_file(config_path)
            vo_config.trajectory_path = None
            vo_config.ahrs_path = None
            broker = StreamBroker()
            vo_report = run(vo_config, broker=broker)
            assert vo_report.frames_tracked == 50

            vo_points, vo_colors = read_ply(
                tmp_path / "runs" / "vo" / "cloud.ply"
            )
            # Coarse metric alignment from streamed poses, then the marker
            # similarity residual.
            client = broker.add_client()
            broker.handle_command(client, {"command": "snapshot_request"})
            est_centers = {}
            for frame in broker.drain(client, limit=100000):
                if isinstance(frame, StreamMessage) and frame.kind == "pose":
                    est_centers[frame.payload["frame_id"]] = frame.payload
            # Poses are decimated; rebuild the trajectory from the engine's
            # products instead: cloud positions provide scale via markers.
            scale0 = gauge_scale_from_cloud(vo_points, vo_colors, data, altitude)
            coarse = scale0
            centroids_vo = find_marker_centroids(
                vo_points, vo_colors, cluster_radius=0.2 / coarse
            )
            assert len(centroids_vo) >= 6
            # First similarity: rough association through a marker-based fit.
            est, truth = robust_marker_alignment(
                centroids_vo, data.marker_points
            )
            vo_sim = compare_to_reference(est, truth)
            assert vo_sim.rms < 0.02 * altitude


def gauge_scale_from_cloud(points, colors, data, altitude):
    """Rough VO-unit-to-meter scale from the cloud's plan-view extent."""
    span = points[:, 0].max() - points[:, 0].min()
    true_span = 12.0  # ~50 frames x 0.2 m step + footprint
    return true_span / max(span, 1e-9)


def robust_marker_alignment(estimated, truth):
    """Associate estimated marker centroids with ground truth by matching
    sorted along-track order (single-strip layout), then refine."""
    est_sorted = estimated[np.argsort(estimated[:, 0])]
    # Only markers inside the estimated coverage are detected; the true
    # markers covered are the first len(est) in along-track order within
    # the surveyed span.
    truth_sorted = truth[np.lexsort((truth[:, 1], truth[:, 0]))]
    # Pair along-track groups: markers come in lateral pairs per station.
    pairs_est = est_sorted.reshape(-1, 2, 3) if len(est_sorted) % 2 == 0 else None
    if pairs_est is None:
        est_sorted = est_sorted[: len(est_sorted) // 2 * 2]
        pairs_est = est_sorted.reshape(-1, 2, 3)
    n_stations = len(pairs_est)
    truth_pairs = truth_sorted[: 2 * n_stations].reshape(-1, 2, 3)
    # Within each station, order the pair by lateral coordinate sign
    # consistency: try both orders, keep the better fit.
    best = None
    for flip in (False, True):
        est_flat = []
        for station in pairs_est:
            ordered = station[np.argsort(station[:, 1])]
            if flip:
                ordered = ordered[::-1]
            est_flat.append(ordered)
        est_flat = np.vstack(est_flat)
        true_flat = np.vstack(
            [station[np.argsort(station[:, 1])] for station in truth_pairs]
        )
        try:
            report = compare_to_reference(est_flat, true_flat)
        except Exception:
            continue
        if best is None or report.rms < best[0].rms:
            best = (report, est_flat, true_flat)
    assert best is not None
    return best[1], best[2]


class TestSegmentation:
    def test_two_level_and_flat(self, tmp_path, step_dataset_dir, flat_dataset_dir):
        with criterion("segment re-initialization", 120.0):
            step_dir, _ = step_dataset_dir
            config_path = write_run_config(tmp_path, step_dir, run_name="step")
            report = run(RunConfig.from_file(config_path))
            assert report.segments_created == 2

            flat_dir, _ = flat_dataset_dir
            config_path = write_run_config(tmp_path, flat_dir, run_name="flat")
            report = run(RunConfig.from_file(config_path))
            assert report.segments_created == 1


class TestWorldFileFidelity:
    def test_marker_and_golden_format(self, flat_dataset_dir, tmp_path):
        with criterion("world-file fidelity", 60.0):
            # Byte-exact six-line format against the golden file.
            golden = (GOLDEN_DIR / "world_file.pgw").read_bytes()
            wf = axis_aligned_world_file(0.01, 12.505, -3.205)
            assert wf.to_text().encode("ascii") == golden

            # Marker located through tile + world file within 0.5 px.
            dataset_dir, data = flat_dataset_dir
            camera = data.camera
            frame = build_plane_frame(
                data.planes[0], np.zeros((1, 3)), np.array([1.0, 0.0, 0.0])
            )
            marker = data.marker_points[0]
            idx = int(np.argmin([abs(p.center[0] - marker[0]) for p in data.poses]))
            pose = data.poses[idx]
            h = plane_to_image_homography(pose, camera, frame)
            gsd = data.trajectory.altitude / camera.fx
            tile = rectify_image(data.images[idx], h, camera, gsd)
            rgb = tile.colors.astype(float)
            redness = rgb[:, :, 0] - 0.5 * (rgb[:, :, 1] + rgb[:, :, 2])
            redness[~tile.mask] = 0.0
            redness[redness < 60.0] = 0.0
            assert redness.sum() > 0
            rr, cc = np.meshgrid(
                np.arange(rgb.shape[0]), np.arange(rgb.shape[1]), indexing="ij"
            )
            row_c = (redness * rr).sum() / redness.sum()
            col_c = (redness * cc).sum() / redness.sum()
            located = tile.world_file.pixel_to_world(
                np.array(col_c), np.array(row_c)
            )
            expected_ab = frame.to_plane(marker[None, :])[0]
            err_px = np.linalg.norm((located - expected_ab) / gsd)
            assert err_px < 0.5


class TestThroughput:
    def test_projection_rate_and_budgets(self):
        with criterion("throughput and rate budgets", 60.0):
            camera = CameraModel(
                fx=840.0, fy=840.0, cx=483.5, cy=363.5, width=968, height=728
            )
            image = np.random.default_rng(0).integers(
                0, 255, size=(728, 968, 3), dtype=np.uint8
            )
            down = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
            pose = Pose(down, np.array([0.0, 0.0, 2.0]))
            plane = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
            # Warm-up, then measure.
            project_image_plane(image, pose, camera, plane, GridSpec())
            start = time.perf_counter()
            calls = 0
            while time.perf_counter() - start < 1.0:
                project_image_plane(image, pose, camera, plane, GridSpec())
                calls += 1
            rate = calls / (time.perf_counter() - start)
            # 0.5 Hz with at least 4x headroom.
            assert rate >= 2.0, f"projection rate {rate:.1f} Hz"

            # Delivery budgets over a simulated 10 s window.
            class FakeClock:
                now = 0.0

                def __call__(self):
                    return self.now

            clock = FakeClock()
            broker = StreamBroker(clock=clock)
            client = broker.add_client()
            delivered_poses = 0
            delivered_chunks = 0
            for k in range(1000):
                broker.publish("pose", {"frame_id": k})
                if k % 10 == 0:
                    broker.publish_chunk(
                        k, 0, np.zeros((2, 3)), np.zeros((2, 3), np.uint8)
                    )
                clock.now += 0.01
                broker.tick()
                for frame in broker.drain(client):
                    if isinstance(frame, StreamMessage):
                        if frame.kind == "pose":
                            delivered_poses += 1
                        elif frame.kind == "cloud_chunk":
                            delivered_chunks += 1
            assert delivered_poses <= 5 * 10 + 1
            assert delivered_chunks <= 0.5 * 10 + 1


class TestProtocol:
    def test_golden_late_join_and_slow_client(self):
        with criterion("protocol: goldens, late join, slow client", 30.0):
            # Golden transcripts round-trip byte-exactly, one per kind.
            kinds = set()
            for path in sorted((GOLDEN_DIR / "protocol").glob("*.json")):
                text = path.read_text().strip()
                message = decode_message(text)
                assert encode_message(message) == text
                kinds.add(message.kind)
            assert kinds == {
                "pose", "sparse_points", "cloud_chunk", "mosaic_event",
                "alert", "restart_ack",
            }

            class FakeClock:
                now = 0.0

                def __call__(self):
                    return self.now

            # Late-join snapshot equivalence.
            clock = FakeClock()
            broker = StreamBroker(clock=clock)
            early = broker.add_client()
            for k in range(6):
                broker.publish_chunk(
                    k, 0, np.full((3, 3), k, float), np.zeros((3, 3), np.uint8)
                )
                clock.now += 2.1
                broker.tick()
            late = broker.add_client()
            broker.handle_command(late, {"command": "snapshot_request"})
            for k in range(6, 9):
                broker.publish_chunk(
                    k, 0, np.full((3, 3), k, float), np.zeros((3, 3), np.uint8)
                )
                clock.now += 2.1
                broker.tick()
            broker.flush_all()

            def chunk_set(client):
                ids = []
                for frame in broker.drain(client, limit=100000):
                    if isinstance(frame, StreamMessage) and frame.kind == "cloud_chunk":
                        ids.append(frame.payload["frame_id"])
                return ids

            early_ids = chunk_set(early)
            late_ids = chunk_set(late)
            assert sorted(early_ids) == sorted(late_ids) == list(range(9))

            # Lossless exactly-once ordering under a slow client.
            clock2 = FakeClock()
            broker2 = StreamBroker(clock=clock2)
            slow = broker2.add_client()
            rng = np.random.default_rng(1)
            received = []
            for k in range(150):
                broker2.publish_chunk(
                    k, 0, np.zeros((1, 3)), np.zeros((1, 3), np.uint8)
                )
                clock2.now += 2.1
                broker2.tick()
                if rng.random() < 0.25:
                    received += [
                        f for f in broker2.drain(slow, limit=int(rng.integers(1, 6)))
                        if isinstance(f, StreamMessage) and f.kind == "cloud_chunk"
                    ]
            broker2.flush_all()
            while True:
                batch = [
                    f for f in broker2.drain(slow)
                    if isinstance(f, StreamMessage) and f.kind == "cloud_chunk"
                ]
                if not batch:
                    break
                received += batch
            assert [m.payload["frame_id"] for m in received] == list(range(150))

import numpy as np
import pytest

from seamosaic.camera import CameraModel
from seamosaic.synthetic import SceneSpec, TrajectorySpec, render_sequence


def small_camera() -> CameraModel:
    return CameraModel(fx=300.0, fy=300.0, cx=159.5, cy=119.5, width=320, height=240)


@pytest.fixture(scope="session")
def flat_dataset_dir(tmp_path_factory):
    """Small flat-terrain replay dataset with markers, written to disk."""
    scene = SceneSpec(
        terrain="flat",
        extent=(8.0, 1.2),
        texture_seed=31,
        markers=((2.5, 0.0), (4.0, 0.2), (5.5, -0.2)),
        marker_radius=0.06,
    )
    traj = TrajectorySpec(altitude=2.0, speed=0.29, frame_rate=1.0)
    data = render_sequence(scene, traj, small_camera(), seed=31)
    out = tmp_path_factory.mktemp("flat_dataset")
    data.write(out)
    return out, data


@pytest.fixture(scope="session")
def step_dataset_dir(tmp_path_factory):
    """Two-level terrain (step = 0.5 x altitude) replay dataset."""
    scene = SceneSpec(
        terrain="two_level",
        extent=(8.0, 1.2),
        texture_seed=33,
        step_height=1.0,
        step_position=4.0,
    )
    traj = TrajectorySpec(altitude=2.0, speed=0.29, frame_rate=1.0)
    data = render_sequence(scene, traj, small_camera(), seed=33)
    out = tmp_path_factory.mktemp("step_dataset")
    data.write(out)
    return out, data


def pose_markers(poses, offset=0.3):
    """Non-collinear points rigidly attached to each pose, for similarity fits.

    Camera centers of a single strip are collinear, which makes a similarity
    alignment degenerate; adding per-pose axis offsets restores full rank.
    The offset must be expressed in the poses' own length unit.
    """
    markers = []
    for p in poses:
        markers.append(p.center)
        markers.append(p.center + offset * p.rotation[:, 0])
        markers.append(p.center + offset * p.rotation[:, 1])
    return np.array(markers)


def gauge_scale(est_poses, true_poses):
    """Metric length of one estimated-frame unit, from center spacings."""
    est = np.array([p.center for p in est_poses])
    true = np.array([p.center for p in true_poses])
    d_est = np.linalg.norm(np.diff(est, axis=0), axis=1)
    d_true = np.linalg.norm(np.diff(true, axis=0), axis=1)
    ok = d_est > 1e-12
    return float(np.median(d_true[ok] / d_est[ok]))


def write_run_config(path, dataset_dir, **overrides):
    lines = {
        "camera_path": str(dataset_dir / "camera.txt"),
        "images_dir": str(dataset_dir / "images"),
        "input_mode": "replay_with_trajectory",
        "trajectory_path": str(dataset_dir / "trajectory.txt"),
        "ahrs_path": str(dataset_dir / "ahrs.txt"),
        "output_dir": str(path / "runs"),
        "fps": "1.0",
        "fast": "true",
        "batch": "true",
    }
    lines.update({k: str(v) for k, v in overrides.items()})
    config_path = path / "run.cfg"
    config_path.write_text(
        "\n".join(f"{key} = {value}" for key, value in lines.items()) + "\n"
    )
    return config_path

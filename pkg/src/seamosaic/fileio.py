"""Text and raster file formats used by the pipeline.

Trajectory files carry one pose per line::

    id timestamp r11 r12 r13 r21 r22 r23 r31 r32 r33 cx cy cz

with the rotation row-major camera-to-world and the center in meters.
AHRS files carry ``timestamp roll pitch yaw`` in degrees. Attitude angles
are defined such that ``R_c2w = Rz(yaw) @ Ry(pitch) @ Rx(roll) @ R_NADIR``
in a Z-up world, where R_NADIR points the optical axis straight down with
camera x along world x.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .camera import Pose
from .errors import InputError, IoFailure

# Camera-to-world rotation of a nadir camera: x right along world x,
# y down-image along world -y, optical axis along world -z.
R_NADIR = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


def rotation_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rz(yaw) @ Ry(pitch) @ Rx(roll), angles in radians."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def attitude_to_rotation(roll_deg: float, pitch_deg: float, yaw_deg: float) -> np.ndarray:
    """Camera-to-world rotation for AHRS angles in degrees."""
    return rotation_rpy(
        np.radians(roll_deg), np.radians(pitch_deg), np.radians(yaw_deg)
    ) @ R_NADIR


def rotation_to_attitude(rotation: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`attitude_to_rotation`; returns degrees."""
    m = np.asarray(rotation) @ R_NADIR.T
    pitch = np.arcsin(np.clip(-m[2, 0], -1.0, 1.0))
    if abs(m[2, 0]) < 1.0 - 1e-12:
        roll = np.arctan2(m[2, 1], m[2, 2])
        yaw = np.arctan2(m[1, 0], m[0, 0])
    else:  # gimbal lock: fold roll into yaw
        roll = 0.0
        yaw = np.arctan2(-m[0, 1], m[1, 1])
    return float(np.degrees(roll)), float(np.degrees(pitch)), float(np.degrees(yaw))


def format_trajectory(entries: list[tuple[int, float, Pose]]) -> str:
    # Full float64 precision so replayed poses round-trip bit-exactly.
    lines = []
    for frame_id, timestamp, pose in entries:
        fields = [str(frame_id), f"{timestamp:.6f}"]
        fields += [f"{v:.17g}" for v in pose.rotation.reshape(9)]
        fields += [f"{v:.17g}" for v in pose.center]
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_trajectory(text: str) -> dict[int, tuple[float, Pose]]:
    """Parse a trajectory file into {frame id: (timestamp, pose)}."""
    poses: dict[int, tuple[float, Pose]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 14:
            raise InputError(f"trajectory line {lineno}: expected 14 fields")
        frame_id = int(fields[0])
        timestamp = float(fields[1])
        rotation = np.array([float(v) for v in fields[2:11]]).reshape(3, 3)
        center = np.array([float(v) for v in fields[11:14]])
        poses[frame_id] = (timestamp, Pose(rotation, center))
    return poses


def format_ahrs(entries: list[tuple[float, float, float, float]]) -> str:
    return "".join(
        f"{t:.6f} {roll:.6f} {pitch:.6f} {yaw:.6f}\n" for t, roll, pitch, yaw in entries
    )


def parse_ahrs(text: str) -> list[tuple[float, float, float, float]]:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise InputError(f"AHRS line {lineno}: expected 4 fields")
        entries.append(tuple(float(v) for v in fields))
    return entries


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write an RGB(A) or grayscale uint8 image as PNG."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        encoded = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    elif image.ndim == 3 and image.shape[2] == 4:
        encoded = cv2.cvtColor(image, cv2.COLOR_RGBA2BGRA)
    else:
        encoded = image
    if not cv2.imwrite(str(path), encoded):
        raise IoFailure(f"failed to write {path}")


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG as RGB(A) or grayscale uint8."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise InputError(f"failed to read image {path}")
    if data.ndim == 3 and data.shape[2] == 3:
        return cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    if data.ndim == 3 and data.shape[2] == 4:
        return cv2.cvtColor(data, cv2.COLOR_BGRA2RGBA)
    return data

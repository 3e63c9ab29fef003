"""Windowed bundle adjustment: Levenberg-Marquardt over poses and points.

The problem minimizes squared pinhole reprojection residuals of UNDISTORTED
pixel observations. Free poses are parameterized by local increments
(omega, delta_c) with R <- R_ref @ exp([omega]x); the solver rebases the
reference after every accepted step, so its Jacobians are always evaluated
at zero increment. Fixed poses and points observed only by fixed poses are
never touched.

Point blocks are eliminated by a Schur complement: the pose-pose Hessian
is block diagonal (each observation involves exactly one pose), so the
reduced system is only 6 x (free poses) square.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, Pose
from .errors import DivergedAdjustment
from .twoview import _exp_so3

MAX_ITERATIONS = 50
COST_DECREASE_TOL = 1e-8
STEP_TOL = 1e-10
INITIAL_LAMBDA = 1e-3
LAMBDA_FACTOR = 10.0
MAX_CONSECUTIVE_REJECTS = 10


@dataclass
class BAResult:
    poses: list[Pose]
    points: np.ndarray
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_steps: int
    termination: str

    def rms_px(self, n_observations: int) -> float:
        return float(np.sqrt(self.final_cost / max(n_observations, 1)))


class BundleProblem:
    """Reprojection least squares over a window of poses and the map points.

    Args:
        camera: Intrinsics (pinhole part only; observations are undistorted).
        poses: All involved camera poses.
        points: (M, 3) tie-point positions.
        obs_pose: (K,) index into ``poses`` per observation.
        obs_point: (K,) index into ``points`` per observation.
        obs_uv: (K, 2) undistorted pixel observations.
        free_pose_mask: (len(poses),) True for poses being optimized.
        free_point_mask: (M,) True for points being optimized.
    """

    def __init__(
        self,
        camera: CameraModel,
        poses: list[Pose],
        points: np.ndarray,
        obs_pose: np.ndarray,
        obs_point: np.ndarray,
        obs_uv: np.ndarray,
        free_pose_mask: np.ndarray,
        free_point_mask: np.ndarray,
    ) -> None:
        self.camera = camera
        self.poses = list(poses)
        self.points = np.array(points, dtype=np.float64)
        self.obs_pose = np.asarray(obs_pose, dtype=np.int64)
        self.obs_point = np.asarray(obs_point, dtype=np.int64)
        self.obs_uv = np.asarray(obs_uv, dtype=np.float64)
        self.free_pose_mask = np.asarray(free_pose_mask, dtype=bool)
        self.free_point_mask = np.asarray(free_point_mask, dtype=bool)

        self.free_pose_indices = np.flatnonzero(self.free_pose_mask)
        self.free_point_indices = np.flatnonzero(self.free_point_mask)
        # Map global pose/point index -> slot in the parameter vector (-1 fixed).
        self._pose_slot = -np.ones(len(poses), dtype=np.int64)
        self._pose_slot[self.free_pose_indices] = np.arange(
            len(self.free_pose_indices)
        )
        self._point_slot = -np.ones(len(self.points), dtype=np.int64)
        self._point_slot[self.free_point_indices] = np.arange(
            len(self.free_point_indices)
        )

    @property
    def n_parameters(self) -> int:
        return 6 * len(self.free_pose_indices) + 3 * len(self.free_point_indices)

    @property
    def n_observations(self) -> int:
        return len(self.obs_uv)

    def pack(self) -> np.ndarray:
        """Parameter vector at the current reference state.

        Pose entries are local increments, hence zero; point entries are
        absolute coordinates.
        """
        x = np.zeros(self.n_parameters)
        np_offset = 6 * len(self.free_pose_indices)
        x[np_offset:] = self.points[self.free_point_indices].ravel()
        return x

    def _state_at(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
        rotations = [p.rotation for p in self.poses]
        centers = np.array([p.center for p in self.poses])
        points = self.points.copy()
        for slot, idx in enumerate(self.free_pose_indices):
            omega = x[6 * slot : 6 * slot + 3]
            delta_c = x[6 * slot + 3 : 6 * slot + 6]
            rotations[idx] = rotations[idx] @ _exp_so3(omega)
            centers[idx] = centers[idx] + delta_c
        np_offset = 6 * len(self.free_pose_indices)
        if len(self.free_point_indices):
            points[self.free_point_indices] = x[np_offset:].reshape(-1, 3)
        return rotations, centers, points

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """Stacked (2K,) residuals (predicted - observed) at parameters x."""
        rotations, centers, points = self._state_at(x)
        r = np.empty((self.n_observations, 2))
        cam = self.camera
        rot_arr = np.stack(rotations)
        p_cam = np.einsum(
            "kji,kj->ki",
            rot_arr[self.obs_pose],
            points[self.obs_point] - centers[self.obs_pose],
        )
        z = p_cam[:, 2]
        r[:, 0] = cam.fx * p_cam[:, 0] / z + cam.cx - self.obs_uv[:, 0]
        r[:, 1] = cam.fy * p_cam[:, 1] / z + cam.cy - self.obs_uv[:, 1]
        return r.ravel()

    def _blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-observation residuals and Jacobian blocks at zero increment.

        Returns:
            (residuals (K, 2), pose blocks (K, 2, 6), point blocks (K, 2, 3)).
            Blocks of fixed poses/points are zero.
        """
        cam = self.camera
        rot_arr = np.stack([p.rotation for p in self.poses])[self.obs_pose]
        centers = np.array([p.center for p in self.poses])[self.obs_pose]
        delta = self.points[self.obs_point] - centers
        p_cam = np.einsum("kji,kj->ki", rot_arr, delta)
        z = p_cam[:, 2]
        k = self.n_observations

        r = np.empty((k, 2))
        r[:, 0] = cam.fx * p_cam[:, 0] / z + cam.cx - self.obs_uv[:, 0]
        r[:, 1] = cam.fy * p_cam[:, 1] / z + cam.cy - self.obs_uv[:, 1]

        inv_z = 1.0 / z
        d_proj = np.zeros((k, 2, 3))
        d_proj[:, 0, 0] = cam.fx * inv_z
        d_proj[:, 1, 1] = cam.fy * inv_z
        d_proj[:, 0, 2] = -cam.fx * p_cam[:, 0] * inv_z**2
        d_proj[:, 1, 2] = -cam.fy * p_cam[:, 1] * inv_z**2

        skew = np.zeros((k, 3, 3))
        skew[:, 0, 1] = -p_cam[:, 2]
        skew[:, 0, 2] = p_cam[:, 1]
        skew[:, 1, 0] = p_cam[:, 2]
        skew[:, 1, 2] = -p_cam[:, 0]
        skew[:, 2, 0] = -p_cam[:, 1]
        skew[:, 2, 1] = p_cam[:, 0]

        j_point = d_proj @ np.transpose(rot_arr, (0, 2, 1))
        j_pose = np.concatenate([d_proj @ skew, -j_point], axis=2)

        pose_free = self.free_pose_mask[self.obs_pose]
        point_free = self.free_point_mask[self.obs_point]
        j_pose[~pose_free] = 0.0
        j_point[~point_free] = 0.0
        return r, j_pose, j_point

    def jacobian(self) -> np.ndarray:
        """Dense analytic Jacobian (2K, n_parameters) at zero increment."""
        _, j_pose, j_point = self._blocks()
        k = self.n_observations
        jac = np.zeros((2 * k, self.n_parameters))
        np_offset = 6 * len(self.free_pose_indices)
        pose_slots = self._pose_slot[self.obs_pose]
        point_slots = self._point_slot[self.obs_point]
        for obs in range(k):
            ps = pose_slots[obs]
            if ps >= 0:
                jac[2 * obs : 2 * obs + 2, 6 * ps : 6 * ps + 6] = j_pose[obs]
            xs = point_slots[obs]
            if xs >= 0:
                col = np_offset + 3 * xs
                jac[2 * obs : 2 * obs + 2, col : col + 3] = j_point[obs]
        return jac

    def cost(self) -> float:
        return float(np.sum(self._blocks()[0] ** 2))

    def _apply_step(self, delta: np.ndarray) -> tuple[list[Pose], np.ndarray]:
        poses = list(self.poses)
        for slot, idx in enumerate(self.free_pose_indices):
            omega = delta[6 * slot : 6 * slot + 3]
            delta_c = delta[6 * slot + 3 : 6 * slot + 6]
            rotation = poses[idx].rotation @ _exp_so3(omega)
            # Orthonormality drifts over many compositions; re-project.
            u, _, vt = np.linalg.svd(rotation)
            rotation = u @ vt
            if np.linalg.det(rotation) < 0:
                rotation = u @ np.diag([1.0, 1.0, -1.0]) @ vt
            poses[idx] = Pose(rotation, poses[idx].center + delta_c)
        points = self.points.copy()
        n_pose_params = 6 * len(self.free_pose_indices)
        if len(self.free_point_indices):
            points[self.free_point_indices] += delta[n_pose_params:].reshape(-1, 3)
        return poses, points

    def _trial_cost(self, poses: list[Pose], points: np.ndarray) -> float:
        rot_arr = np.stack([p.rotation for p in poses])[self.obs_pose]
        centers = np.array([p.center for p in poses])[self.obs_pose]
        p_cam = np.einsum(
            "kji,kj->ki", rot_arr, points[self.obs_point] - centers
        )
        z = p_cam[:, 2]
        cam = self.camera
        du = cam.fx * p_cam[:, 0] / z + cam.cx - self.obs_uv[:, 0]
        dv = cam.fy * p_cam[:, 1] / z + cam.cy - self.obs_uv[:, 1]
        return float(np.sum(du * du + dv * dv))

    def solve(self, max_iterations: int = MAX_ITERATIONS) -> BAResult:
        """Run Levenberg-Marquardt.

        Damping is multiplicative on the Hessian diagonal: x10 on a rejected
        step, /10 on an accepted one, starting at 1e-3. Terminates on
        relative cost decrease < 1e-8, step norm < 1e-10, or the iteration
        cap.

        Raises:
            DivergedAdjustment: After 10 consecutive rejected steps.
        """
        n_fp = len(self.free_pose_indices)
        n_fx = len(self.free_point_indices)
        lam = INITIAL_LAMBDA
        initial_cost = cost = self.cost()
        accepted = 0
        iterations = 0
        consecutive_rejects = 0
        termination = "max_iterations"

        if n_fp == 0 and n_fx == 0:
            return BAResult(
                list(self.poses), self.points.copy(), initial_cost, cost, 0, 0,
                "nothing_free",
            )

        while iterations < max_iterations:
            iterations += 1
            r, j_pose, j_point = self._blocks()
            pose_slots = self._pose_slot[self.obs_pose]
            point_slots = self._point_slot[self.obs_point]

            u_blocks = np.zeros((n_fp, 6, 6))
            g_p = np.zeros((n_fp, 6))
            v_blocks = np.zeros((n_fx, 3, 3))
            g_x = np.zeros((n_fx, 3))
            w_blocks = np.zeros((n_fp, n_fx, 6, 3))

            has_pose = pose_slots >= 0
            has_point = point_slots >= 0
            if n_fp:
                np.add.at(
                    u_blocks,
                    pose_slots[has_pose],
                    np.einsum("kab,kac->kbc", j_pose[has_pose], j_pose[has_pose]),
                )
                np.add.at(
                    g_p,
                    pose_slots[has_pose],
                    np.einsum("kab,ka->kb", j_pose[has_pose], r[has_pose]),
                )
            if n_fx:
                np.add.at(
                    v_blocks,
                    point_slots[has_point],
                    np.einsum("kab,kac->kbc", j_point[has_point], j_point[has_point]),
                )
                np.add.at(
                    g_x,
                    point_slots[has_point],
                    np.einsum("kab,ka->kb", j_point[has_point], r[has_point]),
                )
            both = has_pose & has_point
            if n_fp and n_fx and np.any(both):
                np.add.at(
                    w_blocks,
                    (pose_slots[both], point_slots[both]),
                    np.einsum("kab,kac->kbc", j_pose[both], j_point[both]),
                )

            # Damp diagonals (Marquardt scaling with an absolute floor).
            u_aug = u_blocks.copy()
            v_aug = v_blocks.copy()
            for arr in (u_aug, v_aug):
                diag = np.einsum("...ii->...i", arr)
                diag += lam * np.maximum(diag, 1e-12)

            try:
                if n_fx:
                    v_inv = np.linalg.inv(v_aug)
                else:
                    v_inv = np.zeros((0, 3, 3))
            except np.linalg.LinAlgError:
                lam *= LAMBDA_FACTOR
                consecutive_rejects += 1
                if consecutive_rejects >= MAX_CONSECUTIVE_REJECTS:
                    raise DivergedAdjustment("damping runaway: singular point blocks")
                continue

            if n_fp:
                s = np.zeros((6 * n_fp, 6 * n_fp))
                for slot in range(n_fp):
                    s[6 * slot : 6 * slot + 6, 6 * slot : 6 * slot + 6] = u_aug[slot]
                rhs = -g_p.reshape(-1)
                if n_fx:
                    wv = np.einsum("pjab,jbc->pjac", w_blocks, v_inv)
                    s -= np.einsum("pjac,qjbc->paqb", wv, w_blocks).reshape(
                        6 * n_fp, 6 * n_fp
                    )
                    rhs += np.einsum("pjac,jc->pa", wv, g_x).reshape(-1)
                try:
                    delta_p = np.linalg.solve(s, rhs)
                except np.linalg.LinAlgError:
                    lam *= LAMBDA_FACTOR
                    consecutive_rejects += 1
                    if consecutive_rejects >= MAX_CONSECUTIVE_REJECTS:
                        raise DivergedAdjustment("singular reduced camera system")
                    continue
                delta_p_blocks = delta_p.reshape(n_fp, 6)
            else:
                delta_p = np.zeros(0)
                delta_p_blocks = np.zeros((0, 6))

            if n_fx:
                back = g_x + np.einsum("pjab,pa->jb", w_blocks, delta_p_blocks)
                delta_x = -np.einsum("jab,jb->ja", v_inv, back)
            else:
                delta_x = np.zeros((0, 3))

            delta = np.concatenate([delta_p, delta_x.ravel()])
            step_norm = float(np.linalg.norm(delta))
            if step_norm < STEP_TOL:
                termination = "step_tolerance"
                break

            trial_poses, trial_points = self._apply_step(delta)
            trial_cost = self._trial_cost(trial_poses, trial_points)
            if trial_cost < cost:
                rel_decrease = (cost - trial_cost) / max(cost, 1e-300)
                self.poses = trial_poses
                self.points = trial_points
                cost = trial_cost
                lam = max(lam / LAMBDA_FACTOR, 1e-12)
                accepted += 1
                consecutive_rejects = 0
                if rel_decrease < COST_DECREASE_TOL:
                    termination = "cost_tolerance"
                    break
            else:
                lam *= LAMBDA_FACTOR
                consecutive_rejects += 1
                if consecutive_rejects >= MAX_CONSECUTIVE_REJECTS:
                    raise DivergedAdjustment(
                        f"{MAX_CONSECUTIVE_REJECTS} consecutive rejected steps"
                    )

        return BAResult(
            poses=list(self.poses),
            points=self.points.copy(),
            initial_cost=initial_cost,
            final_cost=cost,
            iterations=iterations,
            accepted_steps=accepted,
            termination=termination,
        )

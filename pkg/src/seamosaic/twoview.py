"""Two-view and 2D-3D geometry: essential matrix, triangulation, resection.

All functions here work with UNDISTORTED NORMALIZED image coordinates
(x, y) = ((u - cx)/fx, (v - cy)/fy); pixel thresholds are converted by the
caller. Poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Pose

ESSENTIAL_SAMPLE = 5
RANSAC_MAX_ITERATIONS = 1000


def _ransac_iterations(
    inlier_ratio: float, sample_size: int, confidence: float
) -> int:
    if inlier_ratio <= 0.0:
        return RANSAC_MAX_ITERATIONS
    good = inlier_ratio**sample_size
    if good >= 1.0 - 1e-12:
        return 1
    return int(np.ceil(np.log(1.0 - confidence) / np.log(1.0 - good)))


# Monomial index tables for the five-point polynomial system.
# Linear order: [x, y, z, 1]; quadratic order: [x2, xy, xz, y2, yz, z2, x, y, z, 1];
# cubic order: the 10 degree-3 monomials [x3, x2y, x2z, xy2, xyz, xz2, y3, y2z,
# yz2, z3] followed by the 10 quadratic-basis monomials.
_LIN_LIN = np.array(
    [[0, 1, 2, 6], [1, 3, 4, 7], [2, 4, 5, 8], [6, 7, 8, 9]], dtype=np.int64
)
_QUAD_LIN = np.array(
    [
        [0, 1, 2, 10],
        [1, 3, 4, 11],
        [2, 4, 5, 12],
        [3, 6, 7, 13],
        [4, 7, 8, 14],
        [5, 8, 9, 15],
        [10, 11, 12, 16],
        [11, 13, 14, 17],
        [12, 14, 15, 18],
        [16, 17, 18, 19],
    ],
    dtype=np.int64,
)


def _mul_lin_lin(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(10)
    np.add.at(out, _LIN_LIN.ravel(), np.outer(a, b).ravel())
    return out


def _mul_quad_lin(q: np.ndarray, l: np.ndarray) -> np.ndarray:
    out = np.zeros(20)
    np.add.at(out, _QUAD_LIN.ravel(), np.outer(q, l).ravel())
    return out


def essential_candidates(xy_a: np.ndarray, xy_b: np.ndarray) -> list[np.ndarray]:
    """Five-point essential matrix solver (Nister/Stewenius formulation).

    Works for minimal five-point samples and, via a least-squares null
    space, for larger inlier sets. Unlike the eight-point algorithm it is
    not degenerate for coplanar scene points, which is the normal case on
    a flat seabed.

    Returns:
        Up to ten essential matrix candidates.
    """
    n = xy_a.shape[0]
    if n < 5:
        return []
    ha = np.column_stack([xy_a, np.ones(n)])
    hb = np.column_stack([xy_b, np.ones(n)])
    rows = (hb[:, :, None] * ha[:, None, :]).reshape(n, 9)
    _, _, vt = np.linalg.svd(rows, full_matrices=True)
    basis = vt[-4:][::-1]  # X, Y, Z, W with W the least-singular direction
    # E(x, y, z) = x*X + y*Y + z*Z + W; each entry is linear in (x, y, z, 1).
    e_lin = basis.reshape(4, 3, 3).transpose(1, 2, 0)

    # det(E) = 0: one cubic equation.
    def det3(m):
        total = np.zeros(20)
        for (i, j, k), sign in (
            ((0, 1, 2), 1.0),
            ((1, 2, 0), 1.0),
            ((2, 0, 1), 1.0),
            ((2, 1, 0), -1.0),
            ((1, 0, 2), -1.0),
            ((0, 2, 1), -1.0),
        ):
            quad = _mul_lin_lin(m[0, i], m[1, j])
            total += sign * _mul_quad_lin(quad, m[2, k])
        return total

    equations = np.empty((10, 20))
    equations[0] = det3(e_lin)

    # Trace constraint 2*E*E^T*E - trace(E*E^T)*E = 0: nine cubic equations.
    eet = np.empty((3, 3, 10))
    for i in range(3):
        for j in range(3):
            acc = np.zeros(10)
            for k in range(3):
                acc += _mul_lin_lin(e_lin[i, k], e_lin[j, k])
            eet[i, j] = acc
    trace = eet[0, 0] + eet[1, 1] + eet[2, 2]
    row = 1
    for i in range(3):
        for j in range(3):
            acc = np.zeros(20)
            for k in range(3):
                acc += 2.0 * _mul_quad_lin(eet[i, k], e_lin[k, j])
            acc -= _mul_quad_lin(trace, e_lin[i, j])
            equations[row] = acc
            row += 1

    # Gauss-Jordan: reduce to [I | B] over the cubic monomials, then build the
    # action matrix of multiplication by x in the quotient ring.
    lead = equations[:, :10]
    rest = equations[:, 10:]
    try:
        b = np.linalg.solve(lead, rest)
    except np.linalg.LinAlgError:
        return []
    action = np.zeros((10, 10))
    action[0:6] = -b[0:6]
    action[6, 0] = 1.0
    action[7, 1] = 1.0
    action[8, 2] = 1.0
    action[9, 6] = 1.0

    eigenvalues, eigenvectors = np.linalg.eig(action)
    candidates: list[np.ndarray] = []
    for idx in range(10):
        if abs(eigenvalues[idx].imag) > 1e-8:
            continue
        vec = eigenvectors[:, idx].real
        if abs(vec[9]) < 1e-12:
            continue
        vec = vec / vec[9]
        x, y, z = vec[6], vec[7], vec[8]
        e = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        norm = np.linalg.norm(e)
        if norm < 1e-12 or not np.isfinite(norm):
            continue
        candidates.append(e.reshape(3, 3) / norm)
    return candidates


def sampson_distance(e: np.ndarray, xy_a: np.ndarray, xy_b: np.ndarray) -> np.ndarray:
    ha = np.column_stack([xy_a, np.ones(len(xy_a))])
    hb = np.column_stack([xy_b, np.ones(len(xy_b))])
    ex_a = ha @ e.T  # E @ x_a, per row
    et_xb = hb @ e  # E^T @ x_b, per row
    num = np.sum(hb * ex_a, axis=1) ** 2
    den = ex_a[:, 0] ** 2 + ex_a[:, 1] ** 2 + et_xb[:, 0] ** 2 + et_xb[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def relative_pose_ransac(
    xy_a: np.ndarray,
    xy_b: np.ndarray,
    threshold: float,
    rng: np.random.Generator,
    confidence: float = 0.999,
) -> tuple[np.ndarray, np.ndarray] | None:
    """RANSAC essential matrix over five-point samples.

    Candidates are scored by the number of correspondences that pass BOTH
    the Sampson gate and the cheirality check of the candidate's best
    decomposition. The epipolar constraint alone cannot separate an
    essential matrix from its twisted pair on coplanar scenes; cheirality
    can.

    Returns (relative pose of the second camera in the first camera's
    frame with unit baseline, inlier mask) or None.
    """
    n = xy_a.shape[0]
    if n < ESSENTIAL_SAMPLE:
        return None

    def support(e: np.ndarray) -> tuple[int, Pose | None, np.ndarray]:
        mask = sampson_distance(e, xy_a, xy_b) < threshold
        if np.count_nonzero(mask) < ESSENTIAL_SAMPLE:
            return 0, None, mask
        decomposed = decompose_essential(e, xy_a[mask], xy_b[mask])
        if decomposed is None:
            return 0, None, mask
        pose, cheiral = decomposed
        full = mask.copy()
        full[mask] = cheiral
        return int(np.count_nonzero(full)), pose, full

    best: tuple[int, Pose | None, np.ndarray] | None = None
    needed = RANSAC_MAX_ITERATIONS
    iteration = 0
    while iteration < min(needed, RANSAC_MAX_ITERATIONS):
        iteration += 1
        idx = rng.choice(n, size=ESSENTIAL_SAMPLE, replace=False)
        for e in essential_candidates(xy_a[idx], xy_b[idx]):
            count, pose, mask = support(e)
            if pose is not None and (best is None or count > best[0]):
                best = (count, pose, mask)
                needed = _ransac_iterations(count / n, ESSENTIAL_SAMPLE, confidence)
    if best is None or best[0] < ESSENTIAL_SAMPLE:
        return None
    # Non-minimal polish: re-solve on the inlier set's least-squares null space.
    for e in essential_candidates(xy_a[best[2]], xy_b[best[2]]):
        count, pose, mask = support(e)
        if pose is not None and count > best[0]:
            best = (count, pose, mask)
    return best[1], best[2]


def world_to_camera_matrix(pose: Pose) -> np.ndarray:
    """3x4 matrix mapping homogeneous world points to camera coordinates."""
    return np.hstack([pose.rotation.T, (-pose.rotation.T @ pose.center)[:, None]])


def triangulate_points(
    pose_a: Pose, pose_b: Pose, xy_a: np.ndarray, xy_b: np.ndarray
) -> np.ndarray:
    """Linear two-view triangulation (batched DLT). Returns (N, 3) points."""
    pa = world_to_camera_matrix(pose_a)
    pb = world_to_camera_matrix(pose_b)
    n = xy_a.shape[0]
    rows = np.empty((n, 4, 4))
    rows[:, 0] = xy_a[:, 0, None] * pa[2] - pa[0]
    rows[:, 1] = xy_a[:, 1, None] * pa[2] - pa[1]
    rows[:, 2] = xy_b[:, 0, None] * pb[2] - pb[0]
    rows[:, 3] = xy_b[:, 1, None] * pb[2] - pb[1]
    _, _, vt = np.linalg.svd(rows)
    hom = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        points = hom[:, :3] / hom[:, 3:4]
    return points


def depths_in_camera(pose: Pose, points: np.ndarray) -> np.ndarray:
    return (points - pose.center) @ pose.rotation[:, 2]


def reprojection_errors(
    pose: Pose, points: np.ndarray, xy: np.ndarray
) -> np.ndarray:
    """Normalized-coordinate reprojection error norms; inf behind the camera."""
    p_cam = pose.world_to_camera(points)
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pred = p_cam[:, :2] / z[:, None]
    err = np.linalg.norm(pred - xy, axis=1)
    err[~np.isfinite(err)] = np.inf
    err[z <= 1e-12] = np.inf
    return err


def parallax_angles_deg(
    center_a: np.ndarray, center_b: np.ndarray, points: np.ndarray
) -> np.ndarray:
    va = points - center_a
    vb = points - center_b
    cosang = np.sum(va * vb, axis=1) / (
        np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1) + 1e-300
    )
    return np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))


def decompose_essential(
    e: np.ndarray, xy_a: np.ndarray, xy_b: np.ndarray
) -> tuple[Pose, np.ndarray] | None:
    """Cheirality-checked decomposition of an essential matrix.

    Returns the second camera's pose in the first camera's frame (unit
    baseline) and the mask of points with positive depth in both views,
    or None when no candidate sees enough points in front.
    """
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]

    pose_a = Pose.identity()
    best = None
    best_count = -1
    for r_ab, t_ab in ((r1, t), (r1, -t), (r2, t), (r2, -t)):
        pose_b = Pose(r_ab.T, -r_ab.T @ t_ab)
        points = triangulate_points(pose_a, pose_b, xy_a, xy_b)
        ok = np.isfinite(points).all(axis=1)
        ok &= depths_in_camera(pose_a, points) > 0
        ok &= depths_in_camera(pose_b, points) > 0
        count = int(np.count_nonzero(ok))
        if count > best_count:
            best_count = count
            best = (pose_b, ok)
    if best is None or best_count == 0:
        return None
    return best


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform: dst ~= R @ src + t."""
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    cov = (dst - dst_mean).T @ (src - src_mean)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    rotation = u @ np.diag([1.0, 1.0, d]) @ vt
    return rotation, dst_mean - rotation @ src_mean


def p3p_solutions(points: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """Grunert's three-point resection.

    Args:
        points: (3, 3) world points.
        bearings: (3, 3) unit bearing vectors in the camera frame.

    Returns:
        Candidate camera-to-world poses (up to four).
    """
    p1, p2, p3 = points
    b1, b2, b3 = bearings
    a2 = float(np.sum((p2 - p3) ** 2))
    b2_ = float(np.sum((p1 - p3) ** 2))
    c2 = float(np.sum((p1 - p2) ** 2))
    if min(a2, b2_, c2) < 1e-18:
        return []
    p = 2.0 * float(b2 @ b3)
    q = 2.0 * float(b1 @ b3)
    r = 2.0 * float(b1 @ b2)
    aa = a2 / b2_
    cc = c2 / b2_

    # Quartic in v = s3/s1 from the resultant of the two law-of-cosines
    # ratio equations (u = s2/s1 eliminated).
    c4 = aa**2 - 2 * aa * cc - 2 * aa + cc**2 - cc * p**2 + 2 * cc + 1
    c3 = (
        -2 * aa**2 * q + 4 * aa * cc * q + aa * p * r + 2 * aa * q
        - 2 * cc**2 * q + cc * p**2 * q + cc * p * r - 2 * cc * q - p * r
    )
    c2_ = (
        aa**2 * q**2 + 2 * aa**2 - 2 * aa * cc * q**2 - 4 * aa * cc
        - aa * p * q * r - aa * r**2 + cc**2 * q**2 + 2 * cc**2 - cc * p**2
        - cc * p * q * r + p**2 + r**2 - 2
    )
    c1 = (
        -2 * aa**2 * q + 4 * aa * cc * q + aa * p * r + aa * q * r**2
        - 2 * aa * q - 2 * cc**2 * q + cc * p * r + 2 * cc * q - p * r
    )
    c0 = aa**2 - 2 * aa * cc - aa * r**2 + 2 * aa + cc**2 - 2 * cc + 1

    coeffs = np.array([c4, c3, c2_, c1, c0])
    if not np.all(np.isfinite(coeffs)) or abs(c4) < 1e-14 * max(1.0, np.abs(coeffs).max()):
        return []
    roots = np.roots(coeffs)

    poses: list[Pose] = []
    for root in roots:
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        # One Newton polish on the quartic.
        for _ in range(2):
            f = (((c4 * v + c3) * v + c2_) * v + c1) * v + c0
            df = ((4 * c4 * v + 3 * c3) * v + 2 * c2_) * v + c1
            if abs(df) < 1e-300:
                break
            v -= f / df
        denom_u = p * v - r
        if abs(denom_u) < 1e-12:
            continue
        u_val = (aa * q * v - aa * v**2 - aa - cc * q * v + cc * v**2 + cc + v**2 - 1) / denom_u
        s1_sq = b2_ / (1.0 + v * v - q * v)
        if s1_sq <= 0:
            continue
        s1 = float(np.sqrt(s1_sq))
        s2 = u_val * s1
        s3 = v * s1
        if s1 <= 0 or s2 <= 0 or s3 <= 0:
            continue
        cam_points = np.stack([s1 * b1, s2 * b2, s3 * b3])
        rotation, translation = rigid_align(points, cam_points)
        poses.append(Pose(rotation.T, -rotation.T @ translation))
    return poses


def refine_pose(
    pose: Pose, points: np.ndarray, xy: np.ndarray, iterations: int = 10
) -> Pose:
    """Pose-only Gauss-Newton on normalized reprojection residuals."""
    rotation = pose.rotation.copy()
    center = pose.center.copy()
    for _ in range(iterations):
        p_cam = (points - center) @ rotation
        z = p_cam[:, 2]
        valid = z > 1e-9
        if np.count_nonzero(valid) < 3:
            break
        pc = p_cam[valid]
        z = pc[:, 2]
        pred = pc[:, :2] / z[:, None]
        residual = (pred - xy[valid]).ravel()

        inv_z = 1.0 / z
        d_proj = np.zeros((len(pc), 2, 3))
        d_proj[:, 0, 0] = inv_z
        d_proj[:, 1, 1] = inv_z
        d_proj[:, 0, 2] = -pc[:, 0] * inv_z**2
        d_proj[:, 1, 2] = -pc[:, 1] * inv_z**2
        # d p_cam / d omega = [p_cam]_x for R <- R @ exp([omega]_x)
        skew = np.zeros((len(pc), 3, 3))
        skew[:, 0, 1] = -pc[:, 2]
        skew[:, 0, 2] = pc[:, 1]
        skew[:, 1, 0] = pc[:, 2]
        skew[:, 1, 2] = -pc[:, 0]
        skew[:, 2, 0] = -pc[:, 1]
        skew[:, 2, 1] = pc[:, 0]
        j_omega = d_proj @ skew
        j_center = d_proj @ (-rotation.T)
        jac = np.concatenate([j_omega, j_center], axis=2).reshape(-1, 6)

        h = jac.T @ jac + 1e-9 * np.eye(6)
        g = jac.T @ residual
        try:
            delta = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            break
        rotation = rotation @ _exp_so3(delta[:3])
        center = center + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break
    # Re-orthonormalize before constructing the Pose.
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        rotation = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return Pose(rotation, center)


def _exp_so3(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-12:
        return np.eye(3) + k
    return (
        np.eye(3)
        + np.sin(theta) / theta * k
        + (1.0 - np.cos(theta)) / theta**2 * (k @ k)
    )


@dataclass
class ResectionResult:
    pose: Pose
    inlier_mask: np.ndarray


def resect_ransac(
    points: np.ndarray,
    xy: np.ndarray,
    threshold: float,
    rng: np.random.Generator,
    confidence: float = 0.999,
    max_iterations: int = 500,
) -> ResectionResult | None:
    """RANSAC perspective resection with a P3P minimal solver.

    Args:
        points: (N, 3) world points.
        xy: (N, 2) normalized observations.
        threshold: Inlier reprojection threshold in normalized units.

    Returns:
        Refined pose and inlier mask, or None when every sample failed.
    """
    n = points.shape[0]
    if n < 3:
        return None
    bearings = np.column_stack([xy, np.ones(n)])
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)

    best_pose = None
    best_mask = None
    best_count = -1
    needed = max_iterations
    iteration = 0
    while iteration < min(needed, max_iterations):
        iteration += 1
        idx = rng.choice(n, size=3, replace=False)
        for candidate in p3p_solutions(points[idx], bearings[idx]):
            errors = reprojection_errors(candidate, points, xy)
            mask = errors < threshold
            count = int(np.count_nonzero(mask))
            if count > best_count:
                best_count, best_pose, best_mask = count, candidate, mask
                needed = _ransac_iterations(count / n, 3, confidence)
    if best_pose is None or best_count < 3:
        return None
    refined = refine_pose(best_pose, points[best_mask], xy[best_mask])
    errors = reprojection_errors(refined, points, xy)
    mask = errors < threshold
    if np.count_nonzero(mask) >= best_count:
        best_pose, best_mask = refined, mask
    return ResectionResult(pose=best_pose, inlier_mask=best_mask)

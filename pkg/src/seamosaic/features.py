"""Corner detection and patch matching for the visual odometry front end.

Features are minimum-eigenvalue corners (Shi-Tomasi response) with
non-maximum suppression and quadratic subpixel refinement; matching is
normalized cross-correlation of fixed-size patches with a
forward-backward (mutual best) consistency check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import PixelCoord
from .errors import TooFewMatches


@dataclass(frozen=True)
class FeatureConfig:
    target_features: int = 800
    patch_size: int = 11
    nms_radius: int = 5
    min_matches: int = 30
    min_ncc: float = 0.70
    smoothing_sigma: float = 1.0
    quality_level: float = 0.001  # response floor relative to the strongest corner


@dataclass(frozen=True)
class FeatureMatch:
    """One correspondence between two frames; score in [0, 1]."""

    pixel_a: PixelCoord
    pixel_b: PixelCoord
    score: float
    index_a: int = -1
    index_b: int = -1


def to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float32)
    return image.astype(np.float32).mean(axis=2)


def corner_response(gray: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Minimum eigenvalue of the smoothed structure tensor."""
    blurred = ndimage.gaussian_filter(gray, sigma)
    gy, gx = np.gradient(blurred)
    sxx = ndimage.uniform_filter(gx * gx, size=5)
    syy = ndimage.uniform_filter(gy * gy, size=5)
    sxy = ndimage.uniform_filter(gx * gy, size=5)
    trace_half = 0.5 * (sxx + syy)
    det_term = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy**2, 0.0))
    return trace_half - det_term


def detect_corners(
    gray: np.ndarray, config: FeatureConfig = FeatureConfig()
) -> np.ndarray:
    """Detect up to ``target_features`` corners, strongest first.

    Returns:
        (N, 2) subpixel corner coordinates (u, v).
    """
    response = corner_response(gray, config.smoothing_sigma)
    margin = config.patch_size // 2 + 2
    if response.shape[0] <= 2 * margin or response.shape[1] <= 2 * margin:
        return np.zeros((0, 2))
    interior = np.zeros_like(response, dtype=bool)
    interior[margin:-margin, margin:-margin] = True

    size = 2 * config.nms_radius + 1
    local_max = response == ndimage.maximum_filter(response, size=size)
    peak = float(response[interior].max(initial=0.0))
    if peak <= 0.0:
        return np.zeros((0, 2))
    candidates = local_max & interior & (response > config.quality_level * peak)
    vs, us = np.nonzero(candidates)
    if len(us) == 0:
        return np.zeros((0, 2))
    order = np.argsort(response[vs, us])[::-1][: config.target_features]
    us, vs = us[order], vs[order]

    # Quadratic subpixel refinement of the response peak.
    def refine(center, minus, plus):
        denom = minus - 2.0 * center + plus
        offset = np.where(np.abs(denom) > 1e-12, 0.5 * (minus - plus) / denom, 0.0)
        return np.clip(offset, -0.5, 0.5)

    du = refine(response[vs, us], response[vs, us - 1], response[vs, us + 1])
    dv = refine(response[vs, us], response[vs - 1, us], response[vs + 1, us])
    return np.column_stack([us + du, vs + dv])


def extract_descriptors(
    gray: np.ndarray, corners: np.ndarray, patch_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Mean/variance-normalized patches around integer corner locations.

    Returns:
        (descriptors (N, patch_size^2), keep mask over input corners).
        Corners whose patch leaves the raster or has zero variance are
        dropped.
    """
    half = patch_size // 2
    h, w = gray.shape
    if len(corners) == 0:
        return np.zeros((0, patch_size * patch_size)), np.zeros(0, dtype=bool)
    ui = np.rint(corners[:, 0]).astype(np.int64)
    vi = np.rint(corners[:, 1]).astype(np.int64)
    keep = (ui >= half) & (ui < w - half) & (vi >= half) & (vi < h - half)
    ui, vi = ui[keep], vi[keep]
    if len(ui) == 0:
        return np.zeros((0, patch_size * patch_size)), keep
    offsets = np.arange(-half, half + 1)
    rows = vi[:, None, None] + offsets[None, :, None]
    cols = ui[:, None, None] + offsets[None, None, :]
    patches = gray[rows, cols].reshape(len(ui), -1).astype(np.float64)
    patches -= patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1)
    textured = norms > 1e-6
    full_keep = keep.copy()
    full_keep[np.flatnonzero(keep)[~textured]] = False
    patches = patches[textured] / norms[textured][:, None]
    return patches, full_keep


def detect_features(
    image: np.ndarray, config: FeatureConfig = FeatureConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Corners plus their NCC descriptors for one image.

    Returns:
        (corners (N, 2), descriptors (N, patch_size^2)), aligned by row.
    """
    gray = to_gray(image)
    corners = detect_corners(gray, config)
    descriptors, keep = extract_descriptors(gray, corners, config.patch_size)
    return corners[keep], descriptors


def match_features(
    corners_a: np.ndarray,
    descriptors_a: np.ndarray,
    corners_b: np.ndarray,
    descriptors_b: np.ndarray,
    config: FeatureConfig = FeatureConfig(),
) -> list[FeatureMatch]:
    """NCC matching with forward-backward (mutual best) consistency.

    Returns matches sorted by score descending.

    Raises:
        TooFewMatches: When fewer than ``config.min_matches`` survive.
    """
    if len(corners_a) == 0 or len(corners_b) == 0:
        raise TooFewMatches("no textured corners detected")
    ncc = descriptors_a @ descriptors_b.T
    forward = np.argmax(ncc, axis=1)
    backward = np.argmax(ncc, axis=0)
    idx_a = np.arange(len(corners_a))
    mutual = backward[forward] == idx_a
    scores = ncc[idx_a, forward]
    ok = mutual & (scores >= config.min_ncc)

    matches = [
        FeatureMatch(
            pixel_a=PixelCoord(float(corners_a[i, 0]), float(corners_a[i, 1])),
            pixel_b=PixelCoord(float(corners_b[j, 0]), float(corners_b[j, 1])),
            score=float(min(max(scores[i], 0.0), 1.0)),
            index_a=int(i),
            index_b=int(j),
        )
        for i, j in zip(idx_a[ok], forward[ok])
    ]
    matches.sort(key=lambda m: m.score, reverse=True)
    if len(matches) < config.min_matches:
        raise TooFewMatches(f"{len(matches)} matches, need {config.min_matches}")
    return matches


def detect_and_match(
    image_a: np.ndarray,
    image_b: np.ndarray,
    config: FeatureConfig = FeatureConfig(),
) -> list[FeatureMatch]:
    """Detect corners in both images and match them.

    Raises:
        TooFewMatches: When fewer than ``config.min_matches`` survive.
    """
    corners_a, desc_a = detect_features(image_a, config)
    corners_b, desc_b = detect_features(image_b, config)
    return match_features(corners_a, desc_a, corners_b, desc_b, config)

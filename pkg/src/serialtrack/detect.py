"""Particle centroid localization from 2D/3D intensity images.

Two detectors are provided. ``detect_threshold_radial`` segments blobs by
intensity thresholding and refines each centroid with a radial-symmetry
least-squares fit (the point closest to all intensity-gradient lines).
``detect_log`` filters with a Laplacian-of-Gaussian kernel, keeps
non-maximum-suppressed response peaks, and refines per axis with
three-point Gaussian interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .particles import ParticleSet

LOG_CLAMP = 1e-12


@dataclass
class DetectionConfig:
    """Detector selection and thresholds.

    intensity_threshold is a fraction of the image (or response) maximum.
    p_size is the nominal bead radius in pixels; it sets the LoG scale
    sigma = p_size / sqrt(2) and the suppression window. Blob volume
    bounds are in pixels^d; None picks defaults at call time (min 2 to
    reject single-pixel speckle, max (4 p_size)^d to reject merged blobs).
    """

    method: str = "threshold_radial"
    intensity_threshold: float = 0.5
    p_size: int = 3
    min_blob_volume: float | None = None
    max_blob_volume: float | None = None

    def __post_init__(self):
        if not 0.0 < self.intensity_threshold < 1.0:
            raise ValueError("intensity_threshold must lie in (0, 1)")
        if self.p_size < 1:
            raise ValueError("p_size must be >= 1")
        if self.min_blob_volume is not None and self.min_blob_volume < 1:
            raise ValueError("min_blob_volume must be >= 1")

    def blob_bounds(self, d: int) -> tuple[float, float]:
        lo = 2.0 if self.min_blob_volume is None else self.min_blob_volume
        hi = float((4 * self.p_size) ** d) if self.max_blob_volume is None else self.max_blob_volume
        return lo, hi


def _dedupe(points: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Drop centroids within 1 px of a stronger one; returns kept indices."""
    n = len(points)
    if n < 2:
        return np.arange(n)
    pairs = cKDTree(points).query_pairs(1.0, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    order = np.lexsort((*points.T[::-1], -scores))
    keep = np.ones(n, dtype=bool)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    for i, j in pairs:
        loser = i if rank[i] > rank[j] else j
        winner = j if loser == i else i
        if keep[winner]:
            keep[loser] = False
    return np.flatnonzero(keep)


def _finalize(points, scores, frame) -> ParticleSet:
    points = np.asarray(points, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(points):
        keep = _dedupe(points, scores)
        points = points[keep]
        order = np.lexsort(points.T[::-1])
        points = points[order]
    d = points.shape[1] if points.ndim == 2 and len(points) else 2
    if len(points) == 0:
        return ParticleSet(np.zeros((0, d)), frame=frame,
                           warning="no particles found")
    return ParticleSet(points, frame=frame)


def _radial_center(coords, grads):
    """Least-squares point minimizing distance to the gradient lines.

    coords: (m, d) pixel coordinates, grads: (m, d) intensity gradients.
    Solves sum_i (|g|^2 I - g g^T) c = sum_i (|g|^2 I - g g^T) x_i.
    """
    w = np.einsum("ij,ij->i", grads, grads)
    d = coords.shape[1]
    M = np.sum(w) * np.eye(d) - grads.T @ grads
    gx = np.einsum("ij,i->j", coords, w)
    proj = grads.T @ np.einsum("ij,ij->i", grads, coords)
    b = gx - proj
    try:
        c = np.linalg.solve(M, b)
    except np.linalg.LinAlgError:
        return None
    return c


def detect_threshold_radial(image: np.ndarray, cfg: DetectionConfig,
                            frame: int = 0) -> ParticleSet:
    """Threshold-segmented blobs with radial-symmetry subpixel centers.

    Binarizes at intensity_threshold * max(image), labels connected
    components (8-connectivity in 2D, 26 in 3D), discards components
    outside the blob volume bounds, and fits each center over the
    component bounding box dilated by one pixel. Gradients come from
    central differences on the image smoothed with a sigma = 0.5
    Gaussian. Returns an empty flagged set when nothing is found.
    """
    image = np.asarray(image, dtype=np.float64)
    d = image.ndim
    mx = image.max() if image.size else 0.0
    if not np.isfinite(mx) or mx <= 0.0:
        return _finalize(np.zeros((0, d)), np.zeros(0), frame)
    mask = image > cfg.intensity_threshold * mx
    structure = np.ones((3,) * d, dtype=bool)
    labels, ncomp = ndimage.label(mask, structure=structure)
    if ncomp == 0:
        return _finalize(np.zeros((0, d)), np.zeros(0), frame)
    lo_vol, hi_vol = cfg.blob_bounds(d)
    sizes = np.bincount(labels.ravel(), minlength=ncomp + 1)
    good = np.flatnonzero((sizes >= lo_vol) & (sizes <= hi_vol))
    good = good[good > 0]
    if len(good) == 0:
        return _finalize(np.zeros((0, d)), np.zeros(0), frame)

    smoothed = ndimage.gaussian_filter(image, 0.5, mode="nearest")
    grads = np.gradient(smoothed)
    slices = ndimage.find_objects(labels)
    pts, scores = [], []
    for lab in good:
        sl = slices[lab - 1]
        box = tuple(slice(max(0, s.start - 1), min(image.shape[a], s.stop + 1))
                    for a, s in enumerate(sl))
        coords = np.stack(np.meshgrid(*[np.arange(b.start, b.stop) for b in box],
                                      indexing="ij"), axis=-1).reshape(-1, d).astype(np.float64)
        g = np.stack([grads[a][box].ravel() for a in range(d)], axis=-1)
        c = _radial_center(coords, g)
        if c is None:
            patch = image[box]
            w = patch.ravel()
            c = (coords * w[:, None]).sum(axis=0) / w.sum()
        blo = np.array([b.start for b in box], dtype=np.float64)
        bhi = np.array([b.stop - 1 for b in box], dtype=np.float64)
        c = np.clip(c, blo, bhi)
        pts.append(c)
        scores.append(image[box].max())
    return _finalize(np.array(pts), np.array(scores), frame)


def detect_log(image: np.ndarray, cfg: DetectionConfig,
               frame: int = 0) -> ParticleSet:
    """Laplacian-of-Gaussian peaks with per-axis Gaussian interpolation.

    The negated LoG response at scale p_size / sqrt(2) is thresholded at
    intensity_threshold * max(response); local maxima within a
    (2 p_size + 1)^d window survive suppression. Each axis offset is
    x* = x + (ln I- - ln I+) / (2 (ln I- - 2 ln I0 + ln I+)); candidates
    with any offset beyond one pixel (or sitting on the border) are
    dropped. Response values are clamped at 1e-12 of the maximum before
    taking logs.
    """
    image = np.asarray(image, dtype=np.float64)
    d = image.ndim
    sigma_f = cfg.p_size / math.sqrt(2.0)
    resp = -ndimage.gaussian_laplace(image, sigma_f, mode="nearest")
    rmax = resp.max() if resp.size else 0.0
    if not np.isfinite(rmax) or rmax <= 0.0:
        return _finalize(np.zeros((0, d)), np.zeros(0), frame)
    window = 2 * cfg.p_size + 1
    maxf = ndimage.maximum_filter(resp, size=window, mode="nearest")
    peaks = np.argwhere((resp == maxf) & (resp > cfg.intensity_threshold * rmax))
    if len(peaks) == 0:
        return _finalize(np.zeros((0, d)), np.zeros(0), frame)
    interior = np.all((peaks >= 1) & (peaks <= np.array(image.shape) - 2), axis=1)
    peaks = peaks[interior]
    if len(peaks) == 0:
        return _finalize(np.zeros((0, d)), np.zeros(0), frame)

    floor = LOG_CLAMP * rmax
    l0 = np.log(np.maximum(resp[tuple(peaks.T)], floor))
    pos = peaks.astype(np.float64)
    ok = np.ones(len(peaks), dtype=bool)
    for a in range(d):
        step = np.zeros((1, d), dtype=np.int64)
        step[0, a] = 1
        lm = np.log(np.maximum(resp[tuple((peaks - step).T)], floor))
        lp = np.log(np.maximum(resp[tuple((peaks + step).T)], floor))
        denom = lm - 2.0 * l0 + lp
        with np.errstate(divide="ignore", invalid="ignore"):
            off = 0.5 * (lm - lp) / denom
        bad = ~np.isfinite(off) | (np.abs(off) > 1.0)
        ok &= ~bad
        pos[:, a] += np.where(bad, 0.0, off)
    scores = resp[tuple(peaks.T)]
    return _finalize(pos[ok], scores[ok], frame)


def detect(image: np.ndarray, cfg: DetectionConfig, frame: int = 0) -> ParticleSet:
    """Dispatch on cfg.method."""
    if cfg.method == "threshold_radial":
        return detect_threshold_radial(image, cfg, frame)
    if cfg.method == "log_gaussian":
        return detect_log(image, cfg, frame)
    raise ValueError(f"unknown detection method {cfg.method!r}")

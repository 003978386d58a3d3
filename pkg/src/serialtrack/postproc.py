"""Strain post-processing and benchmark metrics.

Deformation gradients come from central differences of the gridded
displacement field (one-sided at boundaries, flagged invalid there);
strains are reported both as small strain and Green-Lagrange. Metric
evaluation associates detections with ground-truth particles to score
tracking ratio, match correctness, and displacement/strain RMS errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import GridTooSmall, SingularF
from .fields import GridField, grid_to_scatter
from .particles import ParticleSet
from .tracking import TrackResult

ASSOC_TOL = 1.0
CORRECT_TOL = 0.5


@dataclass
class TensorField:
    """Per-node d x d tensors on the grid of the source displacement
    field. valid is False where the stencil was one-sided."""

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    valid: np.ndarray

    @property
    def dims(self):
        return self.values.shape[:-2]


def deformation_gradient(u: GridField):
    """F = I + grad(u) by central differences; also returns small strain
    and Green-Lagrange strain fields on the same grid.

    Boundary nodes use one-sided differences and are flagged invalid.
    """
    dims = u.dims
    d = u.dim
    if any(n < 3 for n in dims):
        raise GridTooSmall("need at least 3 nodes per axis for gradients")
    grad = np.zeros((*dims, d, d))
    for comp in range(d):
        g = np.gradient(u.values[..., comp], *u.spacing, edge_order=1)
        if d == 1:
            g = [g]
        for a in range(d):
            grad[..., comp, a] = g[a]
    F = grad + np.eye(d)
    valid = np.ones(dims, dtype=bool)
    for a in range(d):
        lo = tuple(0 if ax == a else slice(None) for ax in range(d))
        hi = tuple(dims[ax] - 1 if ax == a else slice(None) for ax in range(d))
        valid[lo] = False
        valid[hi] = False
    small = 0.5 * (grad + np.swapaxes(grad, -1, -2))
    green = 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(d))
    mk = lambda v: TensorField(u.origin.copy(), u.spacing.copy(), v, valid)
    return mk(F), mk(small), mk(green)


def polar_decompose(F: np.ndarray):
    """F = R U with U = (F^T F)^(1/2) from a symmetric eigendecomposition
    and R = F U^{-1} (proper rotation). Raises SingularF for det <= 1e-12."""
    F = np.asarray(F, dtype=np.float64)
    if np.linalg.det(F) <= 1e-12:
        raise SingularF(f"det F = {np.linalg.det(F):g}")
    C = F.T @ F
    w, V = np.linalg.eigh(C)
    w = np.clip(w, 0.0, None)
    U = (V * np.sqrt(w)) @ V.T
    R = F @ np.linalg.inv(U)
    return R, U


def _associate(detected: ParticleSet, truth: ParticleSet, tol=ASSOC_TOL):
    """Index of the nearest ground-truth particle per detection (-1 when
    none lies within tol)."""
    if detected.n == 0 or truth.n == 0:
        return np.full(detected.n, -1, dtype=np.int64)
    d, i = cKDTree(truth.positions).query(detected.positions, k=1)
    out = np.where(d <= tol, i, -1).astype(np.int64)
    return out


def evaluate(result: TrackResult, truth_a: ParticleSet, truth_b: ParticleSet,
             ratio_denominator: str = "deformed") -> dict:
    """Score one tracked pair against ground truth.

    A valid match is correct when its two detections associate to the
    same ground-truth particle. disp_rms is the RMS error (pooled over
    components) of the regularized field at the correct matches'
    reference positions; disp_rms_raw scores the raw two-frame centroid
    differences. tracking_ratio divides valid matches by the detection
    count of the chosen frame ("deformed" by default: the frame whose
    field of view limits what can be matched under expansion).
    """
    det_a, det_b = result.detected_a, result.detected_b
    v = result.matches.valid_only()
    assoc_a = _associate(det_a, truth_a)
    assoc_b = _associate(det_b, truth_b)
    ga = assoc_a[v.a_indices]
    gb = assoc_b[v.b_indices]
    if truth_a.ids is not None and truth_b.ids is not None:
        ids_a = np.where(ga >= 0, truth_a.ids[np.clip(ga, 0, None)], -1)
        ids_b = np.where(gb >= 0, truth_b.ids[np.clip(gb, 0, None)], -1)
    else:
        ids_a, ids_b = ga, gb
    correct = (ga >= 0) & (gb >= 0) & (ids_a == ids_b)

    denom = det_b.n if ratio_denominator == "deformed" else det_a.n
    metrics = {
        "n_detected_ref": int(det_a.n),
        "n_detected_def": int(det_b.n),
        "n_matched": int(v.n),
        "n_correct": int(correct.sum()),
        "tracking_ratio": v.n / denom if denom else 0.0,
        "tracking_ratio_ref": v.n / det_a.n if det_a.n else 0.0,
        "correct_match_ratio": float(correct.mean()) if v.n else 0.0,
        "iterations": result.iterations,
        "match_ratio_final": result.match_ratio_history[-1] if result.match_ratio_history else 0.0,
    }
    if correct.any():
        if truth_a.ids is not None:
            def rows_for(truth, ids):
                order = np.argsort(truth.ids)
                return order[np.searchsorted(truth.ids[order], ids)]
            u_true = truth_b.positions[rows_for(truth_b, ids_b[correct])] \
                - truth_a.positions[rows_for(truth_a, ids_a[correct])]
        else:
            u_true = truth_b.positions[gb[correct]] - truth_a.positions[ga[correct]]
        raw_err = v.u[correct] - u_true
        metrics["disp_rms_raw"] = float(np.sqrt(np.mean(raw_err**2)))
        u_hat = grid_to_scatter(result.u_hat, v.a_positions[correct])
        hat_err = u_hat - u_true
        metrics["disp_rms"] = float(np.sqrt(np.mean(hat_err**2)))
    else:
        metrics["disp_rms_raw"] = float("nan")
        metrics["disp_rms"] = float("nan")
    return metrics


def strain_rms(u: GridField, deformation_spec) -> dict:
    """Green-Lagrange (and small-strain) RMS error of the gridded field
    against the analytic deformation, interior nodes only."""
    F, small, green = deformation_gradient(u)
    nodes = u.node_coordinates()
    F_true = deformation_spec.gradient(nodes).reshape(*u.dims, u.dim, u.dim)
    d = u.dim
    eye = np.eye(d)
    green_true = 0.5 * (np.swapaxes(F_true, -1, -2) @ F_true - eye)
    grad_true = F_true - eye
    small_true = 0.5 * (grad_true + np.swapaxes(grad_true, -1, -2))
    m = F.valid
    ge = green.values[m] - green_true[m]
    se = small.values[m] - small_true[m]
    return {
        "strain_rms_green": float(np.sqrt(np.mean(ge**2))),
        "strain_rms_small": float(np.sqrt(np.mean(se**2))),
    }


def detection_ratio(detected: ParticleSet, truth: ParticleSet,
                    tol=CORRECT_TOL) -> float:
    """Fraction of in-frame ground-truth particles with a detection
    within tol."""
    mask = truth.in_frame if truth.in_frame is not None else np.ones(truth.n, dtype=bool)
    pts = truth.positions[mask]
    if len(pts) == 0 or detected.n == 0:
        return 0.0
    d, _ = cKDTree(detected.positions).query(pts, k=1)
    return float(np.mean(d <= tol))

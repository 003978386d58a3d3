"""Frame-pair tracking loops for rigid ("hard") and shape-distorting
("soft") particles.

Both loops alternate local descriptor matching, a global screened-Poisson
projection of the scattered displacements, optional ghost removal, and a
dual-variable update, until the global field stops changing (max-norm),
the iteration cap is hit, or the match ratio has been perfect five times.
The hard loop matches detected centroid sets directly (optionally warping
the reference positions forward by a displacement predictor); the soft
loop re-warps the deformed image with the current field and re-detects
centroids every iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .detect import DetectionConfig, detect
from .descriptors import build_descriptors, match_particles, remove_outliers
from .errors import DetectionCollapse, DimMismatch, EmptyAfterRemoval, NoMatches
from .fields import GridField, grid_to_scatter, make_grid, scatter_to_grid, solve_global, update_dual
from .particles import MatchSet, ParticleSet

PERFECT_RATIO_EXIT = 5


@dataclass
class TrackingConfig:
    """All tracking tunables.

    search_radius bounds the candidate search (inf allowed); eps_d is the
    ghost-particle distance (default: half the mean nearest-neighbor
    spacing of the reference set); grid_spacing defaults to
    max(2, 0.5 * mean nearest-neighbor spacing).
    """

    mode: str = "incremental"        # incremental | cumulative | double_frame
    rigidity: str = "hard"           # hard | soft
    k_start: int = 25
    search_radius: float = math.inf
    alpha_over_mu: float = 1e-2
    eps_converge: float = 1e-2
    iter_max: int = 20
    eps_d: float | None = None
    detection: DetectionConfig = dc_field(default_factory=DetectionConfig)
    grid_spacing: float | None = None
    ghost_removal: bool = True
    outlier_r_thresh: float = 4.0
    outlier_eps0: float = 0.1
    outlier_neighborhood: int | None = None
    use_predictor: bool = True
    # once a global field exists, the local step only considers
    # candidates within this many mean spacings of the predicted
    # position (the localizing role of the coupling penalty); the first
    # pass always uses the full search_radius
    refine_radius_factor: float = 3.0

    def __post_init__(self):
        if self.k_start < 1:
            raise ValueError("k_start must be >= 1")
        if self.iter_max < 1:
            raise ValueError("iter_max must be >= 1")
        if self.eps_d is not None and self.eps_d <= 0:
            raise ValueError("eps_d must be positive")
        if self.search_radius <= 0:
            raise ValueError("search_radius must be positive")


@dataclass
class TrackResult:
    """Output of one frame-pair tracking job.

    matches carry scattered total displacements (with outlier validity
    flags); u_hat is the final regularized total-displacement field and
    theta the final dual variable on the same grid.
    """

    matches: MatchSet
    u_hat: GridField
    theta: GridField
    iterations: int
    match_ratio_history: list
    removed_ghosts_a: np.ndarray
    removed_ghosts_b: np.ndarray
    detected_a: ParticleSet
    detected_b: ParticleSet
    eps_d: float


def k_schedule(iteration: int, k_start: int) -> int:
    """Neighbor count for an iteration: k_start halved every two
    iterations (round half up), floored at one."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return max(1, int(math.floor(k_start * 2.0 ** (-iteration / 2.0) + 0.5)))


def _ghost_masks(pos_a, pos_b, u_hat, eps_d):
    from scipy.spatial import cKDTree

    predicted = pos_a + grid_to_scatter(u_hat, pos_a)
    d_a, _ = cKDTree(pos_b).query(predicted, k=1)
    keep_a = d_a < eps_d
    d_b, _ = cKDTree(predicted).query(pos_b, k=1)
    keep_b = d_b < eps_d
    return keep_a, keep_b


def remove_ghosts(p_n: ParticleSet, p_nt: ParticleSet, u_hat: GridField,
                  eps_d: float):
    """Drop particles with no counterpart within eps_d after warping.

    A reference particle P survives iff some deformed particle lies
    within eps_d of P + u_hat(P); a deformed particle Q survives iff some
    warped reference particle lies within eps_d of Q. Both tests evaluate
    u_hat at the reference positions.
    """
    keep_a, keep_b = _ghost_masks(p_n.positions, p_nt.positions, u_hat, eps_d)
    if not keep_a.any() or not keep_b.any():
        raise EmptyAfterRemoval("ghost removal left an empty particle set")
    return p_n.subset(keep_a), p_nt.subset(keep_b)


def warp_image(image: np.ndarray, u_hat: GridField) -> np.ndarray:
    """Inverse warp: output(x) = input(x + u_hat(x)), multilinear
    interpolation, zero outside the input domain."""
    dims = image.shape
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    disp = grid_to_scatter(u_hat, pts)
    coords = (pts + disp).T.reshape(len(dims), *dims)
    return ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0)


def _resolve_grid(cfg, pn, extra_points):
    spacing = cfg.grid_spacing
    if spacing is None:
        spacing = max(2.0, 0.5 * pn.mean_nn_spacing())
    pts = [pn.positions] + [p for p in extra_points if len(p)]
    allp = np.vstack(pts)
    return make_grid(allp.min(axis=0), allp.max(axis=0), spacing)


def _resolve_eps_d(cfg, pn):
    if cfg.eps_d is not None:
        return cfg.eps_d
    s = pn.mean_nn_spacing()
    return 0.5 * s if np.isfinite(s) else 1.0


def _admm_pair_loop(pn, pnt_provider, cfg, grid, u_hat0, warp_a, eps_d):
    """Shared ADMM loop.

    pnt_provider(iteration, u_hat) returns (B positions in matching
    space, B positions in original deformed coordinates, B alive global
    indices, detected ParticleSet). For hard tracking the positions never
    change; soft tracking re-detects from the warped image.

    With warp_a (hard tracking), descriptors use the stable geometry
    given by the external predictor, while the evolving global field
    steers the candidate search and its distance tie-breaks: each pass
    looks for matches around x + u_hat(x). At the end of the neighbor
    schedule (k = 1) this degenerates into a nearest-neighbor search
    around the predicted positions, which recovers particles whose
    neighborhoods were too corrupted for feature matching. Ghost removal
    runs only in that endgame, once the field is supported everywhere
    matching can reach. Soft tracking aligns the frames by warping the
    deformed image instead, so its reference positions stay put.
    """
    n_a = pn.n
    alive_a = np.ones(n_a, dtype=bool)
    ghosts_a, ghosts_b = [], []
    theta = grid.zeros_like()
    u_hat_prev = u_hat0
    u_hat = u_hat0
    pred_at_a = grid_to_scatter(u_hat0, pn.positions) if warp_a else \
        np.zeros_like(pn.positions)
    refine_radius = cfg.refine_radius_factor * pn.mean_nn_spacing()
    solved_once = False
    best_frac = 0.0
    matches = None
    ratio_hist = []
    m_perfect = 0
    iterations = 0
    last_k = cfg.k_start
    detected_b = None

    for it in range(cfg.iter_max):
        k = k_schedule(it, cfg.k_start)
        last_k = k
        iterations = it + 1
        b_match_pos, b_orig_pos, b_alive_idx, detected_b = pnt_provider(it, u_hat)
        a_idx = np.flatnonzero(alive_a)
        a_pos = pn.positions[a_idx]
        a_desc_pos = a_pos + pred_at_a[a_idx]
        if warp_a and solved_once:
            a_query_pos = a_pos + grid_to_scatter(u_hat, a_pos)
        else:
            a_query_pos = a_desc_pos
        cand_radius = min(cfg.search_radius, refine_radius) if solved_once \
            else cfg.search_radius

        desc_a = build_descriptors(a_desc_pos, k, cfg.search_radius)
        desc_b = build_descriptors(b_match_pos, k, cfg.search_radius)
        local = match_particles(desc_a, desc_b, a_query_pos, b_match_pos,
                                cand_radius, a_ref_positions=a_pos)
        ratio = local.n / len(a_idx) if len(a_idx) else 0.0
        ratio_hist.append(ratio)

        ga = a_idx[local.a_indices]
        gb = b_alive_idx[local.b_indices]
        u_total = b_orig_pos[local.b_indices] - pn.positions[ga]
        matches = MatchSet(ga, gb, pn.positions[ga], u_total, n_ref=len(a_idx))
        if k == 1 and solved_once:
            # a pure nearest-neighbor match far from its predicted
            # position is a ghost latching onto a bystander; such samples
            # cluster spatially, so the median outlier test alone cannot
            # reject them. Gate adaptively: well-tracked residuals sit at
            # the localization noise, while bystander distances sit at
            # the inter-particle spacing
            resid = np.linalg.norm(
                b_match_pos[local.b_indices] - a_query_pos[local.a_indices],
                axis=1)
            gate = min(eps_d, max(5.0 * float(np.median(resid)), 0.5))
            matches.valid &= resid <= gate
        matches = remove_outliers(matches, cfg.outlier_r_thresh,
                                  cfg.outlier_eps0, cfg.outlier_neighborhood)
        valid = matches.valid_only()
        # mid-schedule neighbor counts can starve the simultaneous-argmin
        # rule, leaving a coincidence-heavy subset; a field fit to it
        # would poison ghost removal and the dual, so coast on the
        # previous field whenever the valid fraction collapses below
        # half the best fraction seen (or an absolute floor)
        nbrhood = cfg.outlier_neighborhood or (8 if pn.dim == 2 else 26)
        min_support = min(len(a_idx),
                          max(nbrhood + 1, int(math.ceil(0.05 * len(a_idx)))))
        frac = valid.n / len(a_idx) if len(a_idx) else 0.0
        if valid.n == 0 or (it > 0 and (valid.n < min_support
                                        or frac < 0.6 * best_frac)):
            continue
        best_frac = max(best_frac, frac)

        u_grid = scatter_to_grid(valid.a_positions, valid.u, grid)
        rhs = GridField(grid.origin.copy(), grid.spacing.copy(),
                        u_grid.values - theta.values)
        u_hat = solve_global(rhs, cfg.alpha_over_mu)
        solved_once = True

        if cfg.ghost_removal and it > 0 and k == 1:
            keep_a_alive, keep_b_alive = _ghost_masks(
                pn.positions[a_idx], b_orig_pos, u_hat, eps_d)
            if not keep_a_alive.any() or not keep_b_alive.any():
                raise EmptyAfterRemoval("ghost removal left an empty particle set")
            ghosts_a.extend(a_idx[~keep_a_alive].tolist())
            alive_a[a_idx[~keep_a_alive]] = False
            removed_b = b_alive_idx[~keep_b_alive]
            ghosts_b.extend(removed_b.tolist())
            pnt_provider.remove_b(removed_b)

        theta = update_dual(theta, u_hat, u_grid)
        change = float(np.max(np.abs(u_hat.values - u_hat_prev.values)))
        u_hat_prev = u_hat
        if ratio == 1.0:
            m_perfect += 1
        # honor the field-change exit only once matching cannot improve:
        # either every particle matched at the current neighbor count, or
        # the schedule has reached its terminal nearest-neighbor stage
        # (mid-schedule exits would report a descriptor-starved subset)
        stable_matching = ratio == 1.0 or k == 1
        if (change <= cfg.eps_converge and stable_matching) \
                or m_perfect >= PERFECT_RATIO_EXIT:
            break

    if matches is not None:
        # matches computed before a removal pass may reference ghosts
        matches.valid &= alive_a[matches.a_indices]
        matches.valid &= pnt_provider.alive_b(matches.b_indices)
    if matches is None or matches.valid.sum() == 0:
        if last_k == 1:
            raise NoMatches("no particles matched at k = 1 on the final iteration")
        raise NoMatches("no particles matched before the iteration cap")
    return matches, u_hat, theta, iterations, ratio_hist, \
        np.array(ghosts_a, dtype=np.int64), np.array(ghosts_b, dtype=np.int64), detected_b


class _HardProvider:
    """Deformed-set provider for hard tracking: fixed detected positions,
    shrunk by ghost removal."""

    def __init__(self, pnt: ParticleSet):
        self.pnt = pnt
        self.alive = np.ones(pnt.n, dtype=bool)

    def __call__(self, iteration, u_hat):
        idx = np.flatnonzero(self.alive)
        pos = self.pnt.positions[idx]
        return pos, pos, idx, self.pnt

    def remove_b(self, global_indices):
        self.alive[global_indices] = False

    def alive_b(self, global_indices):
        return self.alive[global_indices]


class _SoftProvider:
    """Deformed-set provider for soft tracking: re-warps the image with
    the current field and re-detects every iteration. Matching happens in
    warped-image coordinates; original coordinates are recovered by
    composing the warp at the detected location."""

    def __init__(self, image_nt, cfg):
        self.image = image_nt
        self.cfg = cfg
        self.last_detected = None
        self._dropped = None

    def __call__(self, iteration, u_hat):
        if np.any(u_hat.values):
            img = warp_image(self.image, u_hat)
        else:
            img = self.image
        det = detect(img, self.cfg.detection)
        if det.n < 3:
            raise DetectionCollapse(
                f"warped-image detection found {det.n} particles")
        pos_w = det.positions
        orig = pos_w + grid_to_scatter(u_hat, pos_w)
        self.last_detected = ParticleSet(orig, frame=det.frame)
        self._dropped = np.zeros(det.n, dtype=bool)
        return pos_w, orig, np.arange(det.n), self.last_detected

    def remove_b(self, global_indices):
        # detections are rebuilt next iteration; nothing persists
        self._dropped[global_indices] = True

    def alive_b(self, global_indices):
        if self._dropped is None:
            return np.ones(len(global_indices), dtype=bool)
        return ~self._dropped[global_indices]


def track_hard(p_n: ParticleSet, p_nt: ParticleSet, cfg: TrackingConfig,
               predictor: GridField | None = None) -> TrackResult:
    """Track two detected centroid sets (rigid particle shapes).

    With a predictor field, candidate searches and descriptors use the
    forward-warped reference positions x + predictor(x); displacement
    samples always accumulate the total motion (deformed position minus
    original reference position).
    """
    if p_n.n == 0 or p_nt.n == 0:
        raise NoMatches("cannot track empty particle sets")
    if p_n.dim != p_nt.dim:
        raise DimMismatch("particle sets differ in dimensionality")
    eps_d = _resolve_eps_d(cfg, p_n)
    pred_at_a = (grid_to_scatter(predictor, p_n.positions) if predictor is not None
                 else np.zeros_like(p_n.positions))
    grid = _resolve_grid(cfg, p_n, [p_nt.positions, p_n.positions + pred_at_a])
    u_hat0 = predictor.resample_onto(grid) if predictor is not None else grid.zeros_like()

    provider = _HardProvider(p_nt)
    matches, u_hat, theta, iterations, hist, ga, gb, _ = _admm_pair_loop(
        p_n, provider, cfg, grid, u_hat0, True, eps_d)
    return TrackResult(matches, u_hat, theta, iterations, hist, ga, gb,
                       p_n, p_nt, eps_d)


def track_soft(image_n: np.ndarray, image_nt: np.ndarray, cfg: TrackingConfig,
               predictor: GridField | None = None) -> TrackResult:
    """Track two images whose particles deform with the local strain.

    The reference set is detected once; each iteration re-warps the
    deformed image with the current field, re-detects, and matches the
    re-detections against the reference set. Reported displacements are
    total: the warp at the detection plus the residual match.
    """
    if cfg.rigidity != "soft":
        raise ValueError("track_soft requires cfg.rigidity == 'soft'")
    if image_n.shape != image_nt.shape:
        raise DimMismatch("images differ in shape")
    p_n = detect(image_n, cfg.detection)
    if p_n.n == 0:
        raise NoMatches("no particles detected in the reference image")
    eps_d = _resolve_eps_d(cfg, p_n)
    dims = np.asarray(image_n.shape, dtype=np.float64)
    spacing = cfg.grid_spacing
    if spacing is None:
        spacing = max(2.0, 0.5 * p_n.mean_nn_spacing())
    grid = make_grid(np.zeros(len(dims)), dims - 1.0, spacing)
    u_hat0 = predictor.resample_onto(grid) if predictor is not None else grid.zeros_like()

    provider = _SoftProvider(image_nt, cfg)
    matches, u_hat, theta, iterations, hist, ga, gb, detected_b = _admm_pair_loop(
        p_n, provider, cfg, grid, u_hat0, False, eps_d)
    return TrackResult(matches, u_hat, theta, iterations, hist, ga, gb,
                       p_n, detected_b, eps_d)

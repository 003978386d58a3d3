"""Scale- and rotation-invariant neighborhood descriptors and the local
matching step.

Each particle is described by the distances and angles to its k nearest
neighbors: distances normalized by the first-neighbor distance, angles
measured in a cloud-intrinsic frame (2D: relative to the first-neighbor
direction; 3D: spherical angles in the right-handed frame built from the
first three neighbors). Two particles match when the same candidate
minimizes the distance-feature and angle-feature discrepancies
simultaneously. Descriptor-distance ties break toward the spatially
nearest candidate, which reduces the method to a plain nearest-neighbor
search when k = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .particles import MatchSet

TWO_PI = 2.0 * math.pi
_PARALLEL_TOL = 1e-8


class NeighborIndex:
    """Exact k-nearest-neighbor / fixed-radius queries over one frame."""

    def __init__(self, positions: np.ndarray):
        self.positions = np.asarray(positions, dtype=np.float64)
        self.tree = cKDTree(self.positions)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def knn(self, queries, k, radius=np.inf):
        """Distances and indices of the k nearest points within radius,
        sorted by ascending distance; missing slots hold inf / n."""
        d, i = self.tree.query(np.atleast_2d(queries), k=k,
                               distance_upper_bound=radius)
        if k == 1:
            d, i = d[:, None], i[:, None]
        return d, i

    def within(self, queries, radius):
        """Indices within radius per query, sorted by distance."""
        queries = np.atleast_2d(queries)
        lists = self.tree.query_ball_point(queries, r=radius)
        out = []
        for q, idx in zip(queries, lists):
            idx = np.asarray(idx, dtype=np.int64)
            dd = np.linalg.norm(self.positions[idx] - q, axis=1)
            out.append(idx[np.argsort(dd, kind="stable")])
        return out


@dataclass
class DescriptorSet:
    """Vectorized descriptors for one particle set.

    r, ang (2D) or r, theta, phi (3D) are (n, k) arrays padded with zeros
    beyond the per-particle neighbor count m. ok marks particles with
    enough neighbors (and, in 3D, a non-degenerate local frame).
    """

    r: np.ndarray
    m: np.ndarray
    ok: np.ndarray
    ang: np.ndarray | None = None
    theta: np.ndarray | None = None
    phi: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return 2 if self.ang is not None else 3

    @property
    def k(self) -> int:
        return self.r.shape[1]


def _neighbor_vectors(positions, index, k, search_radius):
    n = len(positions)
    dist, idx = index.knn(positions, k=k + 1, radius=search_radius)
    # drop the query point itself (distance zero at its own index)
    keep = idx != np.arange(n)[:, None]
    # coincident points: self may not be listed; then drop the last slot
    extra = keep.sum(axis=1) > k
    if np.any(extra):
        rows = np.flatnonzero(extra)
        last_true = keep.shape[1] - 1 - np.argmax(keep[rows, ::-1], axis=1)
        keep[rows, last_true] = False
    dists = np.full((n, k), np.inf)
    nbrs = np.full((n, k), -1, dtype=np.int64)
    rows, cols = np.nonzero(keep)
    out_col = np.concatenate([np.arange(c) for c in np.bincount(rows, minlength=n)]) if len(rows) else cols
    dists[rows, out_col] = dist[rows, cols]
    nbrs[rows, out_col] = idx[rows, cols]
    finite = np.isfinite(dists) & (nbrs >= 0) & (nbrs < index.n)
    dists[~finite] = np.inf
    nbrs[~finite] = -1
    m = finite.sum(axis=1)
    return dists, nbrs, m


def build_descriptors(positions: np.ndarray, k: int, search_radius=np.inf,
                      index: NeighborIndex | None = None) -> DescriptorSet:
    """Descriptors for every particle from up to k in-radius neighbors.

    2D needs at least one neighbor; 3D needs three (for the local frame).
    Particles below that are flagged not-ok and skipped by matching.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n, d = positions.shape
    if index is None:
        index = NeighborIndex(positions)
    if n == 0:
        z = np.zeros((0, k))
        return DescriptorSet(r=z, m=np.zeros(0, dtype=np.int64),
                             ok=np.zeros(0, dtype=bool),
                             ang=z if d == 2 else None,
                             theta=None if d == 2 else z,
                             phi=None if d == 2 else z)
    dists, nbrs, m = _neighbor_vectors(positions, index, k, search_radius)

    r = np.zeros((n, k))
    valid = nbrs >= 0
    first = dists[:, 0]
    ok = m >= (1 if d == 2 else min(3, k))
    nz = ok & (first > 0)
    r[nz] = np.where(valid[nz], dists[nz] / first[nz, None], 0.0)
    vecs = np.zeros((n, k, d))
    safe = np.where(valid, nbrs, 0)
    vecs[valid] = (index.positions[safe] - positions[:, None, :])[valid]

    if d == 2:
        ang = np.zeros((n, k))
        theta_abs = np.arctan2(vecs[..., 1], vecs[..., 0])
        rel = np.mod(theta_abs - theta_abs[:, :1], TWO_PI)
        ang[valid] = rel[valid]
        ang[~valid] = 0.0
        ang[~ok] = 0.0
        r[~ok] = 0.0
        return DescriptorSet(r=r, ang=ang, m=m, ok=ok)

    theta = np.zeros((n, k))
    phi = np.zeros((n, k))
    if k < 3:
        # too few slots for a local frame anywhere: angle features tie
        # universally and matching falls back to the distance feature
        # plus the spatial tie-break (nearest neighbor at k = 1)
        return DescriptorSet(r=r, theta=theta, phi=phi, m=m, ok=ok)
    e1 = np.zeros((n, d))
    e2 = np.zeros((n, d))
    e3 = np.zeros((n, d))
    frame_ok = ok.copy()
    rows = np.flatnonzero(ok)
    if len(rows):
        v = vecs[rows]
        nrm = np.linalg.norm(v, axis=2)
        e1r = v[:, 0] / np.maximum(nrm[:, 0:1], 1e-300)
        e3r, okr = _build_e3(v, nrm, e1r, m[rows])
        e2r = np.cross(e3r, e1r)
        e1[rows], e2[rows], e3[rows] = e1r, e2r, e3r
        frame_ok[rows] = okr
    ok = frame_ok
    rows = np.flatnonzero(ok)
    if len(rows):
        v = vecs[rows]
        nrm = np.maximum(np.linalg.norm(v, axis=2), 1e-300)
        x = np.einsum("nkd,nd->nk", v, e1[rows]) / nrm
        y = np.einsum("nkd,nd->nk", v, e2[rows]) / nrm
        z = np.einsum("nkd,nd->nk", v, e3[rows]) / nrm
        th = np.arccos(np.clip(z, -1.0, 1.0))
        ph = np.mod(np.arctan2(y, x), TWO_PI)
        vv = valid[rows]
        tfull = np.zeros_like(th)
        pfull = np.zeros_like(ph)
        tfull[vv] = th[vv]
        pfull[vv] = ph[vv]
        theta[rows] = tfull
        phi[rows] = pfull
    r[~ok] = 0.0
    return DescriptorSet(r=r, theta=theta, phi=phi, m=m, ok=ok)


def build_descriptor(p: int, positions: np.ndarray, index: NeighborIndex,
                     k: int, search_radius=np.inf):
    """Descriptor of a single particle; raises TooFewNeighbors when the
    particle cannot be described (marked unmatchable in set-level calls).

    Returns (r, angles) where angles is a 1-tuple in 2D and a
    (theta, phi) pair in 3D, truncated to the used neighbor count.
    """
    from .errors import TooFewNeighbors

    ds = build_descriptors(positions, k, search_radius, index=index)
    if not ds.ok[p]:
        raise TooFewNeighbors(f"particle {p} has too few usable neighbors")
    m = ds.m[p]
    if ds.dim == 2:
        return ds.r[p, :m], (ds.ang[p, :m],)
    return ds.r[p, :m], (ds.theta[p, :m], ds.phi[p, :m])


def _build_e3(v, nrm, e1, m):
    """Right-handed e3 from the first non-collinear neighbor pair, signed
    so that e3 points toward the next independent neighbor."""
    nrows, k, _ = v.shape
    e3 = np.zeros((nrows, 3))
    ok = np.ones(nrows, dtype=bool)
    unit = v / np.maximum(nrm[..., None], 1e-300)
    for i in range(nrows):
        mi = m[i]
        found = False
        for j in range(1, mi):
            c = np.cross(e1[i], unit[i, j])
            cn = np.linalg.norm(c)
            if cn <= _PARALLEL_TOL:
                continue
            c = c / cn
            for l in range(1, mi):
                if l == j:
                    continue
                s = float(c @ unit[i, l])
                if abs(s) > _PARALLEL_TOL:
                    e3[i] = c if s > 0 else -c
                    found = True
                    break
            if found:
                break
        if not found:
            ok[i] = False
    return e3, ok


@njit(cache=True, parallel=True)
def _match_kernel(ra, anga, ma, oka, rb, angb, mb, okb, apos, bpos,
                  indptr, cand, use_all, nang):
    """Per-particle simultaneous argmin over descriptor distances.

    anga/angb are (n, nang, k): nang = 1 in 2D, 2 in 3D (theta, phi).
    Returns (na, 1 + nang) winner indices per feature, -1 when no
    candidate. Ties break by squared spatial distance, then index order.
    """
    na = ra.shape[0]
    nb = rb.shape[0]
    nfeat = 1 + nang
    best = np.full((na, nfeat), -1, dtype=np.int64)
    for a in prange(na):
        if not oka[a]:
            continue
        bestval = np.full(nfeat, np.inf)
        bestsd = np.full(nfeat, np.inf)
        lo = 0
        hi = nb
        if not use_all:
            lo = indptr[a]
            hi = indptr[a + 1]
        for ci in range(lo, hi):
            b = ci if use_all else cand[ci]
            if not okb[b]:
                continue
            mm = min(ma[a], mb[b])
            if mm < 1:
                continue
            sd = 0.0
            for t in range(apos.shape[1]):
                dt = apos[a, t] - bpos[b, t]
                sd += dt * dt
            inv = 1.0 / mm
            dr = 0.0
            for i in range(mm):
                x = ra[a, i] - rb[b, i]
                dr += x * x
            dr *= inv
            if dr < bestval[0] or (dr == bestval[0] and sd < bestsd[0]):
                bestval[0] = dr
                bestsd[0] = sd
                best[a, 0] = b
            for f in range(nang):
                da = 0.0
                for i in range(mm):
                    x = abs(anga[a, f, i] - angb[b, f, i])
                    if x > math.pi:
                        x = TWO_PI - x
                    da += x * x
                da *= inv
                if da < bestval[1 + f] or (da == bestval[1 + f] and sd < bestsd[1 + f]):
                    bestval[1 + f] = da
                    bestsd[1 + f] = sd
                    best[a, 1 + f] = b
    return best


def match_particles(desc_a: DescriptorSet, desc_b: DescriptorSet,
                    a_positions: np.ndarray, b_positions: np.ndarray,
                    search_radius=np.inf,
                    a_ref_positions: np.ndarray | None = None,
                    b_index: NeighborIndex | None = None) -> MatchSet:
    """Match particles whose distance- and angle-feature argmins coincide.

    a_positions are the (possibly predictor-warped) reference positions
    used for the candidate search; a_ref_positions (default: same) anchor
    the returned displacement samples u = b_position - a_ref_position.
    """
    a_positions = np.atleast_2d(np.asarray(a_positions, dtype=np.float64))
    b_positions = np.atleast_2d(np.asarray(b_positions, dtype=np.float64))
    if a_ref_positions is None:
        a_ref_positions = a_positions
    a_ref_positions = np.atleast_2d(np.asarray(a_ref_positions, dtype=np.float64))
    na = len(a_positions)
    nb = len(b_positions)
    if na == 0 or nb == 0:
        d = a_positions.shape[1] if na else b_positions.shape[1]
        return MatchSet(np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros((0, d)), np.zeros((0, d)), n_ref=na)

    if desc_a.dim == 2:
        anga = desc_a.ang[:, None, :]
        angb = desc_b.ang[:, None, :]
    else:
        anga = np.stack([desc_a.theta, desc_a.phi], axis=1)
        angb = np.stack([desc_b.theta, desc_b.phi], axis=1)

    use_all = not np.isfinite(search_radius)
    if use_all:
        indptr = np.zeros(1, dtype=np.int64)
        cand = np.zeros(1, dtype=np.int64)
    else:
        if b_index is None:
            b_index = NeighborIndex(b_positions)
        lists = b_index.tree.query_ball_point(a_positions, r=float(search_radius))
        counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=na)
        indptr = np.zeros(na + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        cand = np.fromiter((j for l in lists for j in sorted(l)), dtype=np.int64,
                           count=indptr[-1]) if indptr[-1] else np.zeros(1, dtype=np.int64)

    best = _match_kernel(
        np.ascontiguousarray(desc_a.r), np.ascontiguousarray(anga),
        desc_a.m.astype(np.int64), desc_a.ok,
        np.ascontiguousarray(desc_b.r), np.ascontiguousarray(angb),
        desc_b.m.astype(np.int64), desc_b.ok,
        np.ascontiguousarray(a_positions), np.ascontiguousarray(b_positions),
        indptr, cand, use_all, anga.shape[1])

    agree = best[:, 0] >= 0
    for f in range(1, best.shape[1]):
        agree &= best[:, f] == best[:, 0]
    a_idx = np.flatnonzero(agree)
    b_idx = best[a_idx, 0]
    u = b_positions[b_idx] - a_ref_positions[a_idx]
    return MatchSet(a_idx, b_idx, a_ref_positions[a_idx], u, n_ref=na)


def remove_outliers(matches: MatchSet, r_thresh: float = 4.0,
                    eps0: float = 0.1, neighborhood: int | None = None) -> MatchSet:
    """Normalized median test over the nearest matched neighbors.

    r* = |u - median(u_nbr)| / (median(|u_nbr - median(u_nbr)|) + eps0);
    samples with r* > r_thresh are invalidated in one pass. Sets with
    fewer than neighborhood + 1 valid samples pass through unchanged.
    Default neighborhood: 8 in 2D, 26 in 3D.
    """
    d = matches.a_positions.shape[1]
    if neighborhood is None:
        neighborhood = 8 if d == 2 else 26
    idx = np.flatnonzero(matches.valid)
    nv = len(idx)
    if nv < neighborhood + 1:
        return matches
    pos = matches.a_positions[idx]
    u = matches.u[idx]
    tree = cKDTree(pos)
    _, nbr = tree.query(pos, k=neighborhood + 1)
    nbr = nbr[:, 1:]
    u_nbr = u[nbr]
    med = np.median(u_nbr, axis=1)
    fluct = np.linalg.norm(u_nbr - med[:, None, :], axis=2)
    denom = np.median(fluct, axis=1) + eps0
    resid = np.linalg.norm(u - med, axis=1) / denom
    bad = resid > r_thresh
    valid = matches.valid.copy()
    valid[idx[bad]] = False
    return MatchSet(matches.a_indices, matches.b_indices, matches.a_positions,
                    matches.u, valid=valid, n_ref=matches.n_ref)

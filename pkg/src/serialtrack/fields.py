"""Regular-grid displacement fields and the global regularization step.

Scattered displacement samples are averaged into grid cells, holes are
filled by harmonic (Laplacian) inpainting, and the screened-Poisson
problem (I - (alpha/mu) Lap) u = rhs is solved matrix-free with
Jacobi-preconditioned conjugate gradients. The Laplacian is the graph
Laplacian of the grid (homogeneous Neumann boundaries), which preserves
constants exactly and keeps the operator symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, spsolve

from .errors import NoSamples, SolverDiverged

INPAINT_TOL = 1e-6


@dataclass
class GridField:
    """Vector field on a regular axis-aligned node grid.

    origin: coordinates of node (0,...,0); spacing: per-axis node pitch;
    values: (*node_counts, d) array.
    """

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def dims(self) -> tuple:
        return self.values.shape[:-1]

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def copy(self) -> "GridField":
        return GridField(self.origin.copy(), self.spacing.copy(), self.values.copy())

    def zeros_like(self) -> "GridField":
        return GridField(self.origin.copy(), self.spacing.copy(),
                         np.zeros_like(self.values))

    def node_axes(self):
        return [self.origin[a] + self.spacing[a] * np.arange(self.dims[a])
                for a in range(self.dim)]

    def node_coordinates(self) -> np.ndarray:
        mesh = np.meshgrid(*self.node_axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interp(self, points) -> np.ndarray:
        return grid_to_scatter(self, points)

    def resample_onto(self, other: "GridField") -> "GridField":
        """This field's values at another grid's nodes.

        Nodes inside this grid interpolate multilinearly; nodes beyond it
        take the affine-detrended extension (same extension solved fields
        carry), not a clamped copy of the edge values.
        """
        coords = other.node_coordinates()
        vals = grid_to_scatter(self, coords).reshape(*other.dims, self.dim)
        hi = self.origin + (np.asarray(self.dims) - 1) * self.spacing
        inside = np.all((coords >= self.origin) & (coords <= hi), axis=1)
        inside = inside.reshape(other.dims)
        if inside.any() and not inside.all():
            vals = _inpaint(vals, inside)
        return GridField(other.origin.copy(), other.spacing.copy(), vals)


def make_grid(lo, hi, spacing) -> GridField:
    """Zero-valued grid covering [lo, hi] padded by one cell per side."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    d = len(lo)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (d,)).copy()
    origin = lo - spacing
    counts = np.maximum(np.ceil((hi - origin) / spacing).astype(int) + 2, 2)
    return GridField(origin, spacing, np.zeros((*counts, d)))


def _inpaint(values: np.ndarray, defined: np.ndarray,
             pred: np.ndarray | None = None) -> np.ndarray:
    """Fill undefined nodes from the defined ones.

    A global affine trend (given, or fit to the defined nodes) is
    removed first and only the residual is extended harmonically, so
    affine fields extrapolate exactly instead of flattening toward the
    grid edges; defined nodes keep their values untouched.
    """
    if defined.all():
        return values
    dims = defined.shape
    nd = len(dims)
    ncomp = values.shape[-1]
    flat_vals = values.reshape(-1, ncomp)
    dmask = defined.ravel()
    if pred is None:
        idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims],
                                   indexing="ij"), axis=-1).reshape(-1, nd)
        nd_def = int(dmask.sum())
        X = np.hstack([np.ones((nd_def, 1)), idx[dmask]])
        trend = None
        if nd_def >= nd + 2:
            trend = _robust_trend(X, flat_vals[dmask], nd)
        if trend is None:
            mean = flat_vals[dmask].mean(axis=0)
            trend = np.zeros((nd + 1, ncomp))
            trend[0] = mean
        pred = np.hstack([np.ones((len(idx), 1)), idx]) @ trend
    else:
        pred = pred.reshape(-1, ncomp)
    resid = np.where(dmask[:, None], flat_vals - pred, 0.0).reshape(values.shape)
    filled = pred.reshape(values.shape) + _inpaint_harmonic(resid, defined)
    out = values.copy()
    out.reshape(-1, ncomp)[~dmask] = filled.reshape(-1, ncomp)[~dmask]
    return out


def _robust_trend(X, y, nd):
    """Affine trend tolerant of bad anchors.

    Small sets get an exhaustive minimal-subset consensus (deterministic;
    breakdown point above one half), large sets a few reweighted
    least-squares passes; both end with a plain refit on the consensus
    inliers. Returns None when degenerate.
    """
    from itertools import combinations, islice

    n = len(y)
    if n <= 40:
        p = nd + 1
        best_inliers = None
        scale_floor = max(1.0, 0.01 * float(np.abs(y).max()))
        for combo in islice(combinations(range(n), p), 20000):
            Xs = X[list(combo)]
            try:
                beta = np.linalg.solve(Xs, y[list(combo)])
            except np.linalg.LinAlgError:
                continue
            resid = np.linalg.norm(y - X @ beta, axis=1)
            inliers = resid < scale_floor
            if best_inliers is None or inliers.sum() > best_inliers.sum():
                best_inliers = inliers
        if best_inliers is not None and best_inliers.sum() >= p + 1:
            beta, _, rank, _ = np.linalg.lstsq(X[best_inliers], y[best_inliers],
                                               rcond=None)
            if rank == p:
                return beta
    w = np.ones(n)
    beta = None
    for _ in range(4):
        Xw = X * w[:, None]
        beta, _, rank, _ = np.linalg.lstsq(Xw, y * w[:, None], rcond=None)
        if rank < nd + 1:
            return None
        resid = np.linalg.norm(y - X @ beta, axis=1)
        scale = np.median(resid) * 1.4826 + 1e-12
        w = 1.0 / np.sqrt(1.0 + (resid / (3.0 * scale)) ** 2)
    return beta


def _inpaint_harmonic(values: np.ndarray, defined: np.ndarray) -> np.ndarray:
    """Fill undefined nodes with the discrete harmonic extension of the
    defined values (the fixed point of relaxing each empty node to the
    average of its neighbors)."""
    if defined.all():
        return values
    dims = defined.shape
    nd = len(dims)
    empty_idx = np.flatnonzero(~defined.ravel())
    ne = len(empty_idx)
    eid = np.full(defined.size, -1, dtype=np.int64)
    eid[empty_idx] = np.arange(ne)
    flat_defined = defined.ravel()
    nodes = np.arange(defined.size).reshape(dims)

    deg = np.zeros(ne)
    rows, cols, vals = [], [], []
    ncomp = values.shape[-1]
    b = np.zeros((ne, ncomp))
    flat_vals = values.reshape(-1, ncomp)
    for a in range(nd):
        sl_lo = tuple(slice(None, -1) if ax == a else slice(None) for ax in range(nd))
        sl_hi = tuple(slice(1, None) if ax == a else slice(None) for ax in range(nd))
        na, nb_ = nodes[sl_lo].ravel(), nodes[sl_hi].ravel()
        for p, q in ((na, nb_), (nb_, na)):
            pe = ~flat_defined[p]
            src = p[pe]
            dst = q[pe]
            e = eid[src]
            np.add.at(deg, e, 1.0)
            to_def = flat_defined[dst]
            np.add.at(b, e[to_def], flat_vals[dst[to_def]])
            ee = ~to_def
            rows.append(e[ee])
            cols.append(eid[dst[ee]])
            vals.append(-np.ones(int(ee.sum())))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    A = sparse.coo_matrix((vals, (rows, cols)), shape=(ne, ne)).tocsr()
    A = A + sparse.diags(deg)
    x = spsolve(A.tocsc(), b)
    out = values.copy().reshape(-1, ncomp)
    out[empty_idx] = np.atleast_2d(x.reshape(ne, ncomp))
    return out.reshape(values.shape)


def scatter_to_grid(positions: np.ndarray, u: np.ndarray,
                    grid: GridField) -> GridField:
    """Average samples into their containing cells, then inpaint empties.

    A sample belongs to the nearest node. Nodes holding samples keep a
    position-corrected cell average: with enough samples (d + 2) the cell
    fits u affinely and takes the fit value at the node, which removes
    the O(|grad u| h) offset bias a plain average would carry on
    non-constant fields; sparser cells take the plain average. Empty
    nodes get the harmonic fill. Raises NoSamples with zero samples.
    """
    positions = np.atleast_2d(positions)
    u = np.atleast_2d(u)
    if len(positions) == 0:
        raise NoSamples("cannot grid zero displacement samples")
    dims = grid.dims
    d = grid.dim
    nn = int(np.prod(dims))
    idx = np.rint((positions - grid.origin) / grid.spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(dims) - 1)
    flat = np.ravel_multi_index(tuple(idx.T), dims)
    counts = np.bincount(flat, minlength=nn).astype(np.float64)
    sums = np.zeros((nn, d))
    np.add.at(sums, flat, u)
    occupied = counts > 0
    vals = np.zeros_like(sums)
    vals[occupied] = sums[occupied] / counts[occupied, None]

    rich = np.flatnonzero(counts >= d + 2)
    anchored = np.zeros(nn, dtype=bool)
    if len(rich):
        order = np.argsort(flat, kind="stable")
        sorted_flat = flat[order]
        node_pos = grid.origin + np.stack(
            np.unravel_index(rich, dims), axis=1) * grid.spacing
        starts = np.searchsorted(sorted_flat, rich, side="left")
        stops = np.searchsorted(sorted_flat, rich, side="right")
        for cell, s0, s1, npos in zip(rich, starts, stops, node_pos):
            rows = order[s0:s1]
            X = np.hstack([np.ones((len(rows), 1)),
                           positions[rows] - npos])
            XtX = X.T @ X
            if np.linalg.cond(XtX) > 1e8:
                continue
            inv = np.linalg.inv(XtX)
            # leverage of the node point: keep the fit only when the
            # sample geometry actually constrains the value there
            if inv[0, 0] > 0.5:
                continue
            beta = inv @ (X.T @ u[rows])
            vals[cell] = beta[0]
            anchored[cell] = True

    # with anchors available, thinly occupied cells are better inpainted
    # from them than pinned to a plain average (whose O(|grad u| h)
    # position bias poisons large-gradient fields); with no anchors at
    # all, keep every occupied cell (small-data mode)
    defined = anchored if anchored.any() else occupied
    vals[~defined] = 0.0
    vals = vals.reshape(*dims, d)

    # the fill trend comes from the raw samples at their true positions:
    # node-assigned values carry an O(|grad u| h) offset that a node-fit
    # trend would inherit
    trend = None
    if len(positions) >= d + 2:
        sub = positions
        usub = u
        if len(positions) > 2000:
            step = len(positions) // 2000 + 1
            sub, usub = positions[::step], u[::step]
        trend = _robust_trend(
            np.hstack([np.ones((len(sub), 1)), sub]), usub, d)
    pred = None
    if trend is not None:
        coords = grid.node_coordinates()
        pred = np.hstack([np.ones((len(coords), 1)), coords]) @ trend
    vals = _inpaint(vals, defined.reshape(dims), pred=pred)
    return GridField(grid.origin.copy(), grid.spacing.copy(), vals)


def _laplacian(v: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Graph Laplacian with per-axis 1/h^2 weights (Neumann boundary)."""
    out = np.zeros_like(v)
    nd = v.ndim
    for a in range(nd):
        h2 = spacing[a] * spacing[a]
        diff = np.diff(v, axis=a) / h2
        lo = tuple(slice(None, -1) if ax == a else slice(None) for ax in range(nd))
        hi = tuple(slice(1, None) if ax == a else slice(None) for ax in range(nd))
        out[lo] += diff
        out[hi] -= diff
    return out


def _screened_diag(dims, spacing, c) -> np.ndarray:
    diag = np.ones(dims)
    for a in range(len(dims)):
        nbrs = np.full(dims[a], 2.0)
        nbrs[0] = nbrs[-1] = 1.0
        shape = [1] * len(dims)
        shape[a] = dims[a]
        diag = diag + c * nbrs.reshape(shape) / spacing[a] ** 2
    return diag


def solve_global(rhs: GridField, alpha_over_mu: float) -> GridField:
    """Solve (I - (alpha/mu) Lap) u = rhs componentwise.

    Conjugate gradients on the SPD operator, Jacobi preconditioned, to
    relative residual 1e-8, capped at ten iterations per grid node.
    alpha_over_mu = 0 returns rhs unchanged.
    """
    if alpha_over_mu < 0:
        raise ValueError("alpha_over_mu must be nonnegative")
    if alpha_over_mu == 0.0:
        return rhs.copy()
    dims = rhs.dims
    d = rhs.dim
    n = int(np.prod(dims))
    c = float(alpha_over_mu)
    spacing = rhs.spacing

    def matvec(x):
        v = x.reshape(dims)
        return (v - c * _laplacian(v, spacing)).ravel()

    inv_diag = 1.0 / _screened_diag(dims, spacing, c).ravel()
    A = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    M = LinearOperator((n, n), matvec=lambda x: inv_diag * x, dtype=np.float64)
    out = np.empty_like(rhs.values)
    maxiter = 10 * n
    for comp in range(d):
        b = rhs.values[..., comp].ravel()
        if not np.all(np.isfinite(b)):
            raise ValueError("rhs must be finite")
        if np.allclose(b, 0.0):
            out[..., comp] = 0.0
            continue
        # a couple of orders tighter than the 1e-8 contract so that the
        # solution error (not just the residual) clears it
        x, info = cg(A, b, x0=b.copy(), rtol=1e-11, atol=0.0, maxiter=maxiter, M=M)
        if info != 0:
            raise SolverDiverged(f"cg failed with info={info} on component {comp}")
        out[..., comp] = x.reshape(dims)
    return GridField(rhs.origin.copy(), rhs.spacing.copy(), out)


def grid_to_scatter(field: GridField, points) -> np.ndarray:
    """Multilinear interpolation at the given points; queries outside the
    grid clamp to the boundary cell."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dims = field.dims
    d = field.dim
    t = (points - field.origin) / field.spacing
    i0 = np.floor(t).astype(np.int64)
    i0 = np.clip(i0, 0, np.asarray(dims) - 2)
    frac = np.clip(t - i0, 0.0, 1.0)
    out = np.zeros((len(points), field.values.shape[-1]))
    for corner in range(1 << d):
        w = np.ones(len(points))
        idx = i0.copy()
        for a in range(d):
            if corner >> a & 1:
                idx[:, a] += 1
                w = w * frac[:, a]
            else:
                w = w * (1.0 - frac[:, a])
        out += w[:, None] * field.values[tuple(idx.T)]
    return out


def update_dual(theta: GridField, u_hat: GridField,
                u_on_grid: GridField) -> GridField:
    """theta' = theta + u_hat - u_on_grid, nodewise."""
    return GridField(theta.origin.copy(), theta.spacing.copy(),
                     theta.values + u_hat.values - u_on_grid.values)

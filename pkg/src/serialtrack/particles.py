"""Core particle containers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class ParticleSet:
    """Subpixel centroid coordinates for one frame.

    positions : (n, d) float64 array, d in {2, 3}, pixel units with the
        origin at the center of pixel (0, 0[, 0]).
    frame : frame index within a sequence.
    ids : optional ground-truth particle ids (synthetic data bookkeeping).
    in_frame : optional bool mask; False marks particles displaced outside
        the image domain (kept so tracking-ratio denominators stay exact).
    warning : set when a detector legitimately found nothing.
    """

    positions: np.ndarray
    frame: int = 0
    ids: np.ndarray | None = None
    in_frame: np.ndarray | None = None
    warning: str | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if self.positions.size == 0:
            self.positions = self.positions.reshape(0, self.positions.shape[-1] if self.positions.ndim > 1 else 2)
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.in_frame is not None:
            self.in_frame = np.asarray(self.in_frame, dtype=bool)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def subset(self, mask_or_idx) -> "ParticleSet":
        """New set restricted to ``mask_or_idx`` (ids/flags follow)."""
        return ParticleSet(
            positions=self.positions[mask_or_idx],
            frame=self.frame,
            ids=None if self.ids is None else self.ids[mask_or_idx],
            in_frame=None if self.in_frame is None else self.in_frame[mask_or_idx],
        )

    def mean_nn_spacing(self) -> float:
        """Mean distance to the first nearest neighbor."""
        if self.n < 2:
            return float("inf")
        tree = cKDTree(self.positions)
        d, _ = tree.query(self.positions, k=2)
        return float(np.mean(d[:, 1]))


@dataclass
class MatchSet:
    """Per-particle correspondences between two frames.

    a_indices / b_indices index into the matched reference and deformed
    ParticleSets. ``u`` holds the total displacement sample (deformed
    position minus reference position, pixel units) and ``a_positions``
    the reference positions the samples are anchored at. ``valid`` is
    cleared by outlier removal.
    """

    a_indices: np.ndarray
    b_indices: np.ndarray
    a_positions: np.ndarray
    u: np.ndarray
    valid: np.ndarray = field(default=None)
    n_ref: int = 0

    def __post_init__(self):
        self.a_indices = np.asarray(self.a_indices, dtype=np.int64)
        self.b_indices = np.asarray(self.b_indices, dtype=np.int64)
        self.a_positions = np.atleast_2d(np.asarray(self.a_positions, dtype=np.float64))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        if self.valid is None:
            self.valid = np.ones(len(self.a_indices), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def n(self) -> int:
        return len(self.a_indices)

    @property
    def match_ratio(self) -> float:
        return self.n / self.n_ref if self.n_ref else 0.0

    def valid_only(self) -> "MatchSet":
        m = self.valid
        return MatchSet(self.a_indices[m], self.b_indices[m],
                        self.a_positions[m], self.u[m], n_ref=self.n_ref)

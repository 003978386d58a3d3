"""Synthetic data generation: seeded particle sets, prescribed deformation
fields, and rendered bead images.

Images are sampled at pixel centers; a particle at integer coordinates
peaks exactly on that pixel. The default bead is an isotropic Gaussian
spot whose visible diameter is about five pixels at sigma = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, InfeasibleDensity
from .particles import ParticleSet

# densest-packing fractions used by the feasibility pre-check
_ETA = {2: math.pi * math.sqrt(3.0) / 6.0, 3: math.pi / math.sqrt(18.0)}


@dataclass(frozen=True)
class DeformationSpec:
    """One prescribed deformation field.

    kind is one of translation / rotation / uniaxial_stretch /
    simple_shear / star_pattern. Only the fields relevant to the kind are
    read. Angles are degrees about the z-axis, stretches are ratios, and
    shear is tan(gamma). ``plane`` names the displaced axis followed by
    the gradient axis ("xy" means u_x varies with y).
    """

    kind: str
    vector: tuple = ()
    angle_deg: float = 0.0
    center: tuple = ()
    axis: int = 0
    ratio: float = 1.0
    plane: str = "xy"
    shear: float = 0.0
    amplitude: float = 2.0
    period_start: float = 10.0
    period_end: float = 300.0
    period_span: float = 4001.0

    def __post_init__(self):
        if self.kind == "rotation" and not (0.0 <= self.angle_deg < 360.0):
            raise ValueError("rotation angle must lie in [0, 360) degrees")
        if self.kind == "uniaxial_stretch" and self.ratio <= 0.0:
            raise ValueError("stretch ratio must be positive")
        if self.kind == "simple_shear" and self.shear < 0.0:
            raise ValueError("tan(gamma) must be nonnegative")

    @classmethod
    def translation(cls, vector):
        return cls(kind="translation", vector=tuple(float(v) for v in vector))

    @classmethod
    def rotation(cls, angle_deg, center):
        return cls(kind="rotation", angle_deg=float(angle_deg),
                   center=tuple(float(c) for c in center))

    @classmethod
    def uniaxial_stretch(cls, axis, ratio, center):
        return cls(kind="uniaxial_stretch", axis=int(axis), ratio=float(ratio),
                   center=tuple(float(c) for c in center))

    @classmethod
    def simple_shear(cls, plane, shear, center):
        return cls(kind="simple_shear", plane=plane, shear=float(shear),
                   center=tuple(float(c) for c in center))

    @classmethod
    def star_pattern(cls, amplitude=2.0, period_start=10.0, period_end=300.0,
                     period_span=4001.0):
        return cls(kind="star_pattern", amplitude=float(amplitude),
                   period_start=float(period_start), period_end=float(period_end),
                   period_span=float(period_span))

    def _axes(self, d):
        names = "xyz"
        a, g = self.plane[0], self.plane[1]
        return names.index(a), names.index(g)

    def star_period(self, x):
        """Spatial period at 0-based pixel coordinate x (linear law)."""
        return self.period_start + (self.period_end - self.period_start) / self.period_span * np.asarray(x, dtype=np.float64)

    def displacement(self, positions: np.ndarray) -> np.ndarray:
        """Displacement u(x) evaluated exactly at the given positions."""
        pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        d = pos.shape[1]
        u = np.zeros_like(pos)
        if self.kind == "translation":
            if len(self.vector) != d:
                raise DimMismatch(f"translation vector has {len(self.vector)} components for {d}D points")
            u[:] = np.asarray(self.vector)
        elif self.kind == "rotation":
            if len(self.center) != d:
                raise DimMismatch("rotation center dimensionality mismatch")
            th = math.radians(self.angle_deg)
            c, s = math.cos(th), math.sin(th)
            dx = pos[:, 0] - self.center[0]
            dy = pos[:, 1] - self.center[1]
            u[:, 0] = c * dx - s * dy - dx
            u[:, 1] = s * dx + c * dy - dy
        elif self.kind == "uniaxial_stretch":
            if len(self.center) != d:
                raise DimMismatch("stretch center dimensionality mismatch")
            if not 0 <= self.axis < d:
                raise DimMismatch("stretch axis outside point dimensionality")
            u[:, self.axis] = (self.ratio - 1.0) * (pos[:, self.axis] - self.center[self.axis])
        elif self.kind == "simple_shear":
            if len(self.center) != d:
                raise DimMismatch("shear center dimensionality mismatch")
            ia, ig = self._axes(d)
            if ia >= d or ig >= d:
                raise DimMismatch(f"shear plane {self.plane!r} outside point dimensionality")
            u[:, ia] = self.shear * (pos[:, ig] - self.center[ig])
        elif self.kind == "star_pattern":
            if d != 2:
                raise DimMismatch("star pattern is defined for 2D domains only")
            lam = self.star_period(pos[:, 0])
            u[:, 1] = self.amplitude * np.sin(2.0 * math.pi * pos[:, 0] / lam)
        else:
            raise ValueError(f"unknown deformation kind {self.kind!r}")
        return u

    def gradient(self, positions: np.ndarray) -> np.ndarray:
        """Analytic deformation gradient F = I + du/dx at each position."""
        pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n, d = pos.shape
        F = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        if self.kind == "translation":
            pass
        elif self.kind == "rotation":
            th = math.radians(self.angle_deg)
            c, s = math.cos(th), math.sin(th)
            F[:, 0, 0] = c
            F[:, 0, 1] = -s
            F[:, 1, 0] = s
            F[:, 1, 1] = c
        elif self.kind == "uniaxial_stretch":
            F[:, self.axis, self.axis] = self.ratio
        elif self.kind == "simple_shear":
            ia, ig = self._axes(d)
            F[:, ia, ig] = self.shear
        elif self.kind == "star_pattern":
            # d/dx [A sin(2 pi x / lam(x))] with lam linear in x
            a = self.period_start
            b = (self.period_end - self.period_start) / self.period_span
            x = pos[:, 0]
            lam = a + b * x
            phase = 2.0 * math.pi * x / lam
            dphase = 2.0 * math.pi * a / lam**2
            F[:, 1, 0] = self.amplitude * np.cos(phase) * dphase
        return F


@dataclass(frozen=True)
class SynthImageSpec:
    """Rendering recipe for one synthetic frame.

    dims are per-axis pixel (voxel) extents. seeding_density is particles
    per pixel (2D) or voxel (3D). Noise is additive zero-mean Gaussian
    with standard deviation noise_pct * psf_amplitude. min_dist defaults
    to the visible bead diameter (5 * sigma). intensity_max, when set,
    clips the final image to [0, intensity_max]; by default no clipping
    is applied so background noise keeps its nominal distribution.
    """

    dims: tuple
    seeding_density: float
    psf_amplitude: float = 1.0
    psf_sigma: float = 1.0
    noise_pct: float = 0.0
    rng_seed: int = 0
    min_dist: float | None = None
    intensity_max: float | None = None

    def __post_init__(self):
        if self.seeding_density <= 0:
            raise ValueError("seeding_density must be positive")
        if self.psf_sigma <= 0:
            raise ValueError("psf_sigma must be positive")
        if self.noise_pct < 0:
            raise ValueError("noise_pct must be nonnegative")
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))

    @property
    def dim(self) -> int:
        return len(self.dims)

    @property
    def separation(self) -> float:
        return 5.0 * self.psf_sigma if self.min_dist is None else self.min_dist


def poisson_disc_sample(dims, min_dist, density, seed) -> ParticleSet:
    """Seed round(density * volume) points with pairwise spacing >= min_dist.

    Dart throwing against a background grid (cell edge min_dist / sqrt(d),
    so one point per cell). Points keep min_dist / 2 clearance from the
    domain boundary. Raises InfeasibleDensity if the request exceeds 40%
    of the densest-packing count or the candidate budget (100x the target)
    runs out.
    """
    dims = tuple(int(v) for v in dims)
    d = len(dims)
    if d not in (2, 3):
        raise DimMismatch("dims must be 2D or 3D")
    volume = float(np.prod(dims))
    target = int(round(density * volume))
    if target == 0:
        return ParticleSet(np.zeros((0, d)), ids=np.zeros(0, dtype=np.int64),
                           in_frame=np.zeros(0, dtype=bool))
    r = min_dist / 2.0
    ball = math.pi * r * r if d == 2 else 4.0 / 3.0 * math.pi * r**3
    n_max = _ETA[d] * volume / ball
    if target > 0.4 * n_max:
        raise InfeasibleDensity(
            f"{target} particles at spacing {min_dist} exceed 40% of the "
            f"packing limit ({n_max:.0f}) in domain {dims}")

    lo = np.full(d, min_dist / 2.0)
    hi = np.array([s - 1 - min_dist / 2.0 for s in dims])
    if np.any(hi <= lo):
        raise InfeasibleDensity(f"domain {dims} too small for boundary margin {min_dist / 2}")

    cell = min_dist / math.sqrt(d)
    gdims = tuple(int(math.ceil((s - 1) / cell)) + 1 for s in dims)
    grid = np.full(gdims, -1, dtype=np.int64)
    # exclusion radius spans ceil(sqrt(d)) cells plus one for safety
    reach = int(math.ceil(math.sqrt(d))) + 1

    rng = np.random.default_rng(seed)
    pts = np.empty((target, d))
    count = 0
    budget = 100 * target
    drawn = 0
    min_sq = min_dist * min_dist
    while count < target:
        if drawn >= budget:
            raise InfeasibleDensity(
                f"placed {count}/{target} particles after {drawn} candidates")
        cand = lo + rng.random(d) * (hi - lo)
        drawn += 1
        ci = tuple(int(cand[a] / cell) for a in range(d))
        sl = tuple(slice(max(0, ci[a] - reach), min(gdims[a], ci[a] + reach + 1))
                   for a in range(d))
        nearby = grid[sl]
        occ = nearby[nearby >= 0]
        if occ.size:
            diff = pts[occ] - cand
            if np.min(np.einsum("ij,ij->i", diff, diff)) < min_sq:
                continue
        pts[count] = cand
        grid[ci] = count
        count += 1

    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    return ParticleSet(pts, ids=np.arange(target, dtype=np.int64),
                       in_frame=np.ones(target, dtype=bool))


def apply_deformation(particles: ParticleSet, spec: DeformationSpec,
                      dims=None) -> ParticleSet:
    """Move particles by the exact field x + u(x).

    Particles leaving the domain are kept and flagged out-of-frame when
    ``dims`` is given (pixel-center convention: inside means every
    coordinate lies in [0, dims_i - 1]).
    """
    u = spec.displacement(particles.positions)
    newpos = particles.positions + u
    in_frame = particles.in_frame
    if dims is not None:
        dims = np.asarray(dims, dtype=np.float64)
        in_frame = np.all((newpos >= 0.0) & (newpos <= dims - 1.0), axis=1)
    return ParticleSet(newpos, frame=particles.frame, ids=particles.ids,
                       in_frame=in_frame)


def _splat_windows(img, positions, amp, sigma, cov):
    d = img.ndim
    dims = img.shape
    if cov is not None:
        cov = np.asarray(cov, dtype=np.float64)
        cinv = np.linalg.inv(cov)
        wrad = int(math.ceil(6.0 * math.sqrt(np.max(np.linalg.eigvalsh(cov)))))
    else:
        wrad = int(math.ceil(6.0 * sigma))
    for p in positions:
        lo = [max(0, int(math.floor(p[a])) - wrad) for a in range(d)]
        hi = [min(dims[a], int(math.floor(p[a])) + wrad + 1) for a in range(d)]
        if any(lo[a] >= hi[a] for a in range(d)):
            continue
        axes = [np.arange(lo[a], hi[a], dtype=np.float64) - p[a] for a in range(d)]
        if cov is None:
            gs = [np.exp(-ax**2 / (2.0 * sigma * sigma)) for ax in axes]
            if d == 2:
                blob = np.multiply.outer(gs[0], gs[1])
            else:
                blob = np.multiply.outer(np.multiply.outer(gs[0], gs[1]), gs[2])
        else:
            mesh = np.meshgrid(*axes, indexing="ij")
            q = np.zeros_like(mesh[0])
            for i in range(d):
                for j in range(d):
                    q += mesh[i] * cinv[i, j] * mesh[j]
            blob = np.exp(-0.5 * q)
        sl = tuple(slice(lo[a], hi[a]) for a in range(d))
        img[sl] += amp * blob


def render_image(particles: ParticleSet, spec: SynthImageSpec,
                 cov=None) -> np.ndarray:
    """Render superposed Gaussian beads plus optional white noise.

    intensity(x) = sum_P A exp(-|x - P|^2 / (2 sigma^2)) sampled at pixel
    centers. Out-of-frame particles still contribute their in-frame
    tails. ``cov`` replaces the isotropic sigma^2 * I with a full
    covariance (anisotropic beads for shape-distortion studies).

    Each bead only touches pixels within 6 sigma of its center; beyond
    that the Gaussian is below 2e-8 of the peak.
    """
    if particles.dim != spec.dim:
        raise DimMismatch(f"{particles.dim}D particles vs {spec.dim}D image spec")
    img = np.zeros(spec.dims, dtype=np.float64)
    _splat_windows(img, particles.positions, spec.psf_amplitude, spec.psf_sigma, cov)
    if spec.noise_pct > 0:
        rng = np.random.default_rng(spec.rng_seed)
        img += rng.normal(0.0, spec.noise_pct * spec.psf_amplitude, size=img.shape)
    if spec.intensity_max is not None:
        np.clip(img, 0.0, spec.intensity_max, out=img)
    return img

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from serialtrack.particles import ParticleSet
from serialtrack.synth import SynthImageSpec, render_image


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def render_blobs(positions, dims, sigma=1.0, amplitude=1.0, noise=0.0,
                 seed=0, cov=None):
    ps = positions if isinstance(positions, ParticleSet) else ParticleSet(np.atleast_2d(positions))
    spec = SynthImageSpec(dims=dims, seeding_density=1e-6, psf_amplitude=amplitude,
                          psf_sigma=sigma, noise_pct=noise, rng_seed=seed)
    return render_image(ps, spec, cov=cov)


def random_cloud(rng, n, d, scale=100.0):
    return rng.random((n, d)) * scale


def rotation_matrix(rng, d):
    if d == 2:
        th = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(th), np.sin(th)
        return np.array([[c, -s], [s, c]])
    # random proper rotation from QR of a Gaussian matrix
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q

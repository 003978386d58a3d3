import numpy as np
import pytest

from serialtrack.errors import GridTooSmall, SingularF
from serialtrack.fields import GridField
from serialtrack.postproc import deformation_gradient, polar_decompose, strain_rms
from serialtrack.synth import DeformationSpec


def field_from(fn, n=16, spacing=1.0, d=2):
    axes = [np.arange(n) * spacing for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = fn(pts).reshape(*([n] * d), d)
    return GridField(np.zeros(d), np.full(d, spacing), vals)


class TestDeformationGradient:
    def test_constant_gives_identity(self):
        u = field_from(lambda p: np.zeros_like(p) + [1.5, -2.0])
        F, small, green = deformation_gradient(u)
        assert np.abs(F.values - np.eye(2)).max() < 1e-12

    def test_simple_shear_linear_exact(self):
        u = field_from(lambda p: np.stack([0.2 * p[:, 1], np.zeros(len(p))], axis=1))
        F, small, green = deformation_gradient(u)
        interior = F.values[F.valid]
        assert np.abs(interior - [[1.0, 0.2], [0.0, 1.0]]).max() < 1e-10

    def test_stretch_green_lagrange(self):
        u = field_from(lambda p: np.stack([0.3 * p[:, 0], np.zeros(len(p))], axis=1))
        F, small, green = deformation_gradient(u)
        g_interior = green.values[F.valid]
        assert np.abs(g_interior[:, 0, 0] - 0.345).max() < 1e-10
        s_interior = small.values[F.valid]
        assert np.abs(s_interior[:, 0, 0] - 0.3).max() < 1e-10

    def test_boundary_flagged(self):
        u = field_from(lambda p: np.zeros_like(p), n=5)
        F, _, _ = deformation_gradient(u)
        assert not F.valid[0, :].any() and not F.valid[:, 0].any()
        assert F.valid[2, 2]

    def test_too_small_grid(self):
        u = GridField(np.zeros(2), np.ones(2), np.zeros((2, 5, 2)))
        with pytest.raises(GridTooSmall):
            deformation_gradient(u)

    def test_convergence_order_on_smooth_field(self):
        def u_fn(p):
            return np.stack([np.sin(2 * np.pi * p[:, 0] / 40) * np.cos(2 * np.pi * p[:, 1] / 40),
                             np.cos(2 * np.pi * p[:, 0] / 40)], axis=1)

        def grad_err(n, spacing):
            g = field_from(u_fn, n=n, spacing=spacing)
            F, _, _ = deformation_gradient(g)
            pts = g.node_coordinates()
            gx = 2 * np.pi / 40
            F_true = np.zeros((len(pts), 2, 2))
            F_true[:, 0, 0] = 1 + gx * np.cos(gx * pts[:, 0]) * np.cos(gx * pts[:, 1])
            F_true[:, 0, 1] = -gx * np.sin(gx * pts[:, 0]) * np.sin(gx * pts[:, 1])
            F_true[:, 1, 0] = -gx * np.sin(gx * pts[:, 0])
            F_true[:, 1, 1] = 1.0
            err = np.abs(F.values.reshape(-1, 2, 2) - F_true)
            return err.reshape(*g.dims, 2, 2)[F.valid].max()

        e1 = grad_err(21, 2.0)
        e2 = grad_err(41, 1.0)
        order = np.log2(e1 / e2)
        assert order >= 1.9


class TestPolarDecomposition:
    def test_identity(self):
        R, U = polar_decompose(np.eye(2))
        assert np.allclose(R, np.eye(2)) and np.allclose(U, np.eye(2))

    def test_pure_rotation(self):
        th = np.radians(30)
        Q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        R, U = polar_decompose(Q)
        assert np.abs(R - Q).max() < 1e-12
        assert np.abs(U - np.eye(2)).max() < 1e-12

    def test_shear_closed_form_2x2(self):
        F = np.array([[1.0, 0.5], [0.0, 1.0]])
        R, U = polar_decompose(F)
        # independent closed form: U = (C + sqrt(det C) I)/sqrt(tr C + 2 sqrt(det C))
        C = F.T @ F
        sd = np.sqrt(np.linalg.det(C))
        U_ref = (C + sd * np.eye(2)) / np.sqrt(np.trace(C) + 2 * sd)
        assert np.abs(U - U_ref).max() < 1e-12
        assert np.abs(R @ U - F).max() < 1e-10
        assert np.abs(R.T @ R - np.eye(2)).max() < 1e-10

    def test_random_matrices_properties(self, rng):
        for d in (2, 3):
            for _ in range(50):
                while True:
                    F = rng.normal(size=(d, d))
                    det = np.linalg.det(F)
                    if 0.1 <= det <= 10:
                        break
                R, U = polar_decompose(F)
                assert np.abs(R.T @ R - np.eye(d)).max() < 1e-10
                assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)
                assert np.abs(U - U.T).max() < 1e-10
                assert np.linalg.eigvalsh(U).min() > 0
                assert np.abs(R @ U - F).max() < 1e-10

    def test_frame_objectivity(self, rng):
        from conftest import rotation_matrix
        for _ in range(20):
            while True:
                F = rng.normal(size=(3, 3))
                if 0.1 <= np.linalg.det(F) <= 10:
                    break
            Q = rotation_matrix(rng, 3)
            _, U1 = polar_decompose(F)
            _, U2 = polar_decompose(Q @ F)
            assert np.abs(U1 - U2).max() < 1e-9

    def test_singular_rejected(self):
        with pytest.raises(SingularF):
            polar_decompose(np.zeros((2, 2)))


class TestStrainRms:
    def test_matches_analytic_for_affine(self):
        spec = DeformationSpec.uniaxial_stretch(0, 1.3, (8.0, 8.0))
        u = field_from(lambda p: spec.displacement(p), n=17)
        out = strain_rms(u, spec)
        assert out["strain_rms_green"] < 1e-10
        assert out["strain_rms_small"] < 1e-10

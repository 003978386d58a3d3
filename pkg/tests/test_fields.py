import numpy as np
import pytest

from oracles import dense_screened_solve
from serialtrack.errors import NoSamples
from serialtrack.fields import (GridField, grid_to_scatter, make_grid,
                                scatter_to_grid, solve_global, update_dual)


class TestScatterToGrid:
    def test_constant_samples(self, rng):
        pos = rng.random((200, 2)) * 100
        u = np.tile([2.0, 0.0], (200, 1))
        grid = make_grid([0, 0], [100, 100], 5.0)
        out = scatter_to_grid(pos, u, grid)
        assert np.abs(out.values - [2.0, 0.0]).max() < 1e-6

    def test_single_sample_fills_grid(self):
        grid = GridField(np.zeros(2), np.ones(2), np.zeros((5, 5, 2)))
        out = scatter_to_grid(np.array([[2.0, 2.0]]), np.array([[1.5, -0.5]]), grid)
        assert np.abs(out.values - [1.5, -0.5]).max() < 1e-6

    def test_linear_field_at_defined_nodes(self, rng):
        pos = rng.random((500, 2)) * 64
        u = np.stack([0.01 * pos[:, 0], np.zeros(500)], axis=1)
        grid = make_grid([0, 0], [64, 64], 1.0)
        out = scatter_to_grid(pos, u, grid)
        idx = np.rint((pos - out.origin) / out.spacing).astype(int)
        flat = np.ravel_multi_index(tuple(np.clip(idx, 0, np.array(out.dims) - 1).T),
                                    out.dims)
        defined = np.zeros(np.prod(out.dims), bool)
        defined[flat] = True
        nodes = out.node_coordinates()
        err = np.abs(out.values.reshape(-1, 2)[defined, 0] - 0.01 * nodes[defined, 0])
        assert err.max() < 0.02

    def test_affine_cells_are_position_corrected(self, rng):
        # many samples per cell: the fitted node values are exact for a
        # linear field even on a coarse grid
        pos = rng.random((4000, 2)) * 128
        u = np.stack([0.5 * (pos[:, 0] - 64), -0.25 * pos[:, 1]], axis=1)
        grid = make_grid([0, 0], [128, 128], 32.0)
        out = scatter_to_grid(pos, u, grid)
        nodes = out.node_coordinates()
        truth = np.stack([0.5 * (nodes[:, 0] - 64), -0.25 * nodes[:, 1]], axis=1)
        assert np.abs(out.values.reshape(-1, 2) - truth).max() < 0.05

    def test_no_samples_raises(self):
        grid = make_grid([0, 0], [10, 10], 2.0)
        with pytest.raises(NoSamples):
            scatter_to_grid(np.zeros((0, 2)), np.zeros((0, 2)), grid)

    def test_roundtrip_constant(self, rng):
        pos = rng.random((100, 2)) * 50
        u = np.tile([1.25, -0.75], (100, 1))
        grid = make_grid([0, 0], [50, 50], 4.0)
        g = scatter_to_grid(pos, u, grid)
        back = grid_to_scatter(g, pos)
        assert np.abs(back - [1.25, -0.75]).max() < 1e-6


class TestSolveGlobal:
    def test_alpha_zero_identity(self, rng):
        vals = rng.normal(size=(9, 7, 2))
        rhs = GridField(np.zeros(2), np.ones(2), vals)
        out = solve_global(rhs, 0.0)
        assert np.array_equal(out.values, vals)

    def test_constant_preserved(self):
        rhs = GridField(np.zeros(2), np.ones(2), np.tile([3.0, 1.0], (20, 20, 1)))
        out = solve_global(rhs, 0.05)
        assert np.abs(out.values - [3.0, 1.0]).max() < 1e-8

    def test_cosine_eigenfunction(self):
        L = 64.0
        x = np.arange(65) * 1.0
        v = np.cos(np.pi * x / L)
        rhs = GridField(np.zeros(1), np.ones(1), v[:, None])
        out = solve_global(rhs, 0.1)
        expect = v / (1 + 0.1 * (np.pi / L) ** 2)
        rel = np.abs(out.values[:, 0] - expect).max() / np.abs(expect).max()
        assert rel < 0.01

    @pytest.mark.parametrize("dims,spacing", [((7, 6), (1.0, 2.0)),
                                              ((16, 16), (1.0, 1.0)),
                                              ((5, 4, 6), (1.0, 1.0, 2.0))])
    def test_dense_oracle_equivalence(self, rng, dims, spacing):
        d = len(dims)
        vals = rng.normal(size=(*dims, d))
        rhs = GridField(np.zeros(d), np.array(spacing), vals)
        out = solve_global(rhs, 0.07)
        dense = dense_screened_solve(vals, np.array(spacing), 0.07)
        rel = np.abs(out.values - dense).max() / np.abs(dense).max()
        assert rel < 1e-8

    def test_maximum_principle(self, rng):
        vals = rng.normal(size=(12, 12, 1))
        rhs = GridField(np.zeros(2), np.ones(2), vals)
        out = solve_global(rhs, 0.3)
        assert out.values.max() <= vals.max() + 1e-8
        assert out.values.min() >= vals.min() - 1e-8

    def test_smoothing_monotone_in_alpha(self, rng):
        vals = rng.normal(size=(24, 24, 1))
        rhs = GridField(np.zeros(2), np.ones(2), vals)
        tv_prev = np.inf
        for alpha in (1e-3, 1e-2, 1e-1):
            out = solve_global(rhs, alpha)
            v = out.values[..., 0]
            tv = np.abs(np.diff(v, axis=0)).sum() + np.abs(np.diff(v, axis=1)).sum()
            assert tv <= tv_prev + 1e-9
            tv_prev = tv

    def test_negative_alpha_rejected(self):
        rhs = GridField(np.zeros(2), np.ones(2), np.zeros((4, 4, 2)))
        with pytest.raises(ValueError):
            solve_global(rhs, -1.0)


class TestInterp:
    def test_constant_field(self):
        f = GridField(np.zeros(2), np.ones(2), np.tile([2.0, 3.0], (6, 6, 1)))
        out = grid_to_scatter(f, np.array([[1.3, 4.9], [0.0, 0.0]]))
        assert np.abs(out - [2.0, 3.0]).max() < 1e-15

    def test_node_exact(self, rng):
        vals = rng.normal(size=(5, 5, 2))
        f = GridField(np.zeros(2), 2.0 * np.ones(2), vals)
        out = grid_to_scatter(f, np.array([[4.0, 6.0]]))
        assert np.abs(out - vals[2, 3]).max() < 1e-15

    def test_linear_reproduction(self, rng):
        nodes = np.stack(np.meshgrid(np.arange(8.0), np.arange(8.0),
                                     indexing="ij"), axis=-1)
        vals = np.stack([2.0 * nodes[..., 0] - nodes[..., 1],
                         0.5 * nodes[..., 1]], axis=-1)
        f = GridField(np.zeros(2), np.ones(2), vals)
        pts = rng.random((50, 2)) * 7
        out = grid_to_scatter(f, pts)
        truth = np.stack([2 * pts[:, 0] - pts[:, 1], 0.5 * pts[:, 1]], axis=1)
        assert np.abs(out - truth).max() < 1e-12

    def test_outside_clamps(self):
        f = GridField(np.zeros(2), np.ones(2), np.tile([1.0, 0.0], (4, 4, 1)))
        out = grid_to_scatter(f, np.array([[-5.0, 2.0], [10.0, 10.0]]))
        assert np.abs(out - [1.0, 0.0]).max() < 1e-15


class TestDual:
    def test_no_change_when_equal(self, rng):
        vals = rng.normal(size=(4, 4, 2))
        th = GridField(np.zeros(2), np.ones(2), rng.normal(size=(4, 4, 2)))
        a = GridField(np.zeros(2), np.ones(2), vals)
        out = update_dual(th, a, a)
        assert np.abs(out.values - th.values).max() < 1e-15

    def test_formula(self):
        z = GridField(np.zeros(2), np.ones(2), np.zeros((3, 3, 2)))
        uh = GridField(np.zeros(2), np.ones(2), np.tile([1.0, 0.0], (3, 3, 1)))
        out = update_dual(z, uh, z)
        assert np.allclose(out.values, uh.values)

    def test_telescoping(self):
        z = GridField(np.zeros(2), np.ones(2), np.zeros((3, 3, 2)))
        uh = GridField(np.zeros(2), np.ones(2), np.tile([0.5, -0.5], (3, 3, 1)))
        th = z
        for i in range(1, 4):
            th = update_dual(th, uh, z)
            assert np.allclose(th.values, i * uh.values)

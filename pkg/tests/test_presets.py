import math

import numpy as np

from serialtrack.presets import benchmark_presets, run_preset


class TestRegistry:
    def test_all_presets_registered(self):
        names = set(benchmark_presets())
        assert names == {"translation2d", "translation3d", "rotation2d",
                         "rotation3d", "stretch2d", "stretch3d", "shear2d",
                         "shear3d", "star2d", "soft_stretch2d", "soft_shear2d"}

    def test_translation2d_parameters(self):
        p = benchmark_presets()["translation2d"]
        assert p.threshold == 0.5
        assert p.p_size == 3
        assert p.k_start == 25
        assert math.isinf(p.search_radius)
        assert p.series == ("incremental",)
        assert p.dims == (512, 512)
        assert p.sd_values == (0.003, 0.006, 0.012)
        assert p.step_values[0] == 0.0 and p.step_values[-1] == 4.0
        assert len(p.step_values) == 41

    def test_stretch2d_cumulative_with_predictor(self):
        p = benchmark_presets()["stretch2d"]
        assert p.series == ("cumulative",)
        assert "cumulative" in p.chained
        assert p.search_radius == 50.0
        assert p.step_values[-1] == 3.0

    def test_shear_schedule(self):
        p = benchmark_presets()["shear2d"]
        assert abs(p.step_values[-1] - 0.45) < 1e-12
        assert len(p.step_values) == 10

    def test_star2d(self):
        p = benchmark_presets()["star2d"]
        assert p.dims == (4001, 501)
        assert p.sd_values == (0.003, 0.006, 0.012)
        assert p.noise_pct == 0.0
        assert p.search_radius == 50.0

    def test_3d_sweeps(self):
        p = benchmark_presets()["translation3d"]
        assert p.dims == (64, 64, 64)
        assert p.sd_values == (1e-4, 5e-4, 1e-3)

    def test_soft_presets(self):
        for name in ("soft_stretch2d", "soft_shear2d"):
            p = benchmark_presets()[name]
            assert p.rigidity == "soft"
            assert p.series == ("cumulative",)
            assert p.search_radius == 50.0

    def test_rotation_has_both_series(self):
        p = benchmark_presets()["rotation2d"]
        assert set(p.series) == {"incremental", "cumulative"}
        assert p.step_values[-1] == 180.0


class TestRunner:
    def test_sd_filter_and_max_steps(self):
        preset, rows, results, extras = run_preset(
            "translation2d", seed=1, sd=[0.006], max_steps=3)
        assert preset.sd_values == (0.006,)
        assert len(preset.step_values) == 3
        assert len(rows) == 2
        assert all(r["sd"] == 0.006 for r in rows)

    def test_rows_deterministic(self):
        _, rows1, _, _ = run_preset("translation2d", seed=9, sd=[0.006],
                                    max_steps=3)
        _, rows2, _, _ = run_preset("translation2d", seed=9, sd=[0.006],
                                    max_steps=3)
        for a, b in zip(rows1, rows2):
            for key in ("tracking_ratio", "disp_rms", "disp_rms_raw"):
                assert a[key] == b[key]

    def test_trajectories_emitted_for_incremental(self):
        _, rows, _, extras = run_preset("translation2d", seed=2, sd=[0.006],
                                        max_steps=4)
        segs = extras["trajectories"][(0.006, "incremental")]
        assert len(segs) > 0
        spans = [s for s in segs if s.t0 == 0 and s.t1 == 3]
        assert len(spans) >= 0.9 * len(segs)

    def test_unknown_preset_raises(self):
        import pytest
        with pytest.raises(KeyError):
            run_preset("nope", seed=0)

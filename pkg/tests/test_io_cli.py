import json

import numpy as np
import pytest

from serialtrack import io as stio
from serialtrack.cli import main
from serialtrack.errors import InputMissing
from serialtrack.fields import GridField
from serialtrack.particles import MatchSet, ParticleSet
from serialtrack.synth import poisson_disc_sample

SUMMARY_KEYS = {"schema", "command", "ok", "error", "seed", "config",
                "artifacts", "metrics", "pairs", "wall_clock_s"}


class TestFileFormats:
    def test_image_roundtrip(self, tmp_path, rng):
        img = rng.random((12, 17))
        stio.write_image(tmp_path / "img.raw", img)
        back = stio.read_image(tmp_path / "img.raw")
        assert back.shape == img.shape
        assert np.abs(back - img).max() < 1e-6  # f32 quantization

    def test_image_header_contents(self, tmp_path, rng):
        stio.write_image(tmp_path / "img.raw", rng.random((4, 5, 6)))
        meta = json.loads((tmp_path / "img.json").read_text())
        assert meta == {"dims": [4, 5, 6], "dtype": "f32", "order": "row-major"}

    def test_missing_image(self, tmp_path):
        with pytest.raises(InputMissing):
            stio.read_image(tmp_path / "nope.raw")

    def test_particles_roundtrip(self, tmp_path, rng):
        ps = ParticleSet(rng.random((9, 3)) * 50, ids=np.arange(9) * 2)
        stio.write_particles_csv(tmp_path / "p.csv", ps)
        back = stio.read_particles_csv(tmp_path / "p.csv")
        assert np.array_equal(back.ids, ps.ids)
        # %.10g keeps ten significant digits
        assert np.abs(back.positions - ps.positions).max() < 1e-8
        header = (tmp_path / "p.csv").read_text().splitlines()[0]
        assert header == "id,x,y,z"

    def test_grid_roundtrip(self, tmp_path, rng):
        g = GridField(np.array([1.0, 2.0]), np.array([2.0, 3.0]),
                      rng.random((4, 5, 2)))
        stio.write_grid_csv(tmp_path / "g.csv", g)
        back = stio.read_grid_csv(tmp_path / "g.csv")
        assert np.allclose(back.origin, g.origin)
        assert np.allclose(back.spacing, g.spacing)
        assert np.abs(back.values - g.values).max() < 1e-9

    def test_matches_csv_header(self, tmp_path):
        m = MatchSet(np.array([0]), np.array([1]), np.array([[1.0, 2.0]]),
                     np.array([[0.5, -0.5]]), n_ref=1)
        stio.write_matches_csv(tmp_path / "m.csv", m)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "idA,xA,yA,ux,uy"
        assert lines[1].startswith("0,")


def _write_cfg(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


class TestConfigValidation:
    def test_bad_schema(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, "c.json", {"schema": 9, "preset": "star2d"})
        rc = main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["code"] == "ConfigInvalid"
        assert not (tmp_path / "out").exists()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, "c.json",
                         {"schema": 1, "preset": "star2d", "bogus": 1})
        rc = main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 2
        assert not (tmp_path / "out").exists()

    def test_negative_eps_d_no_partial_artifacts(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, "c.json", {
            "schema": 1, "reference": "a.csv", "deformed": "b.csv",
            "tracking": {"eps_d": -1.0}})
        rc = main(["track", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["code"] == "ConfigInvalid"
        assert not (tmp_path / "out").exists()

    def test_command_mismatch(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, "c.json", {"schema": 1, "command": "synth"})
        rc = main(["detect", "--config", str(cfg)])
        assert rc == 2

    def test_missing_input_file(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, "c.json", {
            "schema": 1, "input": "absent.raw", "detection": {}})
        rc = main(["detect", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 3

    def test_unknown_preset(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, "c.json", {"schema": 1, "preset": "nope"})
        rc = main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2


class TestPipelineCommands:
    def _synth(self, tmp_path):
        cfg = _write_cfg(tmp_path, "synth.json", {
            "schema": 1,
            "seed": 5,
            "image": {"dims": [128, 128], "seeding_density": 0.006,
                      "noise_pct": 0.05},
            "deformations": [{"kind": "translation", "vector": [0.5, 0.0]}],
        })
        rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")])
        assert rc == 0
        return tmp_path / "data"

    def test_synth_artifacts(self, tmp_path):
        out = self._synth(tmp_path)
        for t in (0, 1):
            assert (out / f"frame{t:03d}.raw").exists()
            assert (out / f"frame{t:03d}.json").exists()
            assert (out / f"frame{t:03d}_truth.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == SUMMARY_KEYS
        assert summary["ok"] is True

    def test_detect_track_roundtrip(self, tmp_path):
        data = self._synth(tmp_path)
        det_cfg = _write_cfg(tmp_path, "detect.json", {
            "schema": 1, "input": "data/frame000.raw", "detection": {}})
        rc = main(["detect", "--config", str(det_cfg),
                   "--out", str(tmp_path / "det")])
        assert rc == 0
        cent = stio.read_particles_csv(tmp_path / "det" / "centroids.csv")
        assert cent.n > 80

        trk_cfg = _write_cfg(tmp_path, "track.json", {
            "schema": 1, "reference": "data/frame000.raw",
            "deformed": "data/frame001.raw",
            "tracking": {"grid_spacing": 32.0}})
        rc = main(["track", "--config", str(trk_cfg),
                   "--out", str(tmp_path / "trk")])
        assert rc == 0
        summary = json.loads((tmp_path / "trk" / "summary.json").read_text())
        assert set(summary) == SUMMARY_KEYS
        assert summary["metrics"]["n_matched"] > 80
        assert (tmp_path / "trk" / "matches.csv").exists()
        assert (tmp_path / "trk" / "field.csv").exists()
        assert (tmp_path / "trk" / "deformation_gradient.csv").exists()
        field = stio.read_grid_csv(tmp_path / "trk" / "field.csv")
        med = np.median(field.values.reshape(-1, 2), axis=0)
        assert np.abs(med - [0.5, 0.0]).max() < 0.05

    def test_track_from_centroid_csvs(self, tmp_path):
        ps = poisson_disc_sample((96, 96), 5.0, 0.008, seed=2)
        moved = ParticleSet(ps.positions + [1.0, -0.5], ids=ps.ids)
        stio.write_particles_csv(tmp_path / "a.csv", ps)
        stio.write_particles_csv(tmp_path / "b.csv", moved)
        cfg = _write_cfg(tmp_path, "t.json", {
            "schema": 1, "reference": "a.csv", "deformed": "b.csv",
            "tracking": {"grid_spacing": 24.0}})
        rc = main(["track", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 0
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["metrics"]["n_matched"] == ps.n

    def test_benchmark_star_profile_artifacts(self, tmp_path):
        cfg = _write_cfg(tmp_path, "s.json", {
            "schema": 1, "preset": "star2d", "sd": [0.006],
            "write_fields": False})
        rc = main(["benchmark", "--config", str(cfg),
                   "--out", str(tmp_path / "star")])
        assert rc == 0
        out = tmp_path / "star"
        prof = out / "star_profile_sd0.006.csv"
        assert prof.exists()
        lines = prof.read_text().splitlines()
        assert lines[0] == "x,uy_true,uy_recovered"
        assert len(lines) > 1000
        assert (out / "star_profile.png").exists()

    def test_benchmark_truncated(self, tmp_path):
        cfg = _write_cfg(tmp_path, "b.json", {
            "schema": 1, "preset": "translation2d", "sd": [0.006],
            "max_steps": 3})
        rc = main(["benchmark", "--config", str(cfg),
                   "--out", str(tmp_path / "bench")])
        assert rc == 0
        out = tmp_path / "bench"
        assert (out / "metrics.csv").exists()
        assert (out / "tracking_ratio.png").exists()
        assert (out / "displacement_rms.png").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == SUMMARY_KEYS
        assert summary["metrics"]["rows"] == 2
        lines = (out / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3
        assert (out / f"trajectories_sd0.006.csv").exists()

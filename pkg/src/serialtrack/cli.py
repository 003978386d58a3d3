"""Batch command-line entry point.

Commands (all driven by a JSON config validated against schema 1; file
paths inside the config resolve relative to the config's directory):

  serialtrack synth     --config cfg.json   render synthetic frames
  serialtrack detect    --config cfg.json   centroids from an image
  serialtrack track     --config cfg.json   track one frame pair
  serialtrack benchmark --config cfg.json   run a verification suite

Every run writes a summary.json with a stable schema; failures after
config validation record a machine-readable error there and exit
nonzero. Invalid configs exit nonzero with the error record on stderr
and write nothing.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

from . import io as stio
from .detect import DetectionConfig, detect
from .errors import ConfigInvalid, InputMissing, SerialTrackError
from .particles import ParticleSet
from .postproc import deformation_gradient
from .presets import benchmark_presets, run_preset
from .report import plot_ratio_curves, plot_rms_curves, plot_star_profiles
from .synth import DeformationSpec, SynthImageSpec, apply_deformation, poisson_disc_sample, render_image
from .tracking import TrackingConfig, track_hard, track_soft

SCHEMA_VERSION = 1

METRIC_COLUMNS = [
    "sd", "series", "step", "value", "detection_ratio_ref", "detection_ratio_def",
    "n_detected_ref", "n_detected_def", "n_matched", "n_correct",
    "tracking_ratio", "tracking_ratio_ref", "correct_match_ratio",
    "disp_rms", "disp_rms_raw", "strain_rms_green", "strain_rms_small",
    "amplitude_ratio_left", "amplitude_ratio_right",
    "iterations", "match_ratio_final", "error",
]


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown key(s) {sorted(unknown)} in {where}")


def _radius(v):
    if v is None or v == "inf" or (isinstance(v, float) and math.isinf(v)):
        return math.inf
    return float(v)


def _detection_config(d: dict) -> DetectionConfig:
    _check_keys(d, {"method", "intensity_threshold", "p_size",
                    "min_blob_volume", "max_blob_volume"}, "detection")
    try:
        return DetectionConfig(**d)
    except ValueError as err:
        raise ConfigInvalid(str(err)) from err


def _tracking_config(d: dict) -> TrackingConfig:
    _check_keys(d, {"mode", "rigidity", "k_start", "search_radius",
                    "alpha_over_mu", "eps_converge", "iter_max", "eps_d",
                    "detection", "grid_spacing", "ghost_removal",
                    "outlier_r_thresh", "outlier_eps0", "outlier_neighborhood",
                    "use_predictor"}, "tracking")
    d = dict(d)
    if "search_radius" in d:
        d["search_radius"] = _radius(d["search_radius"])
    det = d.pop("detection", {})
    try:
        return TrackingConfig(detection=_detection_config(det), **d)
    except (TypeError, ValueError) as err:
        raise ConfigInvalid(str(err)) from err


def _deformation_spec(d: dict) -> DeformationSpec:
    _check_keys(d, {"kind", "vector", "angle_deg", "center", "axis", "ratio",
                    "plane", "shear", "amplitude", "period_start",
                    "period_end", "period_span"}, "deformation")
    if "kind" not in d:
        raise ConfigInvalid("deformation needs a 'kind'")
    d = dict(d)
    for key in ("vector", "center"):
        if key in d:
            d[key] = tuple(float(v) for v in d[key])
    try:
        return DeformationSpec(**d)
    except (TypeError, ValueError) as err:
        raise ConfigInvalid(str(err)) from err


def _image_spec(d: dict, seed: int) -> SynthImageSpec:
    _check_keys(d, {"dims", "seeding_density", "psf_amplitude", "psf_sigma",
                    "noise_pct", "rng_seed", "min_dist", "intensity_max"}, "image")
    d = dict(d)
    d.setdefault("rng_seed", seed)
    try:
        return SynthImageSpec(**d)
    except (TypeError, ValueError) as err:
        raise ConfigInvalid(str(err)) from err


def _load_config(path: Path) -> dict:
    if not path.exists():
        raise InputMissing(f"config file {path} does not exist")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigInvalid(f"config is not valid JSON: {err}") from err
    if not isinstance(cfg, dict):
        raise ConfigInvalid("config must be a JSON object")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ConfigInvalid(f"config schema must be {SCHEMA_VERSION}")
    return cfg


def _summary(command, ok, error, seed, config, artifacts, metrics, pairs,
             wall_clock_s):
    return {
        "schema": SCHEMA_VERSION,
        "command": command,
        "ok": ok,
        "error": error,
        "seed": seed,
        "config": config,
        "artifacts": sorted(str(a) for a in artifacts),
        "metrics": metrics,
        "pairs": pairs,
        "wall_clock_s": round(wall_clock_s, 3),
    }


def _write_summary(out_dir: Path, summary: dict) -> Path:
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=False,
                               allow_nan=True) + "\n")
    return path


def _load_particles_or_detect(path: Path, det_cfg: DetectionConfig) -> ParticleSet:
    if path.suffix == ".csv":
        return stio.read_particles_csv(path)
    return detect(stio.read_image(path), det_cfg)


def _cmd_synth(cfg, cfg_dir, out_dir, seed):
    _check_keys(cfg, {"schema", "command", "seed", "out", "image",
                      "deformations", "prefix"}, "config")
    if "image" not in cfg:
        raise ConfigInvalid("synth config needs an 'image' section")
    spec = _image_spec(cfg["image"], seed)
    deformations = [_deformation_spec(d) for d in cfg.get("deformations", [])]
    sep = spec.separation
    particles = poisson_disc_sample(spec.dims, sep, spec.seeding_density, seed)
    prefix = cfg.get("prefix", "frame")
    artifacts = []
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = [particles] + [apply_deformation(particles, d, dims=spec.dims)
                            for d in deformations]
    for t, truth in enumerate(frames):
        truth.frame = t
        img = render_image(truth, SynthImageSpec(
            dims=spec.dims, seeding_density=spec.seeding_density,
            psf_amplitude=spec.psf_amplitude, psf_sigma=spec.psf_sigma,
            noise_pct=spec.noise_pct, rng_seed=spec.rng_seed + t,
            min_dist=spec.min_dist, intensity_max=spec.intensity_max))
        raw = stio.write_image(out_dir / f"{prefix}{t:03d}.raw", img)
        artifacts.append(raw)
        artifacts.append(raw.with_suffix(".json"))
        artifacts.append(stio.write_particles_csv(
            out_dir / f"{prefix}{t:03d}_truth.csv", truth))
    metrics = {"frames": len(frames), "particles": particles.n}
    return artifacts, metrics, []


def _cmd_detect(cfg, cfg_dir, out_dir, seed):
    _check_keys(cfg, {"schema", "command", "seed", "out", "input", "detection"},
                "config")
    if "input" not in cfg:
        raise ConfigInvalid("detect config needs an 'input' image path")
    det_cfg = _detection_config(cfg.get("detection", {}))
    img = stio.read_image(cfg_dir / cfg["input"])
    out_dir.mkdir(parents=True, exist_ok=True)
    found = detect(img, det_cfg)
    artifacts = [stio.write_particles_csv(out_dir / "centroids.csv", found)]
    metrics = {"n_detected": found.n,
               "warning": found.warning or ""}
    return artifacts, metrics, []


def _cmd_track(cfg, cfg_dir, out_dir, seed):
    _check_keys(cfg, {"schema", "command", "seed", "out", "reference",
                      "deformed", "tracking"}, "config")
    for key in ("reference", "deformed"):
        if key not in cfg:
            raise ConfigInvalid(f"track config needs a {key!r} path")
    tcfg = _tracking_config(cfg.get("tracking", {}))
    ref_path = cfg_dir / cfg["reference"]
    def_path = cfg_dir / cfg["deformed"]
    out_dir.mkdir(parents=True, exist_ok=True)
    if tcfg.rigidity == "soft":
        result = track_soft(stio.read_image(ref_path), stio.read_image(def_path), tcfg)
    else:
        p_n = _load_particles_or_detect(ref_path, tcfg.detection)
        p_nt = _load_particles_or_detect(def_path, tcfg.detection)
        result = track_hard(p_n, p_nt, tcfg)
    artifacts = [
        stio.write_matches_csv(out_dir / "matches.csv", result.matches),
        stio.write_grid_csv(out_dir / "field.csv", result.u_hat),
    ]
    F, small, green = deformation_gradient(result.u_hat)
    artifacts.append(stio.write_tensor_csv(out_dir / "deformation_gradient.csv", F))
    valid = result.matches.valid_only()
    metrics = {
        "n_matched": int(valid.n),
        "match_ratio_final": result.match_ratio_history[-1],
        "iterations": result.iterations,
        "n_ghosts_removed": int(len(result.removed_ghosts_a) + len(result.removed_ghosts_b)),
    }
    pairs = [{
        "pair": [0, 1],
        "match_ratio_history": result.match_ratio_history,
        "iterations": result.iterations,
    }]
    return artifacts, metrics, pairs


def _cmd_benchmark(cfg, cfg_dir, out_dir, seed, max_parallel):
    _check_keys(cfg, {"schema", "command", "seed", "out", "preset", "sd",
                      "max_steps", "write_fields", "figures", "max_parallel"},
                "config")
    if "preset" not in cfg:
        raise ConfigInvalid("benchmark config needs a 'preset' name")
    if cfg["preset"] not in benchmark_presets():
        raise ConfigInvalid(f"unknown preset {cfg['preset']!r}; choose from "
                            f"{sorted(benchmark_presets())}")
    preset, rows, results, extras = run_preset(
        cfg["preset"], seed=seed, sd=cfg.get("sd"),
        max_steps=cfg.get("max_steps"), max_parallel=max_parallel)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []

    for row in rows:
        row["value"] = row.get(preset.step_label, "")
    artifacts.append(stio.write_metrics_csv(out_dir / "metrics.csv", rows,
                                            METRIC_COLUMNS))

    if cfg.get("write_fields", True):
        fdir = out_dir / "fields"
        fdir.mkdir(exist_ok=True)
        for (sd_index, series, b), (result, _) in sorted(results.items()):
            if result is None:
                continue
            sd = preset.sd_values[sd_index]
            stem = f"sd{sd:g}_{series}_step{b:03d}"
            artifacts.append(stio.write_matches_csv(fdir / f"{stem}_matches.csv",
                                                    result.matches))
            artifacts.append(stio.write_grid_csv(fdir / f"{stem}_field.csv",
                                                 result.u_hat))

    for (sd, series), segs in sorted(extras["trajectories"].items()):
        artifacts.append(stio.write_trajectories_csv(
            out_dir / f"trajectories_sd{sd:g}.csv", segs, preset.dim))

    for sd, (xs, tru, rec) in sorted(extras["star_profiles"].items()):
        rows_p = [{"x": float(x), "uy_true": float(t), "uy_recovered": float(r)}
                  for x, t, r in zip(xs, tru, rec)]
        artifacts.append(stio.write_metrics_csv(
            out_dir / f"star_profile_sd{sd:g}.csv", rows_p,
            ["x", "uy_true", "uy_recovered"]))

    if cfg.get("figures", True):
        artifacts.append(plot_ratio_curves(rows, preset.step_label,
                                           out_dir / "tracking_ratio.png",
                                           preset.name))
        artifacts.append(plot_rms_curves(rows, preset.step_label,
                                         out_dir / "displacement_rms.png",
                                         preset.name))
        if extras["star_profiles"]:
            artifacts.append(plot_star_profiles(extras["star_profiles"],
                                                out_dir / "star_profile.png",
                                                preset.name))

    ok_rows = [r for r in rows if not r.get("error")]
    metrics = {
        "rows": len(rows),
        "failed_pairs": len(rows) - len(ok_rows),
        "min_tracking_ratio": min((r["tracking_ratio"] for r in ok_rows),
                                  default=float("nan")),
        "max_disp_rms": max((r["disp_rms"] for r in ok_rows
                             if not math.isnan(r.get("disp_rms", float("nan")))),
                            default=float("nan")),
    }
    pairs = [{
        "sd": r["sd"], "series": r["series"], "step": r["step"],
        "value": r["value"],
        "tracking_ratio": r.get("tracking_ratio"),
        "disp_rms": r.get("disp_rms"),
        "iterations": r.get("iterations"),
        "match_ratio_final": r.get("match_ratio_final"),
        "error": r.get("error", ""),
    } for r in rows]
    return artifacts, metrics, pairs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="serialtrack",
        description="Particle tracking with scale/rotation-invariant "
                    "neighborhood descriptors and a regularized global field.")
    parser.add_argument("command",
                        choices=["synth", "detect", "track", "benchmark"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed override")
    parser.add_argument("--max-parallel", type=int, default=1,
                        help="worker process bound for benchmark suites")
    args = parser.parse_args(argv)

    cfg_path = Path(args.config)
    t0 = time.perf_counter()
    try:
        cfg = _load_config(cfg_path)
        if "command" in cfg and cfg["command"] != args.command:
            raise ConfigInvalid(
                f"config command {cfg['command']!r} != CLI command {args.command!r}")
    except SerialTrackError as err:
        json.dump({"ok": False, "error": {"code": err.code, "message": str(err)}},
                  sys.stderr)
        sys.stderr.write("\n")
        return 2

    cfg_dir = cfg_path.resolve().parent
    out_dir = Path(args.out) if args.out else \
        (cfg_dir / cfg["out"] if "out" in cfg else cfg_dir / "out")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    max_parallel = args.max_parallel
    if "max_parallel" in cfg and args.max_parallel == 1:
        max_parallel = int(cfg["max_parallel"])

    try:
        if args.command == "synth":
            artifacts, metrics, pairs = _cmd_synth(cfg, cfg_dir, out_dir, seed)
        elif args.command == "detect":
            artifacts, metrics, pairs = _cmd_detect(cfg, cfg_dir, out_dir, seed)
        elif args.command == "track":
            artifacts, metrics, pairs = _cmd_track(cfg, cfg_dir, out_dir, seed)
        else:
            artifacts, metrics, pairs = _cmd_benchmark(cfg, cfg_dir, out_dir,
                                                       seed, max_parallel)
    except (ConfigInvalid,) as err:
        json.dump({"ok": False, "error": {"code": err.code, "message": str(err)}},
                  sys.stderr)
        sys.stderr.write("\n")
        return 2
    except InputMissing as err:
        json.dump({"ok": False, "error": {"code": err.code, "message": str(err)}},
                  sys.stderr)
        sys.stderr.write("\n")
        return 3
    except SerialTrackError as err:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = _summary(args.command, False,
                           {"code": err.code, "message": str(err)},
                           seed, cfg, [], {}, [], time.perf_counter() - t0)
        _write_summary(out_dir, summary)
        sys.stderr.write(f"error [{err.code}]: {err}\n")
        return 4

    rel = []
    for a in artifacts:
        try:
            rel.append(Path(a).relative_to(out_dir))
        except ValueError:
            rel.append(Path(a))
    summary = _summary(args.command, True, None, seed, cfg, rel, metrics,
                       pairs, time.perf_counter() - t0)
    _write_summary(out_dir, summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())

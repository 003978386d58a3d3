"""Benchmark suites: synthetic deformation sequences with known ground
truth, tracked end to end and scored against it.

Each preset fixes the image geometry, seeding-density sweep, deformation
schedule, and tracking parameters (bead threshold 0.5, bead radius 3,
25 starting neighbors, search field 50 px or unbounded, incremental or
cumulative pairing). Homogeneous suites use a coarse output grid (their
fields are affine, so no resolution is lost and cell averages suppress
localization noise); the star suite keeps a fine grid to resolve its
shortest recoverable wavelength.
"""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .detect import DetectionConfig, detect
from .errors import SerialTrackError
from .particles import ParticleSet
from .postproc import detection_ratio, evaluate, strain_rms
from .sequence import merge_segments
from .synth import DeformationSpec, SynthImageSpec, apply_deformation, poisson_disc_sample, render_image
from .tracking import TrackingConfig, track_hard, track_soft

MIN_DIST = 5.0
PSF_SIGMA = 1.0
NOISE_PCT = 0.05


@dataclass(frozen=True)
class BenchmarkPreset:
    """One named verification suite."""

    name: str
    dims: tuple
    kind: str                      # translation | rotation | stretch | shear | star
    step_values: tuple             # deformation parameter per frame (frame 0 first)
    step_label: str
    sd_values: tuple
    series: tuple                  # pairing series to run: incremental / cumulative
    chained: tuple                 # series using the previous pair's field as predictor
    search_radius: float
    rigidity: str = "hard"
    noise_pct: float = NOISE_PCT
    grid_spacing: float | None = None
    axis: int = 0
    plane: str = "xy"
    k_start: int = 25
    threshold: float = 0.5
    p_size: int = 3

    @property
    def dim(self) -> int:
        return len(self.dims)

    def center(self):
        return tuple((n - 1) / 2.0 for n in self.dims)

    def deformation(self, value) -> DeformationSpec:
        if self.kind == "translation":
            vec = [0.0] * self.dim
            vec[0] = value
            return DeformationSpec.translation(vec)
        if self.kind == "rotation":
            return DeformationSpec.rotation(value % 360.0, self.center())
        if self.kind == "stretch":
            return DeformationSpec.uniaxial_stretch(self.axis, value, self.center())
        if self.kind == "shear":
            return DeformationSpec.simple_shear(self.plane, value, self.center())
        if self.kind == "star":
            if value == 0.0:
                return DeformationSpec.translation([0.0] * self.dim)
            return DeformationSpec.star_pattern()
        raise ValueError(self.kind)

    def tracking_config(self, mode: str) -> TrackingConfig:
        return TrackingConfig(
            mode=mode,
            rigidity=self.rigidity,
            k_start=self.k_start,
            search_radius=self.search_radius,
            grid_spacing=self.grid_spacing,
            detection=DetectionConfig(intensity_threshold=self.threshold,
                                      p_size=self.p_size),
        )


def _steps(start, stop, step):
    n = int(round((stop - start) / step)) + 1
    return tuple(start + i * step for i in range(n))


def benchmark_presets() -> dict:
    """Registry of the built-in verification suites."""
    presets = {}

    def add(p):
        presets[p.name] = p

    add(BenchmarkPreset(
        name="translation2d", dims=(512, 512), kind="translation",
        step_values=_steps(0.0, 4.0, 0.1), step_label="shift_px",
        sd_values=(0.003, 0.006, 0.012), series=("incremental",), chained=(),
        search_radius=math.inf, grid_spacing=48.0))
    add(BenchmarkPreset(
        name="rotation2d", dims=(512, 512), kind="rotation",
        step_values=_steps(0.0, 180.0, 10.0), step_label="angle_deg",
        sd_values=(0.003, 0.006, 0.012), series=("incremental", "cumulative"),
        chained=(), search_radius=math.inf, grid_spacing=48.0))
    add(BenchmarkPreset(
        name="stretch2d", dims=(512, 512), kind="stretch",
        step_values=_steps(1.0, 3.0, 0.1), step_label="stretch_ratio",
        sd_values=(0.003, 0.006, 0.012), series=("cumulative",),
        chained=("cumulative",), search_radius=50.0, grid_spacing=48.0))
    add(BenchmarkPreset(
        name="shear2d", dims=(512, 512), kind="shear",
        step_values=_steps(0.0, 0.45, 0.05), step_label="tan_gamma",
        sd_values=(0.003, 0.006, 0.012), series=("cumulative",),
        chained=("cumulative",), search_radius=50.0, grid_spacing=48.0))
    add(BenchmarkPreset(
        name="translation3d", dims=(64, 64, 64), kind="translation",
        step_values=_steps(0.0, 4.0, 0.1), step_label="shift_px",
        sd_values=(1e-4, 5e-4, 1e-3), series=("incremental",), chained=(),
        search_radius=math.inf, grid_spacing=32.0))
    add(BenchmarkPreset(
        name="rotation3d", dims=(64, 64, 64), kind="rotation",
        step_values=_steps(0.0, 180.0, 10.0), step_label="angle_deg",
        sd_values=(1e-4, 5e-4, 1e-3), series=("incremental", "cumulative"),
        chained=(), search_radius=math.inf, grid_spacing=32.0))
    add(BenchmarkPreset(
        name="stretch3d", dims=(64, 64, 64), kind="stretch",
        step_values=_steps(1.0, 3.0, 0.1), step_label="stretch_ratio",
        sd_values=(1e-4, 5e-4, 1e-3), series=("cumulative",),
        chained=("cumulative",), search_radius=50.0, grid_spacing=32.0))
    add(BenchmarkPreset(
        name="shear3d", dims=(64, 64, 64), kind="shear", plane="xz",
        step_values=_steps(0.0, 0.45, 0.05), step_label="tan_gamma",
        sd_values=(1e-4, 5e-4, 1e-3), series=("cumulative",),
        chained=("cumulative",), search_radius=50.0, grid_spacing=32.0))
    add(BenchmarkPreset(
        name="star2d", dims=(4001, 501), kind="star",
        step_values=(0.0, 1.0), step_label="star",
        sd_values=(0.003, 0.006, 0.012), series=("incremental",), chained=(),
        search_radius=50.0, noise_pct=0.0, grid_spacing=6.0))
    add(BenchmarkPreset(
        name="soft_stretch2d", dims=(512, 512), kind="stretch",
        step_values=_steps(1.0, 3.0, 0.1), step_label="stretch_ratio",
        sd_values=(0.003, 0.006, 0.012), series=("cumulative",),
        chained=("cumulative",), search_radius=50.0, rigidity="soft",
        grid_spacing=48.0))
    add(BenchmarkPreset(
        name="soft_shear2d", dims=(512, 512), kind="shear",
        step_values=_steps(0.0, 0.45, 0.05), step_label="tan_gamma",
        sd_values=(0.003, 0.006, 0.012), series=("cumulative",),
        chained=("cumulative",), search_radius=50.0, rigidity="soft",
        grid_spacing=48.0))
    return presets


def _seed_for(seed, *parts) -> int:
    ss = np.random.SeedSequence([int(seed)] + [int(p) & 0x7FFFFFFF for p in parts])
    return int(ss.generate_state(1)[0])


def blob_covariance(preset: BenchmarkPreset, spec: DeformationSpec):
    """Deformed-bead covariance F sigma^2 F^T for soft-particle renders."""
    F = spec.gradient(np.zeros((1, preset.dim)))[0]
    return F @ (PSF_SIGMA**2 * np.eye(preset.dim)) @ F.T


def synth_frame(preset: BenchmarkPreset, truth0: ParticleSet, t: int,
                seed: int, sd_index: int):
    """Ground truth and rendered image for one frame of a suite."""
    spec = preset.deformation(preset.step_values[t])
    truth = apply_deformation(truth0, spec, dims=preset.dims)
    truth.frame = t
    img_spec = SynthImageSpec(
        dims=preset.dims, seeding_density=preset.sd_values[sd_index],
        psf_sigma=PSF_SIGMA, noise_pct=preset.noise_pct,
        rng_seed=_seed_for(seed, sd_index, t, 1))
    cov = None
    if preset.rigidity == "soft" and t > 0:
        cov = blob_covariance(preset, spec)
    img = render_image(truth, img_spec, cov=cov)
    return truth, img, spec


def seed_reference(preset: BenchmarkPreset, seed: int, sd_index: int) -> ParticleSet:
    return poisson_disc_sample(preset.dims, MIN_DIST * PSF_SIGMA,
                               preset.sd_values[sd_index],
                               seed=_seed_for(seed, sd_index, 0xA))


def _prep_sd(args):
    """Render and detect every frame of one seeding density."""
    preset, seed, sd_index = args
    truth0 = seed_reference(preset, seed, sd_index)
    truths, detections, det_ratios, specs, images = [], [], [], [], []
    det_cfg = DetectionConfig(intensity_threshold=preset.threshold,
                              p_size=preset.p_size)
    for t in range(len(preset.step_values)):
        truth, img, spec = synth_frame(preset, truth0, t, seed, sd_index)
        det = detect(img, det_cfg)
        truths.append(truth)
        detections.append(det)
        det_ratios.append(detection_ratio(det, truth))
        specs.append(spec)
        if preset.rigidity == "soft":
            images.append(img)
    return sd_index, truths, detections, det_ratios, specs, images


def _relative_spec(preset: BenchmarkPreset, a: int, b: int) -> DeformationSpec:
    """Deformation of frame b relative to frame a (exact for this
    catalogue: parameters compose along each suite's schedule)."""
    va, vb = preset.step_values[a], preset.step_values[b]
    if preset.kind == "translation":
        return preset.deformation(vb - va)
    if preset.kind == "rotation":
        return preset.deformation((vb - va) % 360.0)
    if preset.kind == "stretch":
        return preset.deformation(vb / va)
    if preset.kind == "shear":
        return preset.deformation(vb - va)
    return preset.deformation(vb)


def _score_pair(preset, cfg, pair_data, predictor=None):
    truth_a, truth_b, det_a, det_b, img_a, img_b, rel_spec = pair_data
    if preset.rigidity == "soft":
        result = track_soft(img_a, img_b, cfg, predictor=predictor)
    else:
        result = track_hard(det_a, det_b, cfg, predictor=predictor)
    metrics = evaluate(result, truth_a, truth_b)
    try:
        metrics.update(strain_rms(result.u_hat, rel_spec))
    except SerialTrackError:
        pass
    return result, metrics


def _pair_job(args):
    preset, sd_index, series, b, pair_data = args
    cfg = preset.tracking_config(series)
    try:
        result, metrics = _score_pair(preset, cfg, pair_data)
        return [((sd_index, series, b), result, metrics, None)]
    except SerialTrackError as err:
        return [((sd_index, series, b), None, None, err)]


def _chain_job(args):
    """Run one chained (predictor-fed) series for one seeding density."""
    preset, sd_index, series, pair_list = args
    cfg = preset.tracking_config(series)
    out = []
    predictor = None
    for b, pair_data in pair_list:
        try:
            result, metrics = _score_pair(preset, cfg, pair_data, predictor)
            out.append(((sd_index, series, b), result, metrics, None))
            predictor = result.u_hat
        except SerialTrackError as err:
            out.append(((sd_index, series, b), None, None, err))
            predictor = None
    return out


def star_amplitude(preset: BenchmarkPreset, u_hat, spec: DeformationSpec,
                   row_y: float | None = None):
    """Least-squares amplitude scale of the recovered center-row vertical
    displacement, split at x = 500 (short versus recoverable wavelengths)."""
    from .fields import grid_to_scatter

    if row_y is None:
        row_y = (preset.dims[1] - 1) / 2.0
    xs = np.arange(0.0, preset.dims[0] - 1.0, 2.0)
    pts = np.stack([xs, np.full_like(xs, row_y)], axis=1)
    rec = grid_to_scatter(u_hat, pts)[:, 1]
    tru = spec.displacement(pts)[:, 1]
    out = {}
    for label, mask in (("left", xs < 500.0), ("right", xs > 500.0)):
        denom = float(np.sum(tru[mask] ** 2))
        out[f"amplitude_ratio_{label}"] = float(
            np.sum(rec[mask] * tru[mask]) / denom) if denom > 0 else float("nan")
    return out, (xs, tru, rec)


def run_preset(preset_name: str, seed: int = 0, sd=None, max_steps=None,
               max_parallel: int = 1, progress=None):
    """Execute one suite; returns (preset used, rows, results, extras).

    rows are per-pair metric dicts (sd, series, step, parameter value,
    ratios, RMS errors, iteration counts); results maps
    (sd_index, series, frame) to the TrackResult; extras carries
    trajectory segments per incremental series and star profiles.
    """
    registry = benchmark_presets()
    if preset_name not in registry:
        raise KeyError(f"unknown preset {preset_name!r}")
    preset = registry[preset_name]
    if sd:
        wanted = [float(s) for s in sd]
        keep = tuple(s for s in preset.sd_values if any(abs(s - w) < 1e-12 for w in wanted))
        if not keep:
            raise ValueError(f"no preset seeding densities match {sd}")
        preset = replace(preset, sd_values=keep)
    if max_steps is not None:
        n = max(2, int(max_steps))
        preset = replace(preset, step_values=preset.step_values[:n])

    def pmap(fn, jobs):
        if max_parallel > 1 and len(jobs) > 1:
            # spawn: forking after the JIT threading layer starts is unsafe
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=max_parallel,
                                     mp_context=ctx) as pool:
                return list(pool.map(fn, jobs))
        return [fn(j) for j in jobs]

    prep = pmap(_prep_sd, [(preset, seed, i) for i in range(len(preset.sd_values))])
    prep.sort(key=lambda r: r[0])
    per_sd = {r[0]: r[1:] for r in prep}

    results = {}
    row_errors = {}
    pair_jobs = []
    chain_jobs = []
    from .sequence import pair_frames
    for sd_index in range(len(preset.sd_values)):
        truths, detections, det_ratios, specs, images = per_sd[sd_index]
        n_frames = len(preset.step_values)

        def pair_data(a, b):
            ia = images[a] if images else None
            ib = images[b] if images else None
            return (truths[a], truths[b], detections[a], detections[b],
                    ia, ib, _relative_spec(preset, a, b))

        for series in preset.series:
            pairs = pair_frames(n_frames, series)
            if series in preset.chained:
                chain_jobs.append((preset, sd_index, series,
                                   [(b, pair_data(a, b)) for a, b in pairs]))
            else:
                for a, b in pairs:
                    pair_jobs.append((preset, sd_index, series, b, pair_data(a, b)))

    for out in pmap(_pair_job, pair_jobs) + pmap(_chain_job, chain_jobs):
        for key, result, metrics, err in out:
            results[key] = (result, metrics)
            if err is not None:
                row_errors[key] = err

    rows = []
    extras = {"trajectories": {}, "star_profiles": {}, "detection_ratios": {}}
    for sd_index, sd_value in enumerate(preset.sd_values):
        truths, detections, det_ratios, specs, images = per_sd[sd_index]
        extras["detection_ratios"][sd_value] = det_ratios
        for series in preset.series:
            from .sequence import pair_frames
            pairs = pair_frames(len(preset.step_values), series)
            series_results = []
            for a, b in pairs:
                key = (sd_index, series, b)
                result, metrics = results.get(key, (None, None))
                row = {
                    "sd": sd_value,
                    "series": series,
                    "step": b,
                    preset.step_label: preset.step_values[b],
                    "detection_ratio_ref": det_ratios[a],
                    "detection_ratio_def": det_ratios[b],
                }
                if metrics is None:
                    row["error"] = row_errors[key].code if key in row_errors else "Error"
                else:
                    row.update(metrics)
                    row["error"] = ""
                    if preset.kind == "star":
                        amp, profile = star_amplitude(preset, result.u_hat, specs[b])
                        row.update(amp)
                        extras["star_profiles"][sd_value] = profile
                rows.append(row)
                series_results.append(result)
            if series == "incremental" and len(pairs) > 1:
                ok_results = [r if r is not None else
                              SerialTrackError("missing") for r in series_results]
                try:
                    segs = merge_segments(ok_results, detections)
                    extras["trajectories"][(sd_value, series)] = segs
                except Exception:
                    pass
        if progress:
            progress(f"sd={sd_value} done")
    return preset, rows, results, extras

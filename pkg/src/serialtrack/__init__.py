"""Particle tracking with scale- and rotation-invariant neighborhood
descriptors, an alternating local/global displacement solve, and a
synthetic verification harness."""

from .detect import DetectionConfig, detect, detect_log, detect_threshold_radial
from .descriptors import (DescriptorSet, NeighborIndex, build_descriptor,
                          build_descriptors, match_particles, remove_outliers)
from .fields import (GridField, grid_to_scatter, make_grid, scatter_to_grid,
                     solve_global, update_dual)
from .particles import MatchSet, ParticleSet
from .postproc import (TensorField, deformation_gradient, detection_ratio,
                       evaluate, polar_decompose, strain_rms)
from .presets import BenchmarkPreset, benchmark_presets, run_preset
from .sequence import (TrajectorySegment, cumulative_track,
                       incremental_cumulative, incremental_track,
                       merge_segments, pair_frames)
from .synth import (DeformationSpec, SynthImageSpec, apply_deformation,
                    poisson_disc_sample, render_image)
from .tracking import (TrackingConfig, TrackResult, k_schedule, remove_ghosts,
                       track_hard, track_soft, warp_image)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkPreset", "DescriptorSet", "DetectionConfig", "DeformationSpec",
    "GridField", "MatchSet", "NeighborIndex", "ParticleSet", "SynthImageSpec",
    "TensorField", "TrackResult", "TrackingConfig", "TrajectorySegment",
    "apply_deformation", "benchmark_presets", "build_descriptor",
    "build_descriptors",
    "cumulative_track", "deformation_gradient", "detect", "detect_log",
    "detect_threshold_radial", "detection_ratio", "evaluate",
    "grid_to_scatter", "incremental_cumulative", "incremental_track",
    "k_schedule", "make_grid", "match_particles", "merge_segments",
    "pair_frames", "poisson_disc_sample", "polar_decompose", "remove_ghosts",
    "remove_outliers", "render_image", "run_preset", "scatter_to_grid",
    "solve_global", "strain_rms", "track_hard", "track_soft", "update_dual",
    "warp_image", "__version__",
]

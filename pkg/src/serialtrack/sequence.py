"""Sequence-level tracking: frame pairing, cumulative tracking with a
carried-forward predictor, trajectory assembly from incremental results,
and extrapolate-and-join segment merging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OddFrameCount, SerialTrackError
from .particles import ParticleSet
from .tracking import TrackingConfig, TrackResult, track_hard

MERGE_ROUNDS = 5


def pair_frames(n_frames: int, mode: str):
    """Frame index pairs per tracking mode.

    incremental: (0,1),(1,2),...; cumulative: (0,1),(0,2),...;
    double_frame: (0,1),(2,3),... (even frame count required).
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    if mode == "incremental":
        return [(t, t + 1) for t in range(n_frames - 1)]
    if mode == "cumulative":
        return [(0, t) for t in range(1, n_frames)]
    if mode == "double_frame":
        if n_frames % 2:
            raise OddFrameCount(f"double_frame mode needs an even frame count, got {n_frames}")
        return [(t, t + 1) for t in range(0, n_frames, 2)]
    raise ValueError(f"unknown mode {mode!r}")


def cumulative_track(frames: list[ParticleSet], cfg: TrackingConfig,
                     use_predictor: bool | None = None):
    """Track every frame against frame 0, feeding each pair the previous
    pair's field as a displacement predictor.

    Returns a list parallel to pairs (0,1),(0,2),...; entries are
    TrackResult or the error that pair raised (remaining pairs continue).
    """
    if use_predictor is None:
        use_predictor = cfg.use_predictor
    results = []
    predictor = None
    for _, t in pair_frames(len(frames), "cumulative"):
        try:
            res = track_hard(frames[0], frames[t], cfg,
                             predictor=predictor if use_predictor else None)
            results.append(res)
            predictor = res.u_hat
        except SerialTrackError as err:
            results.append(err)
            predictor = None
    return results


def incremental_track(frames: list[ParticleSet], cfg: TrackingConfig,
                      use_predictor: bool | None = None):
    """Track consecutive pairs, passing the previous pair's field along
    as the next pair's predictor."""
    if use_predictor is None:
        use_predictor = cfg.use_predictor
    results = []
    predictor = None
    for t, t1 in pair_frames(len(frames), "incremental"):
        try:
            res = track_hard(frames[t], frames[t1], cfg,
                             predictor=predictor if use_predictor else None)
            results.append(res)
            predictor = res.u_hat
        except SerialTrackError as err:
            results.append(err)
            predictor = None
    return results


@dataclass
class TrajectorySegment:
    """Particle positions over a contiguous frame interval.

    positions[i] is the location at frame t0 + i; extrapolated[i] marks
    frames filled by constant-velocity extrapolation rather than tracked
    matches.
    """

    t0: int
    positions: np.ndarray
    extrapolated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if self.extrapolated is None:
            self.extrapolated = np.zeros(len(self.positions), dtype=bool)
        else:
            self.extrapolated = np.asarray(self.extrapolated, dtype=bool)

    @property
    def t1(self) -> int:
        return self.t0 + len(self.positions) - 1

    def tracked_span(self):
        idx = np.flatnonzero(~self.extrapolated)
        return self.t0 + idx[0], self.t0 + idx[-1]

    def position_at(self, t: int) -> np.ndarray:
        return self.positions[t - self.t0]

    def covers(self, t: int) -> bool:
        return self.t0 <= t <= self.t1

    def velocity(self, end: str) -> np.ndarray:
        if len(self.positions) < 2:
            return np.zeros(self.positions.shape[1])
        if end == "head":
            return self.positions[1] - self.positions[0]
        return self.positions[-1] - self.positions[-2]

    def extend_head(self):
        p = self.positions[0] - self.velocity("head")
        self.positions = np.vstack([p, self.positions])
        self.extrapolated = np.concatenate([[True], self.extrapolated])
        self.t0 -= 1

    def extend_tail(self):
        p = self.positions[-1] + self.velocity("tail")
        self.positions = np.vstack([self.positions, p])
        self.extrapolated = np.concatenate([self.extrapolated, [True]])

    def cumulative_displacement(self) -> np.ndarray:
        return self.positions - self.positions[0]


def _chain_segments(results, frame_refs):
    """Chain pairwise matches that share particle endpoints into segments.

    results[i] links detected indices of frame i to frame i+1; a chain is
    extended while its endpoint particle keeps being matched.
    """
    n_pairs = len(results)
    maps = []
    for res in results:
        if isinstance(res, TrackResult):
            v = res.matches.valid_only()
            maps.append(dict(zip(v.a_indices.tolist(), v.b_indices.tolist())))
        else:
            maps.append({})
    consumed = [set() for _ in range(n_pairs + 1)]
    segments = []
    for start in range(n_pairs):
        for a0 in sorted(maps[start].keys()):
            if a0 in consumed[start]:
                continue
            chain = [(start, a0)]
            t, cur = start, a0
            while t < n_pairs and cur in maps[t]:
                nxt = maps[t][cur]
                if nxt in consumed[t + 1]:
                    break
                chain.append((t + 1, nxt))
                t, cur = t + 1, nxt
            if len(chain) < 2:
                continue
            for ft, fi in chain:
                consumed[ft].add(fi)
            pos = np.array([frame_refs[ft].positions[fi] for ft, fi in chain])
            segments.append(TrajectorySegment(t0=start, positions=pos))
    return segments


def merge_segments(results, frames: list[ParticleSet],
                   join_tol: float | None = None,
                   rounds: int = MERGE_ROUNDS) -> list[TrajectorySegment]:
    """Assemble trajectories from incremental pair results and join
    broken segments by constant-velocity extrapolation.

    Each round extends every segment one frame beyond both ends
    (extrapolated positions stay flagged) and joins ordered segment pairs
    whose positions agree within join_tol on a shared frame; rounds stop
    early when nothing joined. join_tol defaults to the first tracked
    pair's ghost distance.
    """
    if join_tol is None:
        for res in results:
            if isinstance(res, TrackResult):
                join_tol = res.eps_d
                break
        else:
            join_tol = 1.0
    n_frames = len(frames)
    segments = _chain_segments(results, frames)
    for _ in range(rounds):
        for seg in segments:
            if seg.t0 > 0:
                seg.extend_head()
            if seg.t1 < n_frames - 1:
                seg.extend_tail()
        segments.sort(key=lambda s: (s.t0, s.t1, tuple(s.positions[0])))
        joined_any = False
        merged: list[TrajectorySegment] = []
        used = [False] * len(segments)
        for i, seg in enumerate(segments):
            if used[i]:
                continue
            cur = seg
            for j in range(i + 1, len(segments)):
                if used[j]:
                    continue
                other = segments[j]
                a0, a1 = cur.tracked_span()
                b0, b1 = other.tracked_span()
                if not (a1 < b0 or b1 < a0):
                    continue
                first, second = (cur, other) if a1 < b0 else (other, cur)
                if first.t1 < second.t0:
                    continue
                shared = range(second.t0, min(first.t1, second.t1) + 1)
                dist = min(np.linalg.norm(first.position_at(t) - second.position_at(t))
                           for t in shared)
                if dist < join_tol:
                    cur = _join(first, second)
                    used[j] = True
                    joined_any = True
            merged.append(cur)
        segments = merged
        if not joined_any:
            break
    return segments


def _join(first: TrajectorySegment, second: TrajectorySegment) -> TrajectorySegment:
    """Concatenate two overlapping-or-adjacent segments; tracked positions
    win over extrapolated ones in the overlap."""
    t0 = min(first.t0, second.t0)
    t1 = max(first.t1, second.t1)
    n = t1 - t0 + 1
    d = first.positions.shape[1]
    pos = np.zeros((n, d))
    extra = np.ones(n, dtype=bool)
    filled = np.zeros(n, dtype=bool)
    for seg in (first, second):
        for t in range(seg.t0, seg.t1 + 1):
            i = t - t0
            tracked = not seg.extrapolated[t - seg.t0]
            if not filled[i] or (tracked and extra[i]):
                pos[i] = seg.position_at(t)
                extra[i] = not tracked
                filled[i] = True
    return TrajectorySegment(t0=t0, positions=pos, extrapolated=extra)


def incremental_cumulative(frames: list[ParticleSet], cfg: TrackingConfig,
                           join_tol: float | None = None):
    """Incremental tracking, merged into per-frame cumulative
    displacements for trajectories alive at frame 0.

    Returns (segments, results): frame-0 trajectories with their
    cumulative displacement arrays, plus the raw pair results.
    """
    results = incremental_track(frames, cfg)
    segments = merge_segments(results, frames, join_tol=join_tol)
    alive0 = [s for s in segments if s.t0 == 0]
    return alive0, results

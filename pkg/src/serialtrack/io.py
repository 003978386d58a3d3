"""File formats: raw float32 images with JSON sidecar headers, and the
CSV schemas for particles, matches, grid fields, trajectories, and
tensor fields. All floats are written with a fixed %.10g format so equal
runs produce byte-identical artifacts.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputMissing
from .fields import GridField
from .particles import MatchSet, ParticleSet

FLOAT_FMT = "%.10g"


def _fmt(v: float) -> str:
    return FLOAT_FMT % v


def write_image(path, image: np.ndarray) -> Path:
    """Binary row-major float32 raster plus a <stem>.json header."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    header = path.with_suffix(".json")
    np.asarray(image, dtype=np.float32).tofile(raw)
    header.write_text(json.dumps({
        "dims": list(image.shape),
        "dtype": "f32",
        "order": "row-major",
    }, indent=None, separators=(",", ":")) + "\n")
    return raw


def read_image(path) -> np.ndarray:
    """Read a raster written by write_image; path may name either file."""
    path = Path(path)
    header = path.with_suffix(".json")
    raw = path.with_suffix(".raw")
    if not header.exists() or not raw.exists():
        raise InputMissing(f"missing image files {raw} / {header}")
    try:
        meta = json.loads(header.read_text())
        dims = tuple(int(v) for v in meta["dims"])
        if meta.get("dtype") != "f32" or meta.get("order") != "row-major":
            raise ValueError("unsupported raster encoding")
        data = np.fromfile(raw, dtype=np.float32)
        return data.reshape(dims).astype(np.float64)
    except (ValueError, KeyError) as err:
        raise InputMissing(f"cannot parse image {path}: {err}") from err


def _axis_names(d: int):
    return ["x", "y", "z"][:d]


def write_particles_csv(path, particles: ParticleSet) -> Path:
    path = Path(path)
    d = particles.dim
    ids = particles.ids if particles.ids is not None else np.arange(particles.n)
    lines = ["id," + ",".join(_axis_names(d))]
    for i in range(particles.n):
        lines.append(str(int(ids[i])) + "," +
                     ",".join(_fmt(v) for v in particles.positions[i]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_particles_csv(path) -> ParticleSet:
    path = Path(path)
    if not path.exists():
        raise InputMissing(f"missing particle CSV {path}")
    try:
        with path.open() as fh:
            header = fh.readline().strip().split(",")
            d = len(header) - 1
            ids, pos = [], []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                ids.append(int(parts[0]))
                pos.append([float(v) for v in parts[1:1 + d]])
    except (ValueError, IndexError) as err:
        raise InputMissing(f"cannot parse particle CSV {path}: {err}") from err
    pos = np.array(pos, dtype=np.float64).reshape(len(ids), d)
    return ParticleSet(pos, ids=np.array(ids, dtype=np.int64))


def write_matches_csv(path, matches: MatchSet, valid_only: bool = True) -> Path:
    path = Path(path)
    m = matches.valid_only() if valid_only else matches
    d = m.a_positions.shape[1]
    ax = _axis_names(d)
    header = "idA," + ",".join(f"{a}A" for a in ax) + "," + ",".join(f"u{a}" for a in ax)
    lines = [header]
    for i in range(m.n):
        lines.append(str(int(m.a_indices[i])) + "," +
                     ",".join(_fmt(v) for v in m.a_positions[i]) + "," +
                     ",".join(_fmt(v) for v in m.u[i]))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_grid_csv(path, field: GridField) -> Path:
    """Node coordinates and vector components, row-major node order."""
    path = Path(path)
    d = field.dim
    ax = _axis_names(d)
    header = ",".join(ax) + "," + ",".join(f"u{a}" for a in ax)
    coords = field.node_coordinates()
    vals = field.values.reshape(-1, d)
    lines = [header]
    for c, v in zip(coords, vals):
        lines.append(",".join(_fmt(x) for x in c) + "," + ",".join(_fmt(x) for x in v))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_grid_csv(path) -> GridField:
    path = Path(path)
    if not path.exists():
        raise InputMissing(f"missing grid CSV {path}")
    with path.open() as fh:
        header = fh.readline().strip().split(",")
        d = len(header) // 2
        rows = np.array([[float(v) for v in line.strip().split(",")]
                         for line in fh if line.strip()])
    coords, vals = rows[:, :d], rows[:, d:]
    axes = [np.unique(coords[:, a]) for a in range(d)]
    dims = tuple(len(a) for a in axes)
    origin = np.array([a[0] for a in axes])
    spacing = np.array([a[1] - a[0] if len(a) > 1 else 1.0 for a in axes])
    return GridField(origin, spacing, vals.reshape(*dims, d))


def write_trajectories_csv(path, segments, d: int) -> Path:
    """traj_id, frame, position, cumulative displacement, extrapolated."""
    path = Path(path)
    ax = _axis_names(d)
    header = ("traj_id,frame," + ",".join(ax) + ","
              + ",".join(f"u{a}_cum" for a in ax) + ",extrapolated")
    lines = [header]
    for tid, seg in enumerate(segments):
        cum = seg.cumulative_displacement()
        for i in range(len(seg.positions)):
            lines.append(
                f"{tid},{seg.t0 + i},"
                + ",".join(_fmt(v) for v in seg.positions[i]) + ","
                + ",".join(_fmt(v) for v in cum[i]) + ","
                + str(int(seg.extrapolated[i])))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_tensor_csv(path, tensor) -> Path:
    """Node coordinates, row-major tensor components, validity flag."""
    path = Path(path)
    dims = tensor.dims
    d = len(dims)
    ax = _axis_names(d)
    comps = [f"F{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    header = ",".join(ax) + "," + ",".join(comps) + ",valid"
    axes = [tensor.origin[a] + tensor.spacing[a] * np.arange(dims[a]) for a in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    vals = tensor.values.reshape(-1, d * d)
    flags = tensor.valid.ravel()
    lines = [header]
    for c, v, f in zip(coords, vals, flags):
        lines.append(",".join(_fmt(x) for x in c) + ","
                     + ",".join(_fmt(x) for x in v) + f",{int(f)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_metrics_csv(path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c, "")
            if isinstance(v, float):
                cells.append(_fmt(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path

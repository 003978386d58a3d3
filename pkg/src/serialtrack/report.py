"""Benchmark report figures, rendered straight to files.

One ratio curve and one RMS curve per suite (lines per seeding density
and series), plus the center-row profile for the star pattern. All
rendering uses the Agg backend; nothing opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _series_groups(rows):
    groups = {}
    for row in rows:
        if row.get("error"):
            continue
        groups.setdefault((row["sd"], row["series"]), []).append(row)
    return groups


def plot_ratio_curves(rows, step_label, out_path, title) -> Path:
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for (sd, series), grp in sorted(_series_groups(rows).items()):
        grp = sorted(grp, key=lambda r: r["step"])
        x = [r[step_label] for r in grp]
        y = [r["tracking_ratio"] for r in grp]
        ax.plot(x, y, marker="o", ms=3, label=f"SD={sd:g} ({series})")
    ax.set_xlabel(step_label)
    ax.set_ylabel("tracking ratio")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_rms_curves(rows, step_label, out_path, title) -> Path:
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for (sd, series), grp in sorted(_series_groups(rows).items()):
        grp = sorted(grp, key=lambda r: r["step"])
        x = [r[step_label] for r in grp]
        y = [r.get("disp_rms", float("nan")) for r in grp]
        ax.semilogy(x, y, marker="o", ms=3, label=f"SD={sd:g} ({series})")
    ax.set_xlabel(step_label)
    ax.set_ylabel("displacement RMS error (px)")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_star_profiles(profiles, out_path, title) -> Path:
    """Recovered vs true center-row vertical displacement per density."""
    out_path = Path(out_path)
    fig, axes = plt.subplots(len(profiles), 1, figsize=(9.0, 2.2 * len(profiles)),
                             sharex=True, squeeze=False)
    for ax, (sd, (xs, tru, rec)) in zip(axes[:, 0], sorted(profiles.items())):
        ax.plot(xs, tru, lw=0.8, color="0.6", label="ground truth")
        ax.plot(xs, rec, lw=0.8, color="C3", label=f"recovered (SD={sd:g})")
        ax.set_ylabel("u_y (px)")
        ax.legend(fontsize=7, loc="upper right")
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("x (px)")
    axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path

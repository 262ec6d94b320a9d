"""Diagnostic figures written next to the report by ``hedi run``.

Figures are built on bare ``Figure`` objects with the Agg canvas, so nothing
here touches pyplot state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .surface import DISPLACEMENT, InstabilityConfig, TriMesh

__all__ = [
    "plot_orthogonal_slices", "plot_metric_trace", "plot_displacement_histogram",
    "plot_surface_projection",
]

_DPI = 110
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    return path


def plot_orthogonal_slices(values: np.ndarray, spacing, path, title: str, unit: str,
                           outline: np.ndarray | None = None, cmap: str = "viridis") -> Path:
    """Axial, coronal and sagittal slices through the volume centre.

    ``outline`` (same shape as ``values``) is drawn as a contour at 0.5.
    """
    values = np.asarray(values, dtype=float)
    cx, cy, cz = (n // 2 for n in values.shape)
    sx, sy, sz = spacing
    views = [
        ("axial", values[:, :, cz].T, (sx, sy), None if outline is None else outline[:, :, cz].T),
        ("coronal", values[:, cy, :].T, (sx, sz), None if outline is None else outline[:, cy, :].T),
        ("sagittal", values[cx, :, :].T, (sy, sz), None if outline is None else outline[cx, :, :].T),
    ]
    vmin, vmax = float(np.nanmin(values)), float(np.nanmax(values))
    if vmax <= vmin:
        vmax = vmin + 1.0
    fig = Figure(figsize=(12, 4.2))
    axes = fig.subplots(1, 3)
    for ax, (name, img, (du, dv), ring) in zip(axes, views):
        extent = (0, img.shape[1] * du, 0, img.shape[0] * dv)
        im = ax.imshow(img, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax,
                       extent=extent, interpolation="nearest")
        if ring is not None and ring.min() < 0.5 < ring.max():
            ax.contour(ring, levels=[0.5], colors="w", linewidths=0.8, extent=extent)
        ax.set_title(name)
        ax.set_xlabel("mm")
    axes[0].set_ylabel("mm")
    fig.colorbar(im, ax=list(axes), shrink=0.85, label=unit)
    fig.suptitle(title)
    return _save(fig, path)


def plot_metric_trace(trace, iterations_per_level, path) -> Path:
    """Registration metric per iteration, one shaded band per pyramid level."""
    fig = Figure(figsize=(6.4, 3.6))
    ax = fig.subplots()
    start = 0
    for level, n in enumerate(iterations_per_level):
        xs = np.arange(start, start + n)
        ax.plot(xs, trace[start:start + n], lw=1.2, label=f"level {level}")
        if level % 2:
            ax.axvspan(start - 0.5, start + n - 0.5, color="0.92", lw=0)
        start += n
    ax.set_xlabel("iteration")
    ax.set_ylabel("metric (lower is better)")
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_displacement_histogram(mesh: TriMesh, config: InstabilityConfig, path) -> Path:
    """Area-weighted histogram of triangle displacement with the threshold marked."""
    disp = mesh.triangle_means(DISPLACEMENT)
    areas_cm2 = mesh.triangle_areas() / 100.0
    fig = Figure(figsize=(6.4, 3.6))
    ax = fig.subplots()
    top = max(float(disp.max()), config.threshold_mm) * 1.05
    ax.hist(disp, bins=60, range=(0.0, top), weights=areas_cm2, color="0.35")
    ax.axvline(config.threshold_mm, color="r", lw=1.2, ls="--",
               label=f"threshold {config.threshold_mm:g} mm")
    ax.set_xlabel("displacement (mm)")
    ax.set_ylabel("surface area (cm²)")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_surface_projection(mesh: TriMesh, path, title: str = "rest surface, anterior view") -> Path:
    """Vertices seen from the anterior side (+y), coloured with the mesh colours."""
    if mesh.colors is None:
        raise ValueError("mesh has no colours; run surface.colorize first")
    v = mesh.vertices
    order = np.argsort(v[:, 1], kind="stable")   # far side first, anterior drawn last
    fig = Figure(figsize=(5.5, 5.5))
    ax = fig.subplots()
    ax.set_facecolor("0.15")
    ax.scatter(v[order, 0], v[order, 2], c=mesh.colors[order] / 255.0, s=1.5, lw=0)
    ax.set_aspect("equal")
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("z (mm)")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)

"""Figure rendering for solver runs and verification reports.

Every function writes a single PNG to the given path and returns that path.
The Agg backend is forced at import time so the module works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .grid import Grid, ScalarField

__all__ = [
    "boundary_figure",
    "cone_figure",
    "energy_figure",
    "qi_figure",
    "radial_figure",
    "solution_figure",
]

_DPI = 130


def _field_plane(field: ScalarField) -> tuple[np.ndarray, list[float]]:
    """Return a 2D array and imshow extent for a 2D field or a 3D mid slice."""
    grid = field.grid
    vals = field.values
    if grid.dim == 3:
        vals = vals[:, :, vals.shape[2] // 2]
    extent = [
        grid.origin[0],
        grid.origin[0] + grid.h * grid.cells_per_axis[0],
        grid.origin[1],
        grid.origin[1] + grid.h * grid.cells_per_axis[1],
    ]
    return vals.T, extent


def solution_figure(
    fields: ScalarField | Sequence[ScalarField],
    path: str | Path,
    tau: float = 0.0,
    title: str | None = None,
) -> Path:
    """Heatmap of the solution with the support outline overlaid.

    A single field is drawn as-is (diverging colormap when it changes sign).
    A list of phase fields is drawn as the sum, with one outline per phase.
    For 3D fields the middle slice along the last axis is shown.
    """
    if isinstance(fields, ScalarField):
        members = [fields]
    else:
        members = list(fields)
    if not members:
        raise ValueError("fields must contain at least one field")
    grid = members[0].grid
    combined = np.zeros_like(members[0].values)
    for f in members:
        combined += f.values
    plane, extent = _field_plane(ScalarField(grid, combined))
    vmax = float(np.max(np.abs(plane))) or 1.0
    signed = float(np.min(plane)) < -tau
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    image = ax.imshow(
        plane,
        origin="lower",
        extent=extent,
        cmap="RdBu_r" if signed else "viridis",
        vmin=-vmax if signed else 0.0,
        vmax=vmax,
        interpolation="nearest",
    )
    xs = grid.axes()[0]
    ys = grid.axes()[1]
    for f in members:
        p, _ = _field_plane(f)
        if np.any(np.abs(p) > tau):
            ax.contour(
                xs,
                ys,
                np.abs(p),
                levels=[max(tau, 1e-300)],
                colors="k",
                linewidths=0.9,
            )
    fig.colorbar(image, ax=ax, shrink=0.85)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title or "solution")
    ax.set_aspect("equal")
    out = Path(path)
    fig.savefig(out, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return out


def energy_figure(
    log: Sequence[tuple[float, ...]], path: str | Path, title: str | None = None
) -> Path:
    """Descent curve of the total energy, shaded by regularization stage.

    Rows are (iteration, epsilon, total, dirichlet, source, penalty).
    """
    if not log:
        raise ValueError("energy log is empty")
    rows = np.asarray(log, dtype=np.float64)
    steps = np.arange(rows.shape[0])
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    ax.plot(steps, rows[:, 2], color="C0", lw=1.4, label="total")
    eps = rows[:, 1]
    changes = np.flatnonzero(np.diff(eps) != 0.0) + 1
    for pos in changes:
        ax.axvline(float(pos) - 0.5, color="0.75", lw=0.8, ls="--")
    ax.set_xlabel("accepted step")
    ax.set_ylabel("energy")
    ax.set_title(title or "energy descent")
    ax.legend(loc="best", frameon=False)
    out = Path(path)
    fig.savefig(out, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return out


def qi_figure(report, path: str | Path, tolerance: float | None = None) -> Path:
    """Relative quadrature residuals per test, one bar pair per route."""
    rows = report.rows
    if not rows:
        raise ValueError("report has no rows")
    names = [r.test_name for r in rows]
    contour = [abs(r.residual_contour) / r.scale for r in rows]
    green = [abs(r.residual_green) / r.scale for r in rows]
    pos = np.arange(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6.0, 0.55 * len(rows) + 2.0), 4.0))
    ax.bar(pos - width / 2, contour, width, label="contour", color="C0")
    ax.bar(pos + width / 2, green, width, label="green", color="C1")
    if tolerance is not None:
        ax.axhline(tolerance, color="crimson", lw=1.0, ls="--", label="tolerance")
    ax.set_xticks(pos)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("relative residual")
    ax.set_yscale("log")
    ax.set_title("quadrature identity residuals")
    ax.legend(loc="best", frameon=False)
    out = Path(path)
    fig.savefig(out, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return out


def cone_figure(profile, path: str | Path) -> Path:
    """Cone cross-section f(theta) with the opening angle marked."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(np.degrees(profile.thetas), profile.values, color="C0", lw=1.4)
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.axvline(profile.theta0_deg, color="crimson", lw=1.0, ls="--")
    ax.annotate(
        f"theta0 = {profile.theta0_deg:.4f} deg",
        xy=(profile.theta0_deg, 0.0),
        xytext=(profile.theta0_deg + 4.0, 0.25 * float(np.max(profile.values))),
        fontsize=9,
    )
    ax.set_xlabel("theta (degrees)")
    ax.set_ylabel("f(theta)")
    ax.set_title("separable cone profile")
    out = Path(path)
    fig.savefig(out, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return out


def radial_figure(solution, path: str | Path, label: str = "u(r)") -> Path:
    """Piecewise radial profile sampled on each of its pieces."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for piece in solution.pieces:
        lo = max(piece.r_lo, 1e-6)
        rs = np.linspace(lo, piece.r_hi, 200)
        if solution.dim == 2:
            kernel = np.log(rs)
        else:
            kernel = rs ** (2.0 - solution.dim)
        ax.plot(rs, piece.a + piece.b * kernel, color="C0", lw=1.4)
    for radius in solution.zero_radii:
        ax.axvline(radius, color="0.75", lw=0.8, ls="--")
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("r")
    ax.set_ylabel(label)
    ax.set_title("radial profile")
    out = Path(path)
    fig.savefig(out, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return out


def boundary_figure(classification, path: str | Path) -> Path:
    """Scatter of boundary element midpoints colored by regularity label."""
    geometry = classification.geometry
    mids = geometry.midpoints
    labels = np.asarray(classification.labels)
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    palette = {"one_phase": "C0", "two_phase": "C1", "branch": "C3"}
    for name, color in palette.items():
        mask = labels == name
        if not np.any(mask):
            continue
        ax.scatter(
            mids[mask, 0], mids[mask, 1], s=6, color=color, label=name, alpha=0.8
        )
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title("boundary elements")
    ax.set_aspect("equal")
    ax.legend(loc="best", frameon=False, fontsize=8)
    out = Path(path)
    fig.savefig(out, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return out

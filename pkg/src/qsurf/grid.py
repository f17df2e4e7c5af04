"""Uniform Cartesian grids, nodal scalar fields, and mollified measures.

Everything downstream (energies, solvers, surface integrals) is built on the
three primitives here: an isotropic node-based grid, trapezoidal volume
integration, and the forward-difference Dirichlet form evaluated on cells.
The Dirichlet form is exact for linear fields, which pins its normalization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import map_coordinates

FloatArray = NDArray[np.float64]

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class SupportEscapesBoxError(ValueError):
    """A measure atom or shell sits too close to the box boundary."""


class BallEscapesBoxError(ValueError):
    """A probe ball is not fully contained in the grid box."""


def unit_ball_volume(dim: int) -> float:
    """Volume of the unit ball in ``dim`` dimensions."""
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)


def unit_sphere_area(dim: int) -> float:
    """Surface area of the unit sphere bounding the unit ball in ``dim`` dimensions."""
    return dim * unit_ball_volume(dim)


@dataclass(frozen=True)
class Grid:
    """Isotropic Cartesian grid over an axis-aligned box.

    Nodes sit at ``origin + h * index`` with ``cells_per_axis[k] + 1`` nodes
    along axis ``k``. Fields are stored nodally in row-major index order.
    """

    dim: int
    origin: tuple[float, ...]
    h: float
    cells_per_axis: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if not math.isfinite(self.h) or self.h <= 0.0:
            raise ValueError(f"spacing h must be positive and finite, got {self.h}")
        if len(self.origin) != self.dim or len(self.cells_per_axis) != self.dim:
            raise ValueError("origin and cells_per_axis must match dim")
        if any(not math.isfinite(x) for x in self.origin):
            raise ValueError("origin coordinates must be finite")
        if any(int(c) != c or c < 8 for c in self.cells_per_axis):
            raise ValueError("cells_per_axis entries must be integers >= 8")

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cells_per_axis)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def box_min(self) -> FloatArray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def box_max(self) -> FloatArray:
        return self.box_min + self.h * np.asarray(self.cells_per_axis, dtype=np.float64)

    def axes(self) -> list[FloatArray]:
        """Per-axis node coordinate arrays."""
        return [
            self.origin[k] + self.h * np.arange(self.cells_per_axis[k] + 1, dtype=np.float64)
            for k in range(self.dim)
        ]

    def node_weights(self) -> FloatArray:
        """Trapezoidal quadrature weights (units of volume), halved on box faces."""
        w = np.ones(self.node_shape, dtype=np.float64)
        for k in range(self.dim):
            sl_lo = [slice(None)] * self.dim
            sl_hi = [slice(None)] * self.dim
            sl_lo[k] = 0
            sl_hi[k] = -1
            w[tuple(sl_lo)] *= 0.5
            w[tuple(sl_hi)] *= 0.5
        return w * self.h**self.dim

    def index_coordinates(self, points: FloatArray) -> FloatArray:
        """Map physical points, shape (n, dim), to fractional index coordinates."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (pts - self.box_min) / self.h

    def contains_points(self, points: FloatArray, margin: float = 0.0) -> bool:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lo = self.box_min + margin
        hi = self.box_max - margin
        return bool(np.all(pts >= lo) and np.all(pts <= hi))

    def contains_ball(self, center: Sequence[float], radius: float) -> bool:
        c = np.asarray(center, dtype=np.float64)
        return bool(np.all(c - radius >= self.box_min) and np.all(c + radius <= self.box_max))


def build_grid(
    dim: int,
    origin: Sequence[float],
    h: float,
    cells_per_axis: Sequence[int],
) -> Grid:
    """Validate parameters and construct a :class:`Grid`."""
    return Grid(
        dim=int(dim),
        origin=tuple(float(x) for x in origin),
        h=float(h),
        cells_per_axis=tuple(int(c) for c in cells_per_axis),
    )


@dataclass
class ScalarField:
    """Nodal values over a grid. Values are float64 and finite."""

    grid: Grid
    values: FloatArray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.node_shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match node shape {self.grid.node_shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def constant_field(grid: Grid, value: float) -> ScalarField:
    return ScalarField(grid, np.full(grid.node_shape, float(value), dtype=np.float64))


def field_from_function(grid: Grid, fn: Callable[..., FloatArray]) -> ScalarField:
    """Sample ``fn(x0, x1[, x2])`` on the node lattice (broadcasting ufunc style)."""
    mesh = np.meshgrid(*grid.axes(), indexing="ij", sparse=True)
    vals = np.asarray(fn(*mesh), dtype=np.float64)
    vals = np.broadcast_to(vals, grid.node_shape).copy()
    return ScalarField(grid, vals)


def integrate(f: ScalarField) -> float:
    """Trapezoidal integral of the field over the box."""
    return float(np.sum(f.values * f.grid.node_weights()))


def _cell_diff(values: FloatArray, axis: int) -> FloatArray:
    """Forward difference along ``axis`` restricted to cell anchors on the other axes."""
    dv = np.diff(values, axis=axis)
    sl = [slice(0, -1)] * values.ndim
    sl[axis] = slice(None)
    return dv[tuple(sl)]


def stiffness_apply(grid: Grid, values: FloatArray) -> FloatArray:
    """Apply the Dirichlet stiffness operator A, where dirichlet_energy = v^T A v."""
    d = grid.dim
    out = np.zeros_like(values)
    for k in range(d):
        dv = _cell_diff(values, k)
        lo = [slice(0, -1)] * d
        hi = [slice(0, -1)] * d
        hi[k] = slice(1, None)
        out[tuple(lo)] -= dv
        out[tuple(hi)] += dv
    return out * grid.h ** (d - 2)


def dirichlet_energy(f: ScalarField) -> float:
    """Sum over cells of the squared forward-difference gradient times cell volume.

    Exact for linear fields; first-order accurate for smooth fields.
    """
    d = f.grid.dim
    total = 0.0
    for k in range(d):
        dv = _cell_diff(f.values, k)
        total += float(np.sum(dv * dv))
    return total * f.grid.h ** (d - 2)


def dirichlet_energy_gradient(grid: Grid, values: FloatArray) -> FloatArray:
    """Gradient of :func:`dirichlet_energy` with respect to nodal values."""
    return 2.0 * stiffness_apply(grid, values)


def laplacian(f: ScalarField) -> FloatArray:
    """Centered 2*dim+1 point discrete Laplacian; zero on box-face nodes."""
    v = f.values
    d = f.grid.dim
    out = np.zeros_like(v)
    core = tuple(slice(1, -1) for _ in range(d))
    acc = -2.0 * d * v[core]
    for k in range(d):
        lo = tuple(slice(0, -2) if a == k else slice(1, -1) for a in range(d))
        hi = tuple(slice(2, None) if a == k else slice(1, -1) for a in range(d))
        acc = acc + v[lo] + v[hi]
    out[core] = acc / f.grid.h**2
    return out


def interpolate(f: ScalarField, points: FloatArray) -> FloatArray:
    """Multilinear interpolation of the field at physical points, shape (n, dim)."""
    idx = f.grid.index_coordinates(points)
    return map_coordinates(f.values, idx.T, order=1, mode="nearest")


def sphere_points(dim: int, n: int) -> FloatArray:
    """Deterministic antipodally symmetric unit-sphere point set of even size >= n.

    Antipodal symmetry makes averages of odd (in particular linear) functions
    vanish to roundoff, so sphere averages of linear fields are exact.
    """
    n = int(n)
    if n % 2:
        n += 1
    if dim == 2:
        theta = 2.0 * math.pi * (np.arange(n) + 0.5) / n
        return np.column_stack([np.cos(theta), np.sin(theta)])
    half = n // 2
    j = np.arange(half, dtype=np.float64)
    z = (2.0 * j + 1.0) / half - 1.0
    phi = j * _GOLDEN_ANGLE
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    return np.vstack([pts, -pts])


def spherical_average(f: ScalarField, center: Sequence[float], r: float) -> float:
    """Average of the field over the sphere of radius ``r`` about ``center``.

    Uses multilinear interpolation at max(64, ceil(8 r / h)) symmetric points.
    Raises BallEscapesBoxError when the sphere is not fully inside the box.
    """
    c = np.asarray(center, dtype=np.float64)
    if r <= 0.0:
        raise ValueError(f"radius must be positive, got {r}")
    if not f.grid.contains_ball(c, r):
        raise BallEscapesBoxError(
            f"sphere of radius {r} about {tuple(c)} leaves the grid box"
        )
    n = max(64, int(math.ceil(8.0 * r / f.grid.h)))
    pts = c[None, :] + r * sphere_points(f.grid.dim, n)
    return float(np.mean(interpolate(f, pts)))


# ---------------------------------------------------------------------------
# Measures


@dataclass(frozen=True)
class Atom:
    """Point mass mollified over a C^1 bump of the given radius."""

    center: tuple[float, ...]
    mass: float
    mollifier_radius: float
    sign: int = 1


@dataclass(frozen=True)
class Shell:
    """Uniform surface measure on a sphere, mollified in the radial coordinate.

    The spec tuple for shells omits a thickness, but the rasterization rule
    needs one, so each shell carries its own mollifier radius.
    """

    center: tuple[float, ...]
    radius: float
    surface_density: float
    mollifier_radius: float
    sign: int = 1


@dataclass(frozen=True)
class MeasureSpec:
    """Finite combination of mollified atoms and shells plus an optional background."""

    atoms: tuple[Atom, ...] = ()
    shells: tuple[Shell, ...] = ()
    background: ScalarField | None = None

    def support_points(self) -> FloatArray:
        pts = [np.asarray(a.center, dtype=np.float64) for a in self.atoms]
        for s in self.shells:
            c = np.asarray(s.center, dtype=np.float64)
            d = c.size
            n = 8 if d == 2 else 12
            pts.extend(c + s.radius * p for p in sphere_points(d, n))
        return np.array(pts) if pts else np.zeros((0, 0))

    def circumradius(self, about: Sequence[float]) -> float:
        """Largest distance from ``about`` to the measure support."""
        c = np.asarray(about, dtype=np.float64)
        r = 0.0
        for a in self.atoms:
            r = max(r, float(np.linalg.norm(np.asarray(a.center) - c)) + a.mollifier_radius)
        for s in self.shells:
            r = max(
                r,
                float(np.linalg.norm(np.asarray(s.center) - c)) + s.radius + s.mollifier_radius,
            )
        return r


def _quartic_bump(s: FloatArray, radius: float) -> FloatArray:
    t = np.clip(np.abs(s) / radius, 0.0, 1.0)
    return (1.0 - t * t) ** 2


def _window_slices(grid: Grid, lo: FloatArray, hi: FloatArray) -> tuple[slice, ...]:
    lo_idx = np.maximum(np.floor((lo - grid.box_min) / grid.h).astype(int), 0)
    hi_idx = np.minimum(
        np.ceil((hi - grid.box_min) / grid.h).astype(int),
        np.asarray(grid.cells_per_axis),
    )
    return tuple(slice(int(a), int(b) + 1) for a, b in zip(lo_idx, hi_idx))


def rasterize_measure(spec: MeasureSpec, grid: Grid) -> ScalarField:
    """Nodal density whose grid integral reproduces each component mass exactly.

    Atoms become radially symmetric C^1 bumps, shells become mollified annuli;
    each component is renormalized against the grid quadrature so the total
    signed mass is conserved to machine precision.
    """
    vals = np.zeros(grid.node_shape, dtype=np.float64)
    axes = grid.axes()

    def _local_radii(center: FloatArray, window: tuple[slice, ...]) -> FloatArray:
        sq = np.zeros(tuple(s.stop - s.start for s in window), dtype=np.float64)
        for k in range(grid.dim):
            coord = axes[k][window[k]] - center[k]
            shape = [1] * grid.dim
            shape[k] = coord.size
            sq = sq + (coord.reshape(shape)) ** 2
        return np.sqrt(sq)

    for atom in spec.atoms:
        c = np.asarray(atom.center, dtype=np.float64)
        rho = float(atom.mollifier_radius)
        if rho <= 0.0:
            raise ValueError("atom mollifier_radius must be positive")
        if not grid.contains_ball(c, 3.0 * rho):
            raise SupportEscapesBoxError(
                f"atom at {tuple(c)} is closer than 2 mollifier radii to the box boundary"
            )
        if atom.mass == 0.0:
            continue
        window = _window_slices(grid, c - rho, c + rho)
        bump = _quartic_bump(_local_radii(c, window), rho)
        raw = float(np.sum(bump)) * grid.h**grid.dim
        if raw <= 0.0:
            raise ValueError(
                f"atom mollifier_radius {rho} is below grid resolution h={grid.h}"
            )
        vals[window] += (atom.sign * atom.mass / raw) * bump

    for shell in spec.shells:
        c = np.asarray(shell.center, dtype=np.float64)
        rho = float(shell.mollifier_radius)
        if rho <= 0.0 or shell.radius <= 0.0:
            raise ValueError("shell radius and mollifier_radius must be positive")
        outer = shell.radius + rho
        if not grid.contains_ball(c, outer + 2.0 * rho):
            raise SupportEscapesBoxError(
                f"shell at {tuple(c)} radius {shell.radius} is closer than "
                "2 mollifier radii to the box boundary"
            )
        if shell.surface_density == 0.0:
            continue
        window = _window_slices(grid, c - outer, c + outer)
        bump = _quartic_bump(_local_radii(c, window) - shell.radius, rho)
        raw = float(np.sum(bump)) * grid.h**grid.dim
        if raw <= 0.0:
            raise ValueError(
                f"shell mollifier_radius {rho} is below grid resolution h={grid.h}"
            )
        area = unit_sphere_area(grid.dim) * shell.radius ** (grid.dim - 1)
        vals[window] += (shell.sign * shell.surface_density * area / raw) * bump

    if spec.background is not None:
        if spec.background.grid != grid:
            raise ValueError("background field lives on a different grid")
        vals += spec.background.values

    return ScalarField(grid, vals)


# ---------------------------------------------------------------------------
# Persistence


def save_field(f: ScalarField, path: str | Path) -> tuple[Path, Path]:
    """Write a JSON header and a sibling little-endian float64 raw file.

    ``path`` may carry any suffix; the pair is written as ``<stem>.json`` and
    ``<stem>.raw`` next to it. Returns the two paths.
    """
    base = Path(path)
    header_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    header = {
        "dim": f.grid.dim,
        "origin": list(f.grid.origin),
        "h": f.grid.h,
        "cells_per_axis": list(f.grid.cells_per_axis),
        "value_count": int(f.values.size),
        "byte_order": "little",
        "scalar": "float64",
    }
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    return header_path, raw_path


def load_field(path: str | Path) -> ScalarField:
    """Read a field written by :func:`save_field`; exact round trip."""
    base = Path(path)
    header_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    header = json.loads(header_path.read_text())
    if header.get("scalar") != "float64" or header.get("byte_order") != "little":
        raise ValueError(f"unsupported field encoding in {header_path}")
    grid = build_grid(
        header["dim"], header["origin"], header["h"], header["cells_per_axis"]
    )
    data = np.frombuffer(raw_path.read_bytes(), dtype="<f8")
    if data.size != header["value_count"] or data.size != grid.node_count:
        raise ValueError(f"value count mismatch reading {raw_path}")
    return ScalarField(grid, data.reshape(grid.node_shape).astype(np.float64))

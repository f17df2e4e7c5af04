"""Free-boundary extraction, classification, and quantitative probes.

Contours come from marching squares/cubes on the node lattice. Every probe
reports raw ratios; verdicts are only issued against user-supplied
thresholds because the constants in the underlying estimates are not
constructive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure as _skmeasure

from .energy import resolve_tau
from .grid import (
    BallEscapesBoxError,
    FloatArray,
    Grid,
    ScalarField,
    interpolate,
    laplacian,
    spherical_average,
    unit_ball_volume,
)


class SegregationViolationError(ValueError):
    """Two phase fields overlap beyond the segregation tolerance."""


@dataclass
class BoundaryGeometry:
    """Surface elements of one extracted level set.

    midpoints, normals are (M, dim); weights holds element length (2D) or
    area (3D); phase_pair labels each element (i, j), j = 0 meaning the
    element separates phase i from the null region u = 0.
    """

    grid: Grid
    midpoints: FloatArray
    normals: FloatArray
    weights: FloatArray
    phase_pairs: np.ndarray
    extraction_level: float

    def __post_init__(self) -> None:
        m = self.midpoints.shape[0]
        if self.normals.shape != (m, self.grid.dim) or self.weights.shape != (m,):
            raise ValueError("element arrays disagree on length")
        if self.phase_pairs.shape != (m, 2):
            raise ValueError("phase_pairs must be (M, 2)")
        if m and np.min(self.weights) <= 0.0:
            raise ValueError("element weights must be positive")
        if m:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-8:
                raise ValueError("normals must be unit vectors")

    def __len__(self) -> int:
        return self.midpoints.shape[0]

    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    def as_rows(self) -> list[list[float]]:
        rows = []
        for k in range(len(self)):
            rows.append(
                list(self.midpoints[k])
                + list(self.normals[k])
                + [float(self.weights[k]), int(self.phase_pairs[k, 0]), int(self.phase_pairs[k, 1])]
            )
        return rows

    def csv_header(self) -> list[str]:
        dim = self.grid.dim
        names = [f"mid_{ax}" for ax in "xyz"[:dim]]
        names += [f"normal_{ax}" for ax in "xyz"[:dim]]
        return names + ["weight", "phase_i", "phase_j"]


def merge_geometries(parts: Sequence[BoundaryGeometry]) -> BoundaryGeometry:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("nothing to merge")
    grid = parts[0].grid
    return BoundaryGeometry(
        grid=grid,
        midpoints=np.concatenate([p.midpoints for p in parts]),
        normals=np.concatenate([p.normals for p in parts]),
        weights=np.concatenate([p.weights for p in parts]),
        phase_pairs=np.concatenate([p.phase_pairs for p in parts]),
        extraction_level=parts[0].extraction_level,
    )


@dataclass
class BoundaryClassification:
    """Per-element labels partitioning the free boundary.

    Elements near another phase are two_phase, elements far from every
    other phase are one_phase, and the transition annulus between the two
    regimes is labeled branch.
    """

    geometry: BoundaryGeometry
    labels: np.ndarray
    classification_radius: float

    def count(self, label: str) -> int:
        return int(np.sum(self.labels == label))


@dataclass
class ProbeReport:
    """Outcome of one quantitative probe at one center."""

    name: str
    center: tuple[float, ...]
    radii: list[float]
    values: list[float]
    verdict: str
    threshold: float | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.values) != len(self.radii):
            raise ValueError("one value per radius is required")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("probe values must be finite")

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "center": list(self.center),
            "radii": self.radii,
            "values": self.values,
            "verdict": self.verdict,
            "threshold": self.threshold,
            "details": self.details,
        }


@dataclass(frozen=True)
class SupportCells:
    """Cells fully inside a phase and the partially covered rim cells."""

    interior: np.ndarray
    boundary: np.ndarray

    def cell_count(self) -> int:
        return int(np.sum(self.interior))


def _cell_corner_extrema(values: FloatArray) -> tuple[FloatArray, FloatArray]:
    lo = values
    hi = values
    for axis in range(values.ndim):
        sl_a = [slice(None)] * values.ndim
        sl_b = [slice(None)] * values.ndim
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        lo = np.minimum(lo[tuple(sl_a)], lo[tuple(sl_b)])
        hi = np.maximum(hi[tuple(sl_a)], hi[tuple(sl_b)])
    return lo, hi


def extract_supports(u: ScalarField, tau: float | None = None) -> tuple[SupportCells, SupportCells]:
    """Per-cell positive and negative supports at threshold tau.

    A cell is interior when every corner clears the threshold and boundary
    when only some corners do. With tau > 0 the two interiors are disjoint.
    """
    tau = resolve_tau(tau, u)
    lo, hi = _cell_corner_extrema(u.values)
    pos = SupportCells(interior=lo > tau, boundary=(hi > tau) & ~(lo > tau))
    neg = SupportCells(interior=hi < -tau, boundary=(lo < -tau) & ~(hi < -tau))
    return pos, neg


def _orient_normals(
    u: ScalarField, sign: int, midpoints: FloatArray, normals: FloatArray
) -> FloatArray:
    """Flip normals so |u| decreases through the level along them.

    Comparing sign * u rather than |u| keeps the choice stable when the
    probe step crosses the zero set right behind a small extraction level.
    """
    if midpoints.shape[0] == 0:
        return normals
    delta = u.grid.h / 2.0
    ahead = sign * interpolate(u, midpoints + delta * normals)
    behind = sign * interpolate(u, midpoints - delta * normals)
    flip = ahead > behind
    out = normals.copy()
    out[flip] *= -1.0
    return out


def _empty_geometry(grid: Grid, level: float) -> BoundaryGeometry:
    dim = grid.dim
    return BoundaryGeometry(
        grid=grid,
        midpoints=np.zeros((0, dim)),
        normals=np.zeros((0, dim)),
        weights=np.zeros(0),
        phase_pairs=np.zeros((0, 2), dtype=int),
        extraction_level=level,
    )


def phase_extraction_level(u: ScalarField, sign: int = 1, tau: float | None = None) -> float:
    """Extraction level that cuts support-boundary cells mid-range.

    A level at the bare support tolerance puts every crossing next to an
    outer node and the traced set degenerates toward a staircase, which
    inflates lengths and areas. The median last-inside-node value, about
    |grad u| h / 2, keeps the interpolation well conditioned at the cost
    of an O(h) inward bias.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    tau = resolve_tau(tau, u)
    ut = sign * u.values
    support = ut > tau
    floor = max(tau, 1e-300)
    if not support.any():
        return floor
    edge_vals = []
    dim = u.grid.dim
    for axis in range(dim):
        sl_a = [slice(None)] * dim
        sl_b = [slice(None)] * dim
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        a_in = support[tuple(sl_a)]
        b_in = support[tuple(sl_b)]
        a_val = ut[tuple(sl_a)]
        b_val = ut[tuple(sl_b)]
        edge_vals.append(a_val[a_in & ~b_in])
        edge_vals.append(b_val[b_in & ~a_in])
    inside = np.concatenate(edge_vals)
    if inside.size == 0:
        return floor
    return max(float(np.median(inside)), floor)


def extract_contour(
    u: ScalarField,
    level: float,
    sign: int = 1,
    phase_pair: tuple[int, int] = (1, 0),
) -> BoundaryGeometry:
    """Marching-squares/cubes level set of u at sign * level.

    Elements carry midpoints, outward unit normals (oriented by decreasing
    |u|), and length/area weights. An empty level set gives an empty
    geometry, not an error.
    """
    if level <= 0.0:
        raise ValueError("level must be positive")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    grid = u.grid
    target = sign * level
    if grid.dim == 2:
        contours = _skmeasure.find_contours(u.values, target)
        mids, tangents, weights = [], [], []
        for poly in contours:
            pts = grid.box_min[None, :] + poly * grid.h
            seg = pts[1:] - pts[:-1]
            lengths = np.linalg.norm(seg, axis=1)
            keep = lengths > 1e-12 * grid.h
            if not np.any(keep):
                continue
            mids.append(0.5 * (pts[1:] + pts[:-1])[keep])
            tangents.append(seg[keep] / lengths[keep, None])
            weights.append(lengths[keep])
        if not mids:
            return _empty_geometry(grid, level)
        midpoints = np.concatenate(mids)
        tangent = np.concatenate(tangents)
        weights_arr = np.concatenate(weights)
        normals = np.column_stack([tangent[:, 1], -tangent[:, 0]])
    else:
        if not (np.min(u.values) < target < np.max(u.values)):
            return _empty_geometry(grid, level)
        verts, faces, _, _ = _skmeasure.marching_cubes(
            u.values, level=target, spacing=(grid.h,) * 3
        )
        verts = verts + grid.box_min[None, :]
        tri = verts[faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        keep = areas > 1e-14 * grid.h * grid.h
        if not np.any(keep):
            return _empty_geometry(grid, level)
        midpoints = tri[keep].mean(axis=1)
        weights_arr = areas[keep]
        normals = cross[keep] / (2.0 * areas[keep, None])
    normals = _orient_normals(u, sign, midpoints, normals)
    pairs = np.tile(np.asarray(phase_pair, dtype=int), (midpoints.shape[0], 1))
    return BoundaryGeometry(
        grid=grid,
        midpoints=midpoints,
        normals=normals,
        weights=weights_arr,
        phase_pairs=pairs,
        extraction_level=level,
    )


def _phase_fields(solution) -> list[ScalarField]:
    """Accept a solution object, a sequence of fields, or one signed field."""
    if isinstance(solution, ScalarField):
        up = ScalarField(solution.grid, np.maximum(solution.values, 0.0))
        um = ScalarField(solution.grid, np.maximum(-solution.values, 0.0))
        return [up, um]
    if hasattr(solution, "fields"):
        return list(solution.fields)
    return list(solution)


def _solution_tau(solution, tau: float | None, fields: Sequence[ScalarField]) -> float:
    if tau is not None:
        return float(tau)
    found = getattr(solution, "tau", None)
    if found is not None:
        return float(found)
    return resolve_tau(None, *fields)


def classify_boundary(solution, r_class: float | None = None, tau: float | None = None) -> BoundaryClassification:
    """Label boundary elements one_phase / two_phase / branch by proximity.

    An element of phase i is two_phase when another phase's boundary comes
    within r_class of it, one_phase when none comes within 2 r_class, and
    branch in between. Default r_class is 3h.
    """
    fields = _phase_fields(solution)
    if not fields:
        raise ValueError("no phase fields to classify")
    grid = fields[0].grid
    r_class = 3.0 * grid.h if r_class is None else float(r_class)
    level = _solution_tau(solution, tau, fields)
    geoms = [
        extract_contour(f, level=max(level, 1e-300), sign=1, phase_pair=(i + 1, 0))
        for i, f in enumerate(fields)
    ]
    nonempty = [g for g in geoms if len(g)]
    if not nonempty:
        return BoundaryClassification(
            geometry=_empty_geometry(grid, level),
            labels=np.zeros(0, dtype=object),
            classification_radius=r_class,
        )
    merged = merge_geometries(nonempty)
    labels = np.full(len(merged), "one_phase", dtype=object)
    trees = {}
    for g in nonempty:
        i = int(g.phase_pairs[0, 0])
        trees[i] = cKDTree(g.midpoints)
    offsets = np.cumsum([0] + [len(g) for g in nonempty])
    for gi, g in enumerate(nonempty):
        i = int(g.phase_pairs[0, 0])
        other_dists = [
            tree.query(g.midpoints)[0] for j, tree in trees.items() if j != i
        ]
        if not other_dists:
            continue
        nearest = np.min(np.column_stack(other_dists), axis=1)
        block = slice(offsets[gi], offsets[gi + 1])
        block_labels = labels[block]
        block_labels[nearest <= r_class] = "two_phase"
        band = (nearest > r_class) & (nearest < 2.0 * r_class)
        block_labels[band] = "branch"
        labels[block] = block_labels
    return BoundaryClassification(
        geometry=merged, labels=labels, classification_radius=r_class
    )


def junction_scan(solution, r_scan: float | None = None, tau: float | None = None) -> FloatArray:
    """Grid nodes whose r_scan-ball meets the supports of three or more phases.

    Returns an (K, dim) coordinate array; for converged segregated
    minimizers away from the measure supports it is expected to be empty.
    """
    fields = _phase_fields(solution)
    if len(fields) < 3:
        raise ValueError("junction scan needs at least three phases")
    grid = fields[0].grid
    r_scan = 4.0 * grid.h if r_scan is None else float(r_scan)
    level = _solution_tau(solution, tau, fields)
    near_count = np.zeros(grid.node_shape, dtype=int)
    for f in fields:
        support = f.values > level
        if not support.any():
            continue
        dist = ndimage.distance_transform_edt(~support, sampling=grid.h)
        near_count += dist <= r_scan
    hits = np.nonzero(near_count >= 3)
    if hits[0].size == 0:
        return np.zeros((0, grid.dim))
    coords = np.column_stack([grid.box_min[a] + hits[a] * grid.h for a in range(grid.dim)])
    return coords


def nondegeneracy_probe(
    u: ScalarField,
    boundary_point: Sequence[float],
    radii: Sequence[float],
    d_min: float | None = None,
    l0: float | None = None,
    m_hat: float | None = None,
) -> ProbeReport:
    """Spherical averages of u over r, divided by r, at a boundary point.

    Nondegenerate growth keeps the ratio bounded below. When l0 and m_hat
    are supplied, the admissible radius window r < 2 N l0 / m_hat is
    recorded in the details.
    """
    center = tuple(float(c) for c in boundary_point)
    values = [spherical_average(u, center, float(r)) / float(r) for r in radii]
    if d_min is None:
        verdict = "indeterminate"
    else:
        verdict = "pass" if min(values) >= d_min else "fail"
    details: dict = {}
    if l0 is not None and m_hat is not None:
        r_max = 2.0 * u.grid.dim * l0 / m_hat
        details["radius_window_upper"] = r_max
        details["radii_within_window"] = [float(r) for r in radii if r < r_max]
    return ProbeReport(
        name="nondegeneracy",
        center=center,
        radii=[float(r) for r in radii],
        values=values,
        verdict=verdict,
        threshold=d_min,
        details=details,
    )


def _ball_samples(grid: Grid, center: FloatArray, r: float) -> FloatArray:
    """Subcell lattice samples of the ball, at least 8 per cell."""
    per_axis = 3 if grid.dim == 2 else 2
    step = grid.h / per_axis
    lo = center - r
    counts = int(math.ceil(2.0 * r / step)) + 1
    axes = [lo[a] + step * np.arange(counts) for a in range(grid.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    inside = np.linalg.norm(pts - center[None, :], axis=1) <= r
    return pts[inside]


def density_ratio(
    u: ScalarField, center: Sequence[float], r: float, tau: float | None = None
) -> float:
    """Volume fraction of the ball where u exceeds tau, by subcell sampling."""
    grid = u.grid
    c = np.asarray(center, dtype=np.float64)
    if not grid.contains_ball(c, r):
        raise BallEscapesBoxError(f"ball of radius {r} at {center} leaves the box")
    tau = resolve_tau(tau, u)
    pts = _ball_samples(grid, c, r)
    vals = interpolate(u, pts)
    return float(np.mean(vals > tau))


def _weighted_dirichlet(u: ScalarField, center: FloatArray, r: float) -> float:
    """Integral of |grad u|^2 / |x - c|^(N-2) over the ball, cell quadrature.

    The singular weight is clamped at h/2 so the center cell contributes a
    bounded amount; in 2D the weight is identically one.
    """
    grid = u.grid
    grad_sq = np.zeros([n - 1 for n in grid.node_shape])
    for axis in range(grid.dim):
        sl_a = [slice(None)] * grid.dim
        sl_b = [slice(None)] * grid.dim
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        dv = u.values[tuple(sl_b)] - u.values[tuple(sl_a)]
        for other in range(grid.dim):
            if other == axis:
                continue
            sl = [slice(None)] * grid.dim
            sl[other] = slice(0, -1)
            dv = dv[tuple(sl)]
        grad_sq += (dv / grid.h) ** 2
    centers = [
        grid.box_min[a] + grid.h * (np.arange(grid.node_shape[a] - 1) + 0.5)
        for a in range(grid.dim)
    ]
    mesh = np.meshgrid(*centers, indexing="ij", sparse=True)
    dist = np.sqrt(sum((m - center[a]) ** 2 for a, m in enumerate(mesh)))
    inside = dist <= r
    if grid.dim == 2:
        weight = 1.0
    else:
        weight = 1.0 / np.maximum(dist, grid.h / 2.0) ** (grid.dim - 2)
    return float(np.sum(grad_sq * weight * inside) * grid.h**grid.dim)


@dataclass(frozen=True)
class CjkResult:
    """Three-phase monotonicity product and its ingredients."""

    product: float
    integrals: tuple[float, float, float]
    radius: float
    epsilon: float
    bound_proxy: float


def cjk_product(
    u1: ScalarField,
    u2: ScalarField,
    u3: ScalarField,
    center: Sequence[float],
    r: float,
    epsilon: float = 0.1,
    tau: float | None = None,
) -> CjkResult:
    """Product of three weighted Dirichlet integrals scaled by r^(-3(2+eps)).

    The fields must be nonnegative and pairwise segregated up to tau^2.
    Bounded products as r shrinks rule out triple junctions at the center.
    """
    fields = (u1, u2, u3)
    grid = u1.grid
    c = np.asarray(center, dtype=np.float64)
    if not grid.contains_ball(c, r):
        raise BallEscapesBoxError(f"ball of radius {r} at {center} leaves the box")
    tau = resolve_tau(tau, *fields)
    for i in range(3):
        if float(np.min(fields[i].values)) < -tau:
            raise ValueError(f"field {i + 1} is not nonnegative")
        for j in range(i + 1, 3):
            overlap = float(np.max(fields[i].values * fields[j].values))
            if overlap > tau * tau:
                raise SegregationViolationError(
                    f"fields {i + 1} and {j + 1} overlap with product {overlap}"
                )
    integrals = tuple(_weighted_dirichlet(f, c, r) for f in fields)
    product = float(np.prod(integrals)) * r ** (-3.0 * (2.0 + epsilon))
    r_max = float(min(np.min(c - grid.box_min), np.min(grid.box_max - c)))
    proxy = (1.0 + sum(_weighted_dirichlet(f, c, r_max) for f in fields)) ** 3
    return CjkResult(
        product=product,
        integrals=integrals,
        radius=float(r),
        epsilon=float(epsilon),
        bound_proxy=proxy,
    )


def aux_weighted_bound_check(
    u: ScalarField, center: Sequence[float], radius: float = 1.0
) -> ProbeReport:
    """Ratio of the weighted gradient integral on B_r to 1 + the L2 mass on B_2r.

    The underlying bound holds for functions with Delta u >= -1; the probe
    reports the ratio for regression and records any precondition slack.
    """
    grid = u.grid
    c = np.asarray(center, dtype=np.float64)
    if not grid.contains_ball(c, 2.0 * radius):
        raise BallEscapesBoxError("the doubled ball must stay inside the box")
    left = _weighted_dirichlet(u, c, radius)
    mesh = np.meshgrid(*grid.axes(), indexing="ij", sparse=True)
    dist = np.sqrt(sum((m - c[a]) ** 2 for a, m in enumerate(mesh)))
    big_ball = dist <= 2.0 * radius
    right = 1.0 + float(np.sum(u.values**2 * big_ball) * grid.h**grid.dim)
    lap = laplacian(u)
    slack = float(np.min(lap[big_ball])) if big_ball.any() else 0.0
    violated = slack < -1.0 - 10.0 * grid.h
    return ProbeReport(
        name="aux_weighted_bound",
        center=tuple(float(x) for x in c),
        radii=[float(radius)],
        values=[left / right],
        verdict="indeterminate",
        threshold=None,
        details={
            "left": left,
            "right": right,
            "laplacian_min_on_ball": slack,
            "subharmonicity_violated": bool(violated),
        },
    )


def poincare_ratio(
    v: ScalarField, center: Sequence[float], r: float, tau: float | None = None
) -> float:
    """|{v = 0} in B_r| (mean_{sphere} v / r)^2 over the Dirichlet energy in B_r.

    Zero right side with positive left returns +inf; zero left returns 0.
    """
    grid = v.grid
    c = np.asarray(center, dtype=np.float64)
    if not grid.contains_ball(c, r):
        raise BallEscapesBoxError(f"ball of radius {r} at {center} leaves the box")
    tau = resolve_tau(tau, v)
    pts = _ball_samples(grid, c, r)
    vals = interpolate(v, pts)
    zero_fraction = float(np.mean(np.abs(vals) <= tau))
    zero_measure = zero_fraction * unit_ball_volume(grid.dim) * r**grid.dim
    mean_term = (spherical_average(v, c, r) / r) ** 2
    left = zero_measure * mean_term
    right = _ball_dirichlet(v, c, r)
    if left == 0.0:
        return 0.0
    if right < 1e-14:
        return math.inf
    return left / right


def _ball_dirichlet(u: ScalarField, center: FloatArray, r: float) -> float:
    grid = u.grid
    grad_sq = np.zeros([n - 1 for n in grid.node_shape])
    for axis in range(grid.dim):
        sl_a = [slice(None)] * grid.dim
        sl_b = [slice(None)] * grid.dim
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        dv = u.values[tuple(sl_b)] - u.values[tuple(sl_a)]
        for other in range(grid.dim):
            if other == axis:
                continue
            sl = [slice(None)] * grid.dim
            sl[other] = slice(0, -1)
            dv = dv[tuple(sl)]
        grad_sq += (dv / grid.h) ** 2
    centers = [
        grid.box_min[a] + grid.h * (np.arange(grid.node_shape[a] - 1) + 0.5)
        for a in range(grid.dim)
    ]
    mesh = np.meshgrid(*centers, indexing="ij", sparse=True)
    dist2 = sum((m - center[a]) ** 2 for a, m in enumerate(mesh))
    inside = dist2 <= r * r
    return float(np.sum(grad_sq * inside) * grid.h**grid.dim)


def reflect_compare(
    u: ScalarField,
    normal: Sequence[float],
    offset: float,
    flip_sign: bool = False,
) -> float:
    """Signed max of u - u_reflected over the half-space past the plane.

    The plane is {x . n = offset}. With flip_sign the reflected field enters
    with a minus sign, which tests odd symmetry instead of even. Values near
    zero mean the moving-plane comparison holds.
    """
    grid = u.grid
    n = np.asarray(normal, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm < 1e-14:
        raise ValueError("normal must be nonzero")
    n = n / norm
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    proj = pts @ n - offset
    ahead = proj > 0.0
    if not ahead.any():
        return 0.0
    pts = pts[ahead]
    reflected = pts - 2.0 * proj[ahead, None] * n[None, :]
    in_box = np.all(
        (reflected >= grid.box_min[None, :] - 1e-12)
        & (reflected <= grid.box_max[None, :] + 1e-12),
        axis=1,
    )
    if not in_box.any():
        return 0.0
    here = u.values.ravel()[ahead][in_box]
    there = interpolate(u, reflected[in_box])
    sign = -1.0 if flip_sign else 1.0
    return float(np.max(here - sign * there))


def lipschitz_quotient(u: ScalarField) -> float:
    """Max finite-difference slope over grid edges, a regression-only probe."""
    grid = u.grid
    best = 0.0
    for axis in range(grid.dim):
        dv = np.abs(np.diff(u.values, axis=axis)) / grid.h
        if dv.size:
            best = max(best, float(np.max(dv)))
    return best

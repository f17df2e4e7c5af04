"""Harmonic test functions and quadrature-identity residuals.

Surface integrals are evaluated by two independent routes. The contour
route sums g * h over extracted boundary elements. The Green route uses
the volume identity int(h f) - int(grad h . grad u) over the phase, which
equals the boundary integral of g h for a field stationary on its support
and h harmonic there. In the two-phase difference the strip between the
phases enters neither phase's edge set, so the shared boundary drops out
once rather than being counted with conflicting orientations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .boundary import (
    BoundaryGeometry,
    ProbeReport,
    _ball_samples,
    extract_contour,
    phase_extraction_level,
)
from .energy import resolve_tau
from .grid import (
    FloatArray,
    Grid,
    MeasureSpec,
    ScalarField,
    interpolate,
    rasterize_measure,
    sphere_points,
    unit_ball_volume,
)


class CoincidentPointsError(ValueError):
    """Kernel evaluation at its own singularity."""


class RadiusBelowGridError(ValueError):
    """A probe radius is finer than the grid can resolve."""


@dataclass(frozen=True)
class TestFunction:
    """Harmonic test function with closed-form evaluation and gradient.

    `harmonic` is False for deliberately curved or cutoff-masked functions,
    which suppresses the harmonicity warning in the Green route.
    """

    # keep pytest from collecting this as a test class
    __test__ = False

    kind: str
    name: str
    eval_fn: Callable[[FloatArray], FloatArray]
    grad_fn: Callable[[FloatArray], FloatArray] | None = None
    harmonic: bool = True

    def eval(self, points: FloatArray) -> FloatArray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.eval_fn(pts)

    def grad(self, points: FloatArray) -> FloatArray:
        if self.grad_fn is None:
            raise ValueError(f"test function {self.name} carries no gradient")
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.grad_fn(pts)

    def sample(self, grid: Grid) -> ScalarField:
        mesh = np.meshgrid(*grid.axes(), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return ScalarField(grid, self.eval(pts).reshape(grid.node_shape))


def constant_test() -> TestFunction:
    return TestFunction(
        kind="constant",
        name="const",
        eval_fn=lambda p: np.ones(p.shape[0]),
        grad_fn=lambda p: np.zeros_like(p),
    )


def newtonian_kernel(x: Sequence[float], y: Sequence[float], dim: int) -> float:
    """Fundamental solution G(x - y) of -Laplace, normalized so -ΔG = δ.

    2D: -(1/2π) log|x-y|; N >= 3: |x-y|^(2-N) / ((N-2) N ω_N) with ω_N the
    unit-ball volume, so N ω_N is the unit-sphere area. The sign makes the
    flux of -grad G through any enclosing sphere equal one.
    """
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    r = float(np.linalg.norm(xv - yv))
    if r < 1e-14 * (1.0 + float(np.linalg.norm(xv))):
        raise CoincidentPointsError("kernel evaluated at its singularity")
    if dim == 2:
        return -math.log(r) / (2.0 * math.pi)
    return r ** (2.0 - dim) / ((dim - 2.0) * dim * unit_ball_volume(dim))


def kernel_test(center: Sequence[float], dim: int, name: str | None = None) -> TestFunction:
    """Kernel test function G(x - y) for an exterior point y."""
    y = np.asarray(center, dtype=np.float64)
    if y.size != dim:
        raise ValueError("center must have dim components")
    if dim == 2:

        def ev(p: FloatArray) -> FloatArray:
            r = np.maximum(np.linalg.norm(p - y[None, :], axis=1), 1e-300)
            return -np.log(r) / (2.0 * math.pi)

        def gr(p: FloatArray) -> FloatArray:
            d = p - y[None, :]
            r2 = np.maximum(np.sum(d * d, axis=1), 1e-300)
            return -d / (2.0 * math.pi * r2[:, None])

    else:
        norm = (dim - 2.0) * dim * unit_ball_volume(dim)

        def ev(p: FloatArray) -> FloatArray:
            r = np.maximum(np.linalg.norm(p - y[None, :], axis=1), 1e-300)
            return r ** (2.0 - dim) / norm

        def gr(p: FloatArray) -> FloatArray:
            d = p - y[None, :]
            r = np.maximum(np.linalg.norm(d, axis=1), 1e-300)
            return -d * (r ** (-float(dim)))[:, None] * (dim - 2.0) / norm

    return TestFunction(
        kind="kernel", name=name or f"kernel@{tuple(round(v, 6) for v in y)}", eval_fn=ev, grad_fn=gr
    )


def _poly(name: str, ev, gr) -> TestFunction:
    return TestFunction(kind="harmonic_polynomial", name=name, eval_fn=ev, grad_fn=gr)


def harmonic_polynomials(dim: int, max_degree: int) -> list[TestFunction]:
    """Explicit harmonic polynomial basis up to the requested degree.

    The planar family Re/Im (x + i y)^k is harmonic in 3D as well; the 3D
    list adds the z-bearing harmonics through degree 3.
    """
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    if max_degree < 1:
        return []
    out: list[TestFunction] = []
    z3 = np.zeros(1)

    def pad(gx, gy, p):
        cols = [gx, gy] + ([np.zeros(p.shape[0])] if p.shape[1] == 3 else [])
        return np.column_stack(cols)

    out.append(_poly("x", lambda p: p[:, 0], lambda p: pad(np.ones(p.shape[0]), np.zeros(p.shape[0]), p)))
    out.append(_poly("y", lambda p: p[:, 1], lambda p: pad(np.zeros(p.shape[0]), np.ones(p.shape[0]), p)))
    if max_degree >= 2:
        out.append(_poly("x2-y2", lambda p: p[:, 0] ** 2 - p[:, 1] ** 2, lambda p: pad(2 * p[:, 0], -2 * p[:, 1], p)))
        out.append(_poly("2xy", lambda p: 2 * p[:, 0] * p[:, 1], lambda p: pad(2 * p[:, 1], 2 * p[:, 0], p)))
    if max_degree >= 3:
        out.append(
            _poly(
                "x3-3xy2",
                lambda p: p[:, 0] ** 3 - 3 * p[:, 0] * p[:, 1] ** 2,
                lambda p: pad(3 * p[:, 0] ** 2 - 3 * p[:, 1] ** 2, -6 * p[:, 0] * p[:, 1], p),
            )
        )
        out.append(
            _poly(
                "3x2y-y3",
                lambda p: 3 * p[:, 0] ** 2 * p[:, 1] - p[:, 1] ** 3,
                lambda p: pad(6 * p[:, 0] * p[:, 1], 3 * p[:, 0] ** 2 - 3 * p[:, 1] ** 2, p),
            )
        )
    if max_degree >= 4:
        out.append(
            _poly(
                "x4-6x2y2+y4",
                lambda p: p[:, 0] ** 4 - 6 * p[:, 0] ** 2 * p[:, 1] ** 2 + p[:, 1] ** 4,
                lambda p: pad(
                    4 * p[:, 0] ** 3 - 12 * p[:, 0] * p[:, 1] ** 2,
                    -12 * p[:, 0] ** 2 * p[:, 1] + 4 * p[:, 1] ** 3,
                    p,
                ),
            )
        )
        out.append(
            _poly(
                "4x3y-4xy3",
                lambda p: 4 * p[:, 0] ** 3 * p[:, 1] - 4 * p[:, 0] * p[:, 1] ** 3,
                lambda p: pad(
                    12 * p[:, 0] ** 2 * p[:, 1] - 4 * p[:, 1] ** 3,
                    4 * p[:, 0] ** 3 - 12 * p[:, 0] * p[:, 1] ** 2,
                    p,
                ),
            )
        )
    if dim == 3:
        out.append(_poly("z", lambda p: p[:, 2], lambda p: np.column_stack([z3.repeat(p.shape[0]), z3.repeat(p.shape[0]), np.ones(p.shape[0])])))
        if max_degree >= 2:
            out.append(
                _poly(
                    "xz",
                    lambda p: p[:, 0] * p[:, 2],
                    lambda p: np.column_stack([p[:, 2], np.zeros(p.shape[0]), p[:, 0]]),
                )
            )
            out.append(
                _poly(
                    "yz",
                    lambda p: p[:, 1] * p[:, 2],
                    lambda p: np.column_stack([np.zeros(p.shape[0]), p[:, 2], p[:, 1]]),
                )
            )
            out.append(
                _poly(
                    "z2-(x2+y2)/2",
                    lambda p: p[:, 2] ** 2 - 0.5 * (p[:, 0] ** 2 + p[:, 1] ** 2),
                    lambda p: np.column_stack([-p[:, 0], -p[:, 1], 2 * p[:, 2]]),
                )
            )
        if max_degree >= 3:
            out.append(
                _poly(
                    "xyz",
                    lambda p: p[:, 0] * p[:, 1] * p[:, 2],
                    lambda p: np.column_stack([p[:, 1] * p[:, 2], p[:, 0] * p[:, 2], p[:, 0] * p[:, 1]]),
                )
            )
            out.append(
                _poly(
                    "z(x2-y2)",
                    lambda p: p[:, 2] * (p[:, 0] ** 2 - p[:, 1] ** 2),
                    lambda p: np.column_stack([2 * p[:, 0] * p[:, 2], -2 * p[:, 1] * p[:, 2], p[:, 0] ** 2 - p[:, 1] ** 2]),
                )
            )
            out.append(
                _poly(
                    "z3-1.5z(x2+y2)",
                    lambda p: p[:, 2] ** 3 - 1.5 * p[:, 2] * (p[:, 0] ** 2 + p[:, 1] ** 2),
                    lambda p: np.column_stack(
                        [
                            -3.0 * p[:, 0] * p[:, 2],
                            -3.0 * p[:, 1] * p[:, 2],
                            3.0 * p[:, 2] ** 2 - 1.5 * (p[:, 0] ** 2 + p[:, 1] ** 2),
                        ]
                    ),
                )
            )
    return out


def harmonic_test_set(
    box_min: Sequence[float],
    box_max: Sequence[float],
    measure_points: FloatArray | None,
    count: int,
    max_degree: int = 2,
) -> list[TestFunction]:
    """Constant, harmonic polynomials, and `count` exterior kernels.

    Kernel centers sit on the circle/sphere of radius 1.5x the circumradius
    of the support box (and any measure points) about the box center, which
    keeps every center outside the box inflated by 25%.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    dim = lo.size
    center = 0.5 * (lo + hi)
    circum = float(np.linalg.norm(hi - center))
    if measure_points is not None and len(measure_points):
        pts = np.atleast_2d(np.asarray(measure_points, dtype=np.float64))
        circum = max(circum, float(np.max(np.linalg.norm(pts - center[None, :], axis=1))))
    radius = 1.5 * circum
    tests = [constant_test()]
    tests.extend(harmonic_polynomials(dim, max_degree))
    n_even = count + (count % 2)
    ring = center[None, :] + radius * sphere_points(dim, n_even)
    for i in range(count):
        tests.append(kernel_test(ring[i], dim, name=f"kernel_{i}"))
    return tests


def discrete_harmonicity(test: TestFunction, grid: Grid) -> float:
    """Max discrete Laplacian of the sampled test function on interior nodes."""
    from .grid import laplacian

    sampled = test.sample(grid)
    lap = laplacian(sampled)
    core = lap[(slice(1, -1),) * grid.dim]
    return float(np.max(np.abs(core))) if core.size else 0.0


# ---------------------------------------------------------------------------
# Surface integrals


def _as_boundary_values(g, points: FloatArray) -> FloatArray:
    if isinstance(g, ScalarField):
        return interpolate(g, points)
    return np.full(points.shape[0], float(g))


def surface_integral_contour(geometry: BoundaryGeometry, g, test: TestFunction) -> float:
    """Sum of g * h * weight over extracted boundary elements."""
    if len(geometry) == 0:
        return 0.0
    gv = _as_boundary_values(g, geometry.midpoints)
    hv = test.eval(geometry.midpoints)
    return float(np.sum(gv * hv * geometry.weights))


def _sample_nodes(test: TestFunction, grid: Grid) -> FloatArray:
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return test.eval(pts).reshape(grid.node_shape)


def surface_integral_green(
    u: ScalarField,
    sign: int,
    f_s: ScalarField,
    test: TestFunction,
    tau: float | None = None,
) -> float:
    """Volume-route value of the boundary integral of |grad u| h.

    Computes sum over the support {sign u > tau} of h f_s times cell volume
    minus the edge pairing sum of dh d(sign u) h^(d-2) over edges interior
    to the support. For a field stationary on its support (-Lap u = f_s)
    and h harmonic there, this equals the surface integral of g h with
    g = |grad u| on the free boundary. A test function that is visibly
    non-harmonic on the support triggers a warning.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    grid = u.grid
    if f_s.grid != grid:
        raise ValueError("source field lives on a different grid")
    tau = resolve_tau(tau, u)
    ut = sign * u.values
    support = ut > tau
    if not support.any():
        return 0.0
    h_vals = _sample_nodes(test, grid)
    if test.harmonic:
        _warn_if_curved(h_vals, support, grid, test.name)
    source = float(np.sum(h_vals[support] * f_s.values[support])) * grid.h**grid.dim
    pairing = 0.0
    for axis in range(grid.dim):
        sl_a = [slice(None)] * grid.dim
        sl_b = [slice(None)] * grid.dim
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        both = support[tuple(sl_a)] & support[tuple(sl_b)]
        du = ut[tuple(sl_b)] - ut[tuple(sl_a)]
        dh = h_vals[tuple(sl_b)] - h_vals[tuple(sl_a)]
        pairing += float(np.sum(du * dh * both))
    return source - pairing * grid.h ** (grid.dim - 2)


def _warn_if_curved(h_vals: FloatArray, support, grid: Grid, name: str) -> None:
    from .grid import laplacian

    lap = laplacian(ScalarField(grid, h_vals))
    interior = np.zeros(grid.node_shape, dtype=bool)
    interior[(slice(1, -1),) * grid.dim] = True
    probe = support & interior
    if not probe.any():
        return
    tol = 100.0 * grid.h**2 * (1.0 + float(np.max(np.abs(h_vals))))
    worst = float(np.max(np.abs(lap[probe])))
    if worst > tol:
        warnings.warn(
            f"test function {name} has discrete Laplacian {worst} on the phase",
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# Quadrature-identity reports


@dataclass(frozen=True)
class QIRow:
    """One test function's residuals for one phase pair."""

    test_name: str
    kind: str
    pair: tuple[int, int]
    lhs_contour: float
    lhs_green: float
    rhs: float
    residual_contour: float
    residual_green: float
    scale: float
    collar: float = 0.0

    def as_dict(self) -> dict:
        return {
            "test_name": self.test_name,
            "kind": self.kind,
            "pair": list(self.pair),
            "lhs_contour": self.lhs_contour,
            "lhs_green": self.lhs_green,
            "rhs": self.rhs,
            "residual_contour": self.residual_contour,
            "residual_green": self.residual_green,
            "scale": self.scale,
            "collar": self.collar,
        }


@dataclass
class QIReport:
    """Quadrature-identity residuals over a test set."""

    rows: list[QIRow] = field(default_factory=list)

    def max_relative(self, route: str) -> float:
        if not self.rows:
            return 0.0
        key = {"contour": "residual_contour", "green": "residual_green"}[route]
        return max(abs(getattr(r, key)) / r.scale for r in self.rows)

    def route_disagreement(self) -> float:
        if not self.rows:
            return 0.0
        return max(abs(r.residual_contour - r.residual_green) / r.scale for r in self.rows)

    def csv_header(self) -> list[str]:
        return [
            "test_id",
            "kind",
            "phase_i",
            "phase_j",
            "lhs_contour",
            "lhs_green",
            "rhs",
            "residual_contour",
            "residual_green",
            "scale",
            "collar",
        ]

    def as_rows(self) -> list[list]:
        return [
            [
                r.test_name,
                r.kind,
                r.pair[0],
                r.pair[1],
                r.lhs_contour,
                r.lhs_green,
                r.rhs,
                r.residual_contour,
                r.residual_green,
                r.scale,
                r.collar,
            ]
            for r in self.rows
        ]

    def as_dict(self) -> dict:
        return {"rows": [r.as_dict() for r in self.rows]}


def _signed_phases(solution) -> tuple[Grid, list[tuple[int, ScalarField, int]]]:
    """Normalize the input into (phase index, signed field, sign) triples.

    A single signed field yields phases 1 (its positive part) and 2 (its
    negative part). A list of nonnegative fields yields one triple each.
    """
    if isinstance(solution, ScalarField):
        return solution.grid, [(1, solution, 1), (2, solution, -1)]
    if hasattr(solution, "fields"):
        fields = list(solution.fields)
    else:
        fields = list(solution)
    if len(fields) == 1:
        return fields[0].grid, [(1, fields[0], 1), (2, fields[0], -1)]
    return fields[0].grid, [(i + 1, f, 1) for i, f in enumerate(fields)]


def _measure_density(measure: MeasureSpec | None, grid: Grid) -> FloatArray:
    if measure is None:
        return np.zeros(grid.node_shape)
    return rasterize_measure(measure, grid).values


def _phase_cutoff(
    grid: Grid, fields: list[ScalarField], skip: tuple[int, ...], tau: float
) -> ScalarField | None:
    """Smooth mask vanishing within 2 cells of every phase not in `skip`."""
    others = [f for k, f in enumerate(fields) if k not in skip]
    if not others:
        return None
    cut = np.ones(grid.node_shape)
    for f in others:
        supp = f.values > tau
        if not supp.any():
            continue
        dist = ndimage.distance_transform_edt(~supp, sampling=grid.h)
        s = np.clip((dist - 2.0 * grid.h) / (2.0 * grid.h), 0.0, 1.0)
        cut *= s * s * (3.0 - 2.0 * s)
    return ScalarField(grid, cut)


def _masked_test(test: TestFunction, cutoff: ScalarField | None) -> TestFunction:
    if cutoff is None:
        return test
    return TestFunction(
        kind=test.kind,
        name=test.name + "*cutoff",
        eval_fn=lambda p: test.eval(p) * interpolate(cutoff, p),
        grad_fn=None,
        harmonic=False,
    )


def qi_residual(
    solution,
    measures: Sequence[MeasureSpec | None],
    g,
    tests: Sequence[TestFunction],
    tau: float | None = None,
    sources: Sequence[ScalarField | None] | None = None,
) -> QIReport:
    """Quadrature-identity residuals for both routes over a test set.

    One or two phases come from a signed field; m >= 3 phases come from a
    list of nonnegative fields and are tested pairwise with the test
    functions masked off near the remaining phases. Measures align with
    phases by index; rhs integrals use the rasterized densities, which
    also serve as the Green-route sources unless explicit source fields
    are supplied.
    """
    grid, phases = _signed_phases(solution)
    if len(measures) != len(phases):
        raise ValueError(
            f"got {len(measures)} measures for {len(phases)} phases"
        )
    raw_fields = [ScalarField(grid, np.maximum(s * f.values, 0.0)) for _, f, s in phases]
    level = resolve_tau(tau, *[f for _, f, _ in phases])
    densities = [_measure_density(m, grid) for m in measures]
    if sources is None:
        source_fields = [ScalarField(grid, d) for d in densities]
    else:
        if len(sources) != len(phases):
            raise ValueError("sources must align with phases")
        source_fields = [
            s if s is not None else ScalarField(grid, densities[k])
            for k, s in enumerate(sources)
        ]
    weights = grid.node_weights()
    geoms = [
        extract_contour(
            f,
            level=phase_extraction_level(f, sign=s, tau=level),
            sign=s,
            phase_pair=(i, 0),
        )
        for (i, f, s) in phases
    ]
    multi = len(phases) >= 3
    pairs = (
        [(a, b) for a in range(len(phases)) for b in range(a + 1, len(phases))]
        if multi
        else [(0, 1)]
    )
    rows: list[QIRow] = []
    for test in tests:
        for a, b in pairs:
            cutoff = _phase_cutoff(grid, raw_fields, (a, b), level) if multi else None
            h_eff = _masked_test(test, cutoff)
            lhs_c = surface_integral_contour(geoms[a], g, h_eff) - surface_integral_contour(
                geoms[b], g, h_eff
            )
            lhs_g = surface_integral_green(
                phases[a][1], phases[a][2], source_fields[a], h_eff, tau=level
            ) - surface_integral_green(
                phases[b][1], phases[b][2], source_fields[b], h_eff, tau=level
            )
            h_nodes = _sample_nodes(h_eff, grid)
            rhs = float(np.sum(h_nodes * (densities[a] - densities[b]) * weights))
            collar = 0.0
            if cutoff is not None:
                for gi in (a, b):
                    geom = geoms[gi]
                    if len(geom) == 0:
                        continue
                    gv = _as_boundary_values(g, geom.midpoints)
                    hv = test.eval(geom.midpoints)
                    cut = interpolate(cutoff, geom.midpoints)
                    collar += float(np.sum(np.abs(gv * hv * (1.0 - cut)) * geom.weights))
            scale = max(abs(lhs_c), abs(lhs_g), abs(rhs), 1.0)
            rows.append(
                QIRow(
                    test_name=test.name,
                    kind=test.kind,
                    pair=(phases[a][0], phases[b][0]),
                    lhs_contour=lhs_c,
                    lhs_green=lhs_g,
                    rhs=rhs,
                    residual_contour=lhs_c - rhs,
                    residual_green=lhs_g - rhs,
                    scale=scale,
                    collar=collar,
                )
            )
    return QIReport(rows=rows)


def subharmonic_qi_check(
    solution,
    measures: Sequence[MeasureSpec | None],
    g,
    h_sub: TestFunction,
    tau: float | None = None,
) -> float:
    """Signed Green-route residual for a sub/superharmonic test function.

    For h subharmonic on the positive phase and superharmonic on the
    negative one the identity relaxes to lhs - rhs >= 0. A test function
    curving the wrong way on either phase triggers a warning; a harmonic h
    reproduces the qi_residual Green output exactly.
    """
    grid, phases = _signed_phases(solution)
    if len(measures) != len(phases):
        raise ValueError("measures must align with phases")
    if len(phases) != 2:
        raise ValueError("the inequality check handles one signed field")
    level = resolve_tau(tau, phases[0][1])
    sampled = h_sub.sample(grid)
    from .grid import laplacian

    lap = laplacian(sampled)
    curv_tol = 100.0 * grid.h**2 * (1.0 + float(np.max(np.abs(sampled.values))))
    u = phases[0][1]
    pos = u.values > level
    neg = -u.values > level
    interior = np.zeros(grid.node_shape, dtype=bool)
    interior[(slice(1, -1),) * grid.dim] = True
    if (pos & interior).any() and float(np.min(lap[pos & interior])) < -curv_tol:
        warnings.warn("test function is not subharmonic on the positive phase", stacklevel=2)
    if (neg & interior).any() and float(np.max(lap[neg & interior])) > curv_tol:
        warnings.warn("test function is not superharmonic on the negative phase", stacklevel=2)
    densities = [_measure_density(m, grid) for m in measures]
    relaxed = TestFunction(
        kind=h_sub.kind, name=h_sub.name, eval_fn=h_sub.eval_fn, grad_fn=h_sub.grad_fn, harmonic=False
    )
    lhs = surface_integral_green(
        u, 1, ScalarField(grid, densities[0]), relaxed, tau=level
    ) - surface_integral_green(u, -1, ScalarField(grid, densities[1]), relaxed, tau=level)
    h_nodes = _sample_nodes(h_sub, grid)
    rhs = float(np.sum(h_nodes * (densities[0] - densities[1]) * grid.node_weights()))
    return lhs - rhs


def sakai_check(
    measure: MeasureSpec,
    c_bound: float,
    radii: Sequence[float],
    grid: Grid,
) -> ProbeReport:
    """Concentration check r μ(B_r) / |B_r| > N 6^N c / 3 at support points.

    Radii must be decreasing and at least 2h. Values per radius report the
    minimum over support points; the verdict requires every support point
    to clear the threshold at some radius.
    """
    rs = [float(r) for r in radii]
    if any(b >= a for a, b in zip(rs, rs[1:])):
        raise ValueError("radii must be strictly decreasing")
    if min(rs) < 2.0 * grid.h:
        raise RadiusBelowGridError(
            f"minimum radius {min(rs)} is below twice the grid spacing"
        )
    dim = grid.dim
    threshold = dim * 6.0**dim * c_bound / 3.0
    density = rasterize_measure(measure, grid)
    points = measure.support_points()
    if points.shape[0] == 0:
        raise ValueError("measure has no support points")
    per_point = np.zeros((points.shape[0], len(rs)))
    for pi, pt in enumerate(points):
        for ri, r in enumerate(rs):
            samples = _ball_samples(grid, np.asarray(pt, dtype=np.float64), r)
            mean_density = float(np.mean(interpolate(density, samples)))
            per_point[pi, ri] = r * mean_density
    values = list(np.min(per_point, axis=0))
    point_maxima = np.max(per_point, axis=1)
    verdict = "pass" if bool(np.all(point_maxima > threshold)) else "fail"
    center = tuple(float(x) for x in np.mean(points, axis=0))
    return ProbeReport(
        name="sakai_concentration",
        center=center,
        radii=rs,
        values=[float(v) for v in values],
        verdict=verdict,
        threshold=threshold,
        details={
            "point_maxima": [float(v) for v in point_maxima],
            "support_points": [list(map(float, p)) for p in points],
        },
    )


# ---------------------------------------------------------------------------
# Windowed identity for measure-free closed forms


@dataclass(frozen=True)
class WindowedNullReport:
    """Window-corrected identity residual for a measure-free closed form."""

    test_name: str
    lhs_surface: float
    window_flux: float
    residual: float
    scale: float


def windowed_null_residual(
    factory,
    window_min: Sequence[float],
    window_max: Sequence[float],
    test: TestFunction,
    boundary_points: int = 4096,
    face_points: int = 160,
) -> WindowedNullReport:
    """Residual of the measure-free identity on a window.

    For a harmonic-on-its-phases field with no driving measure, the surface
    integral of g h over the free boundary inside the window equals the
    flux correction over the window faces: the residual
    sum(signs g h dσ) - ∮(h ∂u/∂ν − u ∂h/∂ν) vanishes for true members of
    the family. The boundary term uses the factory's exact boundary chart.
    """
    if factory.boundary_fn is None:
        raise ValueError(f"factory {factory.name} has no boundary chart")
    lo = np.asarray(window_min, dtype=np.float64)
    hi = np.asarray(window_max, dtype=np.float64)
    dim = lo.size
    pts, wts, signs, g_vals = factory.boundary_fn(lo, hi, boundary_points)
    lhs = float(np.sum(signs * g_vals * test.eval(pts) * wts)) if pts.shape[0] else 0.0
    flux = 0.0
    for axis in range(dim):
        others = [a for a in range(dim) if a != axis]
        steps = [np.linspace(lo[a], hi[a], face_points, endpoint=False) for a in others]
        deltas = [(hi[a] - lo[a]) / face_points for a in others]
        mesh = np.meshgrid(*[s + 0.5 * d for s, d in zip(steps, deltas)], indexing="ij")
        area = float(np.prod(deltas))
        for side, coord in ((-1.0, lo[axis]), (1.0, hi[axis])):
            count = mesh[0].size if mesh else 1
            face = np.empty((count, dim))
            face[:, axis] = coord
            for a, m in zip(others, mesh):
                face[:, a] = m.ravel()
            normal = np.zeros(dim)
            normal[axis] = side
            du_n = factory.grad(face) @ normal
            dh_n = test.grad(face) @ normal
            u_vals = factory.eval(face)
            h_vals = test.eval(face)
            flux += float(np.sum(h_vals * du_n - u_vals * dh_n)) * area
    residual = lhs - flux
    scale = max(abs(lhs), abs(flux), 1.0)
    return WindowedNullReport(
        test_name=test.name,
        lhs_surface=lhs,
        window_flux=flux,
        residual=residual,
        scale=scale,
    )

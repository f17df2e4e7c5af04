"""Closed-form reference solutions: radial profiles, Kelvin inversion,
plane and cone families, and the concentration-radius identity.

These are the exact objects the grid solvers are tested against. Radial
solutions are stored piecewise as a + b log r (2D) or a + b r^(2-N) (3D),
so evaluation, differentiation, and inversion are algebra on coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import FloatArray, Grid, ScalarField, unit_sphere_area


class NonvanishingAtInversionSphereError(ValueError):
    """Kelvin inversion requires the profile to vanish on the inversion sphere."""


class StraddlePlaneError(ValueError):
    """Odd reflection requires the support to sit on one side of the plane."""


class NoRootError(ValueError):
    """A transmission system has no admissible outer radius."""


@dataclass(frozen=True)
class RadialPiece:
    """u(r) = a + b * K(r) on [r_lo, r_hi], K = log r (2D) or r^(2-dim) (3D)."""

    r_lo: float
    r_hi: float
    a: float
    b: float


@dataclass
class RadialSolution:
    """Piecewise fundamental-solution profile with recorded matching data.

    zero_radii lists radii where the profile must vanish, gradient_targets
    pairs (radius, |u'|) from boundary conditions, derivative_jumps pairs
    (radius, u'(r+) - u'(r-)) from transmission conditions. validate()
    re-checks all of them from the stored coefficients.
    """

    dim: int
    pieces: list[RadialPiece]
    zero_radii: list[float] = field(default_factory=list)
    gradient_targets: list[tuple[float, float]] = field(default_factory=list)
    derivative_jumps: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if not self.pieces:
            raise ValueError("at least one piece is required")
        for p in self.pieces:
            if p.r_hi <= p.r_lo:
                raise ValueError(f"piece interval [{p.r_lo}, {p.r_hi}] is empty")
        for left, right in zip(self.pieces, self.pieces[1:]):
            if abs(left.r_hi - right.r_lo) > 1e-12 * max(1.0, left.r_hi):
                raise ValueError("pieces must cover contiguous intervals")

    def _kernel(self, r: FloatArray) -> FloatArray:
        return np.log(r) if self.dim == 2 else r ** (2.0 - self.dim)

    def _kernel_deriv(self, r: FloatArray) -> FloatArray:
        return 1.0 / r if self.dim == 2 else (2.0 - self.dim) * r ** (1.0 - self.dim)

    def _piece_index(self, r: FloatArray) -> FloatArray:
        edges = np.array([p.r_lo for p in self.pieces] + [self.pieces[-1].r_hi])
        idx = np.searchsorted(edges, r, side="right") - 1
        idx = np.where(r == edges[-1], len(self.pieces) - 1, idx)
        return idx

    def eval(self, r: FloatArray) -> FloatArray:
        r = np.asarray(r, dtype=np.float64)
        idx = self._piece_index(r)
        inside = (idx >= 0) & (idx < len(self.pieces))
        safe = np.clip(idx, 0, len(self.pieces) - 1)
        a = np.array([p.a for p in self.pieces])[safe]
        b = np.array([p.b for p in self.pieces])[safe]
        vals = a + b * self._kernel(np.maximum(r, 1e-300))
        return np.where(inside, vals, 0.0)

    def deriv(self, r: FloatArray) -> FloatArray:
        r = np.asarray(r, dtype=np.float64)
        idx = self._piece_index(r)
        inside = (idx >= 0) & (idx < len(self.pieces))
        safe = np.clip(idx, 0, len(self.pieces) - 1)
        b = np.array([p.b for p in self.pieces])[safe]
        return np.where(inside, b * self._kernel_deriv(np.maximum(r, 1e-300)), 0.0)

    def deriv_one_sided(self, r: float, side: int) -> float:
        """Derivative approached from below (side=-1) or above (side=+1)."""
        for p in self.pieces:
            if (side < 0 and abs(p.r_hi - r) < 1e-12) or (
                side > 0 and abs(p.r_lo - r) < 1e-12
            ):
                return float(p.b * self._kernel_deriv(np.asarray(r)))
        return float(self.deriv(np.asarray([r]))[0])

    @property
    def support(self) -> tuple[float, float]:
        return self.pieces[0].r_lo, self.pieces[-1].r_hi

    def validate(self, value_tol: float = 1e-12, bc_tol: float = 1e-10) -> None:
        scale = 1.0 + max(abs(p.a) + abs(p.b) for p in self.pieces)
        for left, right in zip(self.pieces, self.pieces[1:]):
            r = left.r_hi
            va = left.a + left.b * float(self._kernel(np.asarray(r)))
            vb = right.a + right.b * float(self._kernel(np.asarray(r)))
            if abs(va - vb) > value_tol * scale:
                raise ValueError(f"value mismatch {va - vb} at breakpoint r={r}")
        for r, jump in self.derivative_jumps:
            got = self.deriv_one_sided(r, +1) - self.deriv_one_sided(r, -1)
            if abs(got - jump) > value_tol * scale:
                raise ValueError(f"derivative jump {got} != {jump} at r={r}")
        for r in self.zero_radii:
            if abs(float(self.eval(np.asarray([r]))[0])) > bc_tol * scale:
                raise ValueError(f"profile does not vanish at r={r}")
        for r, target in self.gradient_targets:
            side = -1 if abs(r - self.support[1]) < 1e-12 else +1
            got = abs(self.deriv_one_sided(r, side))
            if abs(got - target) > bc_tol * scale:
                raise ValueError(f"|u'|({r}) = {got}, expected {target}")

    def to_field(
        self,
        grid: Grid,
        center: Sequence[float],
        core_cap_radius: float | None = None,
    ) -> ScalarField:
        """Sample onto a grid; radii below the cap are evaluated at the cap.

        The cap (default h/2) keeps profiles that diverge at the origin
        finite on the node lattice.
        """
        cap = grid.h / 2.0 if core_cap_radius is None else core_cap_radius
        c = np.asarray(center, dtype=np.float64)
        mesh = np.meshgrid(*grid.axes(), indexing="ij", sparse=True)
        r2 = sum((m - c[k]) ** 2 for k, m in enumerate(mesh))
        r = np.maximum(np.sqrt(r2), cap)
        return ScalarField(grid, self.eval(r))


def radial_one_phase(total_mass: float, g0: float, dim: int) -> RadialSolution:
    """Ball solution for a point source: mass c, boundary gradient g0.

    2D: R = c / (2 pi g0), u = (c / 2 pi) log(R / r).
    3D: R = sqrt(c / (4 pi g0)), u = (c / 4 pi)(1/r - 1/R).
    """
    if total_mass <= 0.0 or g0 <= 0.0:
        raise ValueError("total_mass and g0 must be positive")
    c = float(total_mass)
    if dim == 2:
        R = c / (2.0 * math.pi * g0)
        piece = RadialPiece(0.0, R, a=(c / (2.0 * math.pi)) * math.log(R), b=-c / (2.0 * math.pi))
    elif dim == 3:
        R = math.sqrt(c / (4.0 * math.pi * g0))
        piece = RadialPiece(0.0, R, a=-(c / (4.0 * math.pi)) / R, b=c / (4.0 * math.pi))
    else:
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    return RadialSolution(
        dim=dim,
        pieces=[piece],
        zero_radii=[R],
        gradient_targets=[(R, g0)],
    )


def kelvin_invert(radial: RadialSolution, inversion_radius: float = 1.0) -> RadialSolution:
    """Odd Kelvin transform u*(r) = -(r/i)^(2-N) u(i^2 / r) (2D: -u(i^2/r)).

    Requires the profile to vanish at the inversion radius. Piece intervals
    invert and coefficients map algebraically, so the result is exact.
    """
    i = float(inversion_radius)
    if i <= 0.0:
        raise ValueError("inversion_radius must be positive")
    v = float(radial.eval(np.asarray([i]))[0])
    scale = 1.0 + max(abs(p.a) + abs(p.b) for p in radial.pieces)
    if abs(v) > 1e-10 * scale:
        raise NonvanishingAtInversionSphereError(
            f"profile is {v} at the inversion radius {i}"
        )
    pieces = []
    for p in reversed(radial.pieces):
        r_lo = i * i / p.r_hi
        r_hi = i * i / p.r_lo if p.r_lo > 0.0 else math.inf
        if radial.dim == 2:
            a_new = -p.a - 2.0 * p.b * math.log(i)
            b_new = p.b
        else:
            a_new = -p.b / i
            b_new = -p.a * i
        pieces.append(RadialPiece(r_lo, r_hi, a_new, b_new))
    out = RadialSolution(dim=radial.dim, pieces=pieces)
    out.zero_radii = [i * i / r for r in radial.zero_radii if r > 0.0]
    return out


@dataclass(frozen=True)
class AnnularResult:
    """Annulus solution with its odd Kelvin extension across the inner sphere."""

    solution: RadialSolution
    extension: RadialSolution
    outer_radius: float
    inner_radius: float
    shell_radius: float
    shell_value: float
    inner_gradient: float
    extension_inner_radius: float
    extension_inner_gradient: float
    extension_inner_gradient_alt_scaling: float


def annular_construction(
    shell_radius: float = 2.0,
    shell_density: float = 3.0,
    inner_radius: float = 1.0,
    dim: int = 3,
    g0: float = 1.0,
) -> AnnularResult:
    """Annular solution for a sphere measure, plus its odd Kelvin extension.

    Solves the transmission system for u harmonic on (r0, s) and (s, R) with
    u(r0) = u(R) = 0, |u'(R)| = g0, and derivative jump -density across the
    shell. For 3D the outer radius satisfies
        g0 R^2 - g0 r0 R - density s (s - r0) = 0,
    a quadratic whose positive root must exceed the shell radius.

    The extension reports the computed inner boundary gradient R^N g0 of the
    inverted profile alongside the alternative R^(-N-2) scaling that is
    sometimes quoted for it, so the two candidates can be compared directly.
    """
    if dim != 3:
        raise ValueError("the annular construction is implemented for dim 3")
    s = float(shell_radius)
    rho = float(shell_density)
    r0 = float(inner_radius)
    if not (0.0 < r0 < s) or rho <= 0.0 or g0 <= 0.0:
        raise ValueError("need 0 < inner_radius < shell_radius and positive density, g0")
    disc = (g0 * r0) ** 2 + 4.0 * g0 * rho * s * (s - r0)
    R = (g0 * r0 + math.sqrt(disc)) / (2.0 * g0)
    if R <= s:
        raise NoRootError(
            f"outer radius {R} does not clear the shell radius {s}; density too small"
        )
    B = g0 * R * R
    A = (rho * s * s - B) / r0
    if A <= 0.0:
        raise NoRootError("inner gradient is not positive; shell cannot anchor the annulus")
    # inner piece u = A (1 - r0 / r), outer piece u = B (1/r - 1/R)
    inner = RadialPiece(r0, s, a=A, b=-A * r0)
    outer = RadialPiece(s, R, a=-B / R, b=B)
    solution = RadialSolution(
        dim=3,
        pieces=[inner, outer],
        zero_radii=[r0, R],
        gradient_targets=[(R, g0), (r0, A * r0 / (r0 * r0))],
        derivative_jumps=[(s, -rho)],
    )
    solution.validate()
    inverted = kelvin_invert(solution, inversion_radius=r0)
    ext_pieces = inverted.pieces + solution.pieces
    extension = RadialSolution(dim=3, pieces=ext_pieces)
    ext_inner = r0 * r0 / R
    computed = abs(inverted.deriv_one_sided(ext_inner, +1))
    shell_value = float(solution.eval(np.asarray([s]))[0])
    return AnnularResult(
        solution=solution,
        extension=extension,
        outer_radius=R,
        inner_radius=r0,
        shell_radius=s,
        shell_value=shell_value,
        inner_gradient=abs(A / r0),
        extension_inner_radius=ext_inner,
        extension_inner_gradient=computed,
        extension_inner_gradient_alt_scaling=g0 * R ** (-dim - 2.0),
    )


# ---------------------------------------------------------------------------
# Field factories for closed-form, non-radial families


@dataclass(frozen=True)
class FieldFactory:
    """Closed-form field with analytic gradient and a grid sampler.

    boundary_fn, when present, charts the exact free boundary clipped to a
    window: it maps (window_min, window_max, n) to quadrature points,
    weights summing to the clipped surface measure, per-point phase signs,
    and the exact |grad u| there.
    """

    name: str
    dim: int | None
    eval_fn: Callable[[FloatArray], FloatArray]
    grad_fn: Callable[[FloatArray], FloatArray]
    is_minimizer: bool | None = None
    boundary_fn: Callable[..., tuple[FloatArray, FloatArray, FloatArray, FloatArray]] | None = None

    def eval(self, points: FloatArray) -> FloatArray:
        return self.eval_fn(np.atleast_2d(np.asarray(points, dtype=np.float64)))

    def grad(self, points: FloatArray) -> FloatArray:
        return self.grad_fn(np.atleast_2d(np.asarray(points, dtype=np.float64)))

    def sample(self, grid: Grid) -> ScalarField:
        if self.dim is not None and grid.dim != self.dim:
            raise ValueError(f"{self.name} expects dim {self.dim}, grid has {grid.dim}")
        mesh = np.meshgrid(*grid.axes(), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return ScalarField(grid, self.eval(pts).reshape(grid.node_shape))


def two_plane(
    kind: str,
    axis: int = -1,
    gamma: float = 1.0,
    slope: float = 1.0,
) -> FieldFactory:
    """Half-space and two-plane family members with unit boundary gradient.

    kind 'plus': max(x_a, 0); 'minus': min(x_a, 0); 'gap': max(x_a, 0) +
    min(x_a + gamma, 0) with a dead slab of width gamma; 'linear': slope * x_a,
    which minimizes the signed energy exactly when slope >= 1.
    """
    if kind not in ("plus", "minus", "gap", "linear"):
        raise ValueError(f"unknown two-plane kind {kind!r}")
    if kind == "gap" and gamma < 0.0:
        raise ValueError("gamma must be nonnegative")
    if kind == "linear" and slope <= 0.0:
        raise ValueError("slope must be positive")

    def _coord(points: FloatArray) -> FloatArray:
        return points[:, axis]

    if kind == "plus":
        ev = lambda p: np.maximum(_coord(p), 0.0)
        dv = lambda p: (_coord(p) > 0.0).astype(np.float64)
        mini = True
    elif kind == "minus":
        ev = lambda p: np.minimum(_coord(p), 0.0)
        dv = lambda p: (_coord(p) < 0.0).astype(np.float64)
        mini = True
    elif kind == "gap":
        ev = lambda p: np.maximum(_coord(p), 0.0) + np.minimum(_coord(p) + gamma, 0.0)
        dv = lambda p: ((_coord(p) > 0.0) | (_coord(p) < -gamma)).astype(np.float64)
        mini = True
    else:
        ev = lambda p: slope * _coord(p)
        dv = lambda p: np.full(p.shape[0], slope)
        mini = slope >= 1.0

    def grad(points: FloatArray) -> FloatArray:
        out = np.zeros_like(points)
        out[:, axis] = dv(points)
        return out

    slope_mag = slope if kind == "linear" else 1.0
    if kind == "plus":
        planes = [(0.0, 1.0)]
    elif kind == "minus":
        planes = [(0.0, -1.0)]
    elif kind == "gap":
        planes = [(0.0, 1.0), (-gamma, -1.0)]
    else:
        planes = [(0.0, 1.0), (0.0, -1.0)]

    def boundary(window_min, window_max, n: int):
        lo = np.asarray(window_min, dtype=np.float64)
        hi = np.asarray(window_max, dtype=np.float64)
        dim = lo.size
        ax = axis % dim
        others = [a for a in range(dim) if a != ax]
        pts_list, wts_list, sgn_list = [], [], []
        for offset, plane_sign in planes:
            if not (lo[ax] <= offset <= hi[ax]):
                continue
            steps = [np.linspace(lo[a], hi[a], n, endpoint=False) for a in others]
            deltas = [(hi[a] - lo[a]) / n for a in others]
            mesh = np.meshgrid(
                *[s + 0.5 * d for s, d in zip(steps, deltas)], indexing="ij"
            )
            count = mesh[0].size
            pts = np.empty((count, dim))
            pts[:, ax] = offset
            for a, m in zip(others, mesh):
                pts[:, a] = m.ravel()
            pts_list.append(pts)
            wts_list.append(np.full(count, float(np.prod(deltas))))
            sgn_list.append(np.full(count, plane_sign))
        if not pts_list:
            empty = np.zeros((0, dim))
            return empty, np.zeros(0), np.zeros(0), np.zeros(0)
        pts = np.concatenate(pts_list)
        return (
            pts,
            np.concatenate(wts_list),
            np.concatenate(sgn_list),
            np.full(pts.shape[0], slope_mag),
        )

    return FieldFactory(
        name=f"two_plane_{kind}",
        dim=None,
        eval_fn=ev,
        grad_fn=grad,
        is_minimizer=mini,
        boundary_fn=boundary,
    )


def exterior_ball_null(
    radius: float = 1.0,
    center: Sequence[float] = (0.0, 0.0, 0.0),
    dim: int = 3,
    g0: float = 1.0,
) -> FieldFactory:
    """Harmonic exterior profile vanishing on the sphere with |grad| = g0 there.

    3D and above use b (r^(2-n) - rho^(2-n)) with b = g0 r^(n-1)/(n-2); in 2D
    the closed form degenerates and the logarithmic variant g0 r log(rho/r)
    is supplied instead.
    """
    r = float(radius)
    if r <= 0.0 or g0 <= 0.0:
        raise ValueError("radius and g0 must be positive")
    c = np.asarray(center, dtype=np.float64)
    if c.size != dim:
        raise ValueError("center must have dim components")

    def _rho(points: FloatArray) -> FloatArray:
        return np.maximum(np.linalg.norm(points - c[None, :], axis=1), 1e-300)

    if dim == 2:
        ev = lambda p: np.maximum(g0 * r * np.log(_rho(p) / r), 0.0)

        def grad(points: FloatArray) -> FloatArray:
            rho = _rho(points)
            mag = np.where(rho >= r, g0 * r / rho, 0.0)
            return (points - c[None, :]) * (mag / rho)[:, None]

    else:
        b = g0 * r ** (dim - 1) / (dim - 2)

        def ev(points: FloatArray) -> FloatArray:
            rho = _rho(points)
            return np.maximum(b * (r ** (2.0 - dim) - rho ** (2.0 - dim)), 0.0)

        def grad(points: FloatArray) -> FloatArray:
            rho = _rho(points)
            mag = np.where(rho >= r, b * (dim - 2.0) * rho ** (1.0 - dim), 0.0)
            return (points - c[None, :]) * (mag / rho)[:, None]

    def boundary(window_min, window_max, n: int):
        from .grid import sphere_points, unit_sphere_area

        lo = np.asarray(window_min, dtype=np.float64)
        hi = np.asarray(window_max, dtype=np.float64)
        if np.any(c - r < lo) or np.any(c + r > hi):
            raise ValueError("window must contain the whole sphere")
        n_even = n + (n % 2)
        pts = c[None, :] + r * sphere_points(dim, n_even)
        area = unit_sphere_area(dim) * r ** (dim - 1)
        wts = np.full(n_even, area / n_even)
        return pts, wts, np.ones(n_even), np.full(n_even, g0)

    return FieldFactory(
        name="exterior_ball_null",
        dim=dim,
        eval_fn=ev,
        grad_fn=grad,
        is_minimizer=True,
        boundary_fn=boundary,
    )


# ---------------------------------------------------------------------------
# Axisymmetric cone profile


def _cone_f(theta: FloatArray) -> FloatArray:
    c = np.clip(np.cos(np.asarray(theta, dtype=np.float64)), -1.0 + 1e-15, 1.0 - 1e-15)
    return 2.0 + c * np.log((1.0 - c) / (1.0 + c))


def _cone_f_prime(theta: FloatArray) -> FloatArray:
    t = np.asarray(theta, dtype=np.float64)
    c = np.clip(np.cos(t), -1.0 + 1e-15, 1.0 - 1e-15)
    s = np.maximum(np.sin(t), 1e-15)
    return -s * np.log((1.0 - c) / (1.0 + c)) + 2.0 * c / s


def _cone_f_second(theta: FloatArray) -> FloatArray:
    t = np.asarray(theta, dtype=np.float64)
    c = np.clip(np.cos(t), -1.0 + 1e-15, 1.0 - 1e-15)
    s = np.maximum(np.sin(t), 1e-15)
    return -c * np.log((1.0 - c) / (1.0 + c)) - 2.0 - 2.0 / (s * s)


@dataclass(frozen=True)
class ConeProfile:
    """Separable cone solution u = r f(theta)/f'(theta0) with f(theta0) = 0."""

    theta0_rad: float
    theta0_deg: float
    normalization: float
    thetas: FloatArray
    values: FloatArray

    def f(self, theta: FloatArray) -> FloatArray:
        return _cone_f(theta)

    def f_prime(self, theta: FloatArray) -> FloatArray:
        return _cone_f_prime(theta)

    def ode_residual(self, theta: FloatArray) -> FloatArray:
        """(sin t f')' + 2 sin t f evaluated with the closed-form derivatives."""
        t = np.asarray(theta, dtype=np.float64)
        s, c = np.sin(t), np.cos(t)
        return c * _cone_f_prime(t) + s * _cone_f_second(t) + 2.0 * s * _cone_f(t)

    def field_factory(self) -> FieldFactory:
        theta0 = self.theta0_rad
        norm = self.normalization

        def ev(points: FloatArray) -> FloatArray:
            x, y, z = points[:, 0], points[:, 1], points[:, 2]
            rho = np.sqrt(x * x + y * y + z * z)
            theta = np.arctan2(np.sqrt(x * x + y * y), z)
            return rho * np.maximum(_cone_f(theta) / norm, 0.0)

        def grad(points: FloatArray) -> FloatArray:
            x, y, z = points[:, 0], points[:, 1], points[:, 2]
            s2 = x * x + y * y
            s = np.sqrt(s2)
            rho = np.maximum(np.sqrt(s2 + z * z), 1e-300)
            theta = np.arctan2(s, z)
            F = _cone_f(theta) / norm
            Fp = _cone_f_prime(theta) / norm
            active = F > 0.0
            F = np.where(active, F, 0.0)
            Fp = np.where(active, Fp, 0.0)
            s_safe = np.maximum(s, 1e-300)
            r_hat = np.column_stack([x, y, z]) / rho[:, None]
            theta_hat = np.column_stack([z * x / s_safe, z * y / s_safe, -s]) / rho[:, None]
            return F[:, None] * r_hat + Fp[:, None] * theta_hat

        return FieldFactory(
            name="cone_null", dim=3, eval_fn=ev, grad_fn=grad, is_minimizer=True
        )


def ac_cone(resolution: int = 512) -> ConeProfile:
    """Tabulate the cone profile and locate its root by bisection to 1e-10 rad."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    lo, hi = 0.1, math.pi / 2.0
    flo = float(_cone_f(np.asarray(lo)))
    if flo >= 0.0:
        raise ValueError("bracket lost; profile should be negative at 0.1 rad")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if float(_cone_f(np.asarray(mid))) < 0.0:
            lo = mid
        else:
            hi = mid
    theta0 = 0.5 * (lo + hi)
    thetas = np.linspace(0.1, math.pi / 2.0, resolution)
    return ConeProfile(
        theta0_rad=theta0,
        theta0_deg=math.degrees(theta0),
        normalization=float(_cone_f_prime(np.asarray(theta0))),
        thetas=thetas,
        values=_cone_f(thetas),
    )


# ---------------------------------------------------------------------------
# Odd reflection of grid fields


def odd_reflection(
    u: ScalarField, axis: int, offset: float, tau: float | None = None
) -> ScalarField:
    """Antisymmetric extension of a one-sided field across an axis plane.

    The plane must pass through nodes or cell midpoints so reflected nodes
    land on nodes and the output is exactly antisymmetric. The support may
    touch the plane but must not cross it by more than one cell.
    """
    grid = u.grid
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {grid.dim}")
    t_idx = (offset - grid.origin[axis]) / grid.h
    doubled = 2.0 * t_idx
    if abs(doubled - round(doubled)) > 1e-9:
        raise ValueError(
            "reflection plane must pass through nodes or cell midpoints"
        )
    if tau is None:
        tau = 1e-8 * u.max_abs()
    n = grid.node_shape[axis]
    idx = np.arange(n, dtype=np.float64)
    support = np.abs(u.values) > tau
    if support.any():
        axis_idx = np.nonzero(support.any(axis=tuple(a for a in range(grid.dim) if a != axis)))[0]
        below = t_idx - axis_idx.min()
        above = axis_idx.max() - t_idx
        # the minority side must not extend past one cell beyond the plane
        if min(below, above) > 1.0 + 1e-9:
            raise StraddlePlaneError(
                f"support crosses the plane by {min(below, above)} cells"
            )
        keep_upper = above >= below
    else:
        keep_upper = True

    mirrored = np.rint(doubled - idx).astype(int)
    valid = (mirrored >= 0) & (mirrored < n)
    out = np.zeros_like(u.values)
    upper = idx > t_idx + 1e-9
    lower = idx < t_idx - 1e-9
    src_side, dst_side = (upper, lower) if keep_upper else (lower, upper)

    sl = [slice(None)] * grid.dim

    def _take(mask):
        sl_local = list(sl)
        sl_local[axis] = np.nonzero(mask)[0]
        return tuple(sl_local)

    out[_take(src_side)] = u.values[_take(src_side)]
    dst = np.nonzero(dst_side & valid)[0]
    src = mirrored[dst]
    sl_dst = list(sl)
    sl_dst[axis] = dst
    sl_src = list(sl)
    sl_src[axis] = src
    out[tuple(sl_dst)] = -u.values[tuple(sl_src)]
    return ScalarField(grid, out)


# ---------------------------------------------------------------------------
# Concentration radii


@dataclass(frozen=True)
class SakaiRadii:
    """Existence radii for concentrated measures; sigma always equals R."""

    r: float
    sigma: float
    r_threshold: float


def sakai_radius_identity(R: float, M: float, l0: float, dim: int) -> SakaiRadii:
    """r = R (N l0 / (M R))^(1/N) and sigma = (r^N M / (N l0))^(1/(N-1)).

    The two formulas compose to sigma = R identically; the returned threshold
    2 N l0 / M bounds the radii where spherical means stay nondegenerate.
    """
    if R <= 0.0 or M <= 0.0 or l0 <= 0.0:
        raise ValueError("R, M, l0 must all be positive")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    n = float(dim)
    r = R * (n * l0 / (M * R)) ** (1.0 / n)
    sigma = (r**n * M / (n * l0)) ** (1.0 / (n - 1.0))
    return SakaiRadii(r=r, sigma=sigma, r_threshold=2.0 * n * l0 / M)


def suggest_box_halfwidth(
    total_mass: float, g_min: float, dim: int, mollifier_radius: float
) -> float:
    """Half-width that clears the one-phase support plus two mollifier pads."""
    R = (total_mass / (unit_sphere_area(dim) * g_min)) ** (1.0 / (dim - 1.0))
    return R + 2.0 * mollifier_radius

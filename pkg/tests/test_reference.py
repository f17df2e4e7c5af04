"""Closed-form reference solutions against hand-derived values."""

from __future__ import annotations

import math

import numpy as np
import pytest

from qsurf.grid import build_grid
from qsurf.reference import (
    NonvanishingAtInversionSphereError,
    RadialPiece,
    RadialSolution,
    StraddlePlaneError,
    ac_cone,
    annular_construction,
    exterior_ball_null,
    kelvin_invert,
    odd_reflection,
    radial_one_phase,
    sakai_radius_identity,
    suggest_box_halfwidth,
    two_plane,
)

CONE_ROOT_DEG = 33.53416487254765
CONE_NORMALIZATION = 4.343245961775003


def test_radial_one_phase_two_dim_matches_log_profile():
    sol = radial_one_phase(total_mass=4.0 * math.pi, g0=1.0, dim=2)
    assert sol.support == (0.0, pytest.approx(2.0, rel=1e-14))
    u1 = float(sol.eval(np.asarray([1.0]))[0])
    assert u1 == pytest.approx(2.0 * math.log(2.0), rel=1e-13)
    assert abs(sol.deriv_one_sided(sol.support[1], -1)) == pytest.approx(1.0, rel=1e-13)
    sol.validate()


def test_radial_one_phase_three_dim_matches_newton_profile():
    sol = radial_one_phase(total_mass=16.0 * math.pi, g0=1.0, dim=3)
    assert sol.support[1] == pytest.approx(2.0, rel=1e-14)
    assert float(sol.eval(np.asarray([1.0]))[0]) == pytest.approx(2.0, rel=1e-13)
    r = np.asarray([0.5, 1.0, 1.5])
    expected = 4.0 / r - 2.0
    np.testing.assert_allclose(sol.eval(r), expected, rtol=1e-13)
    sol.validate()


def test_radial_one_phase_rejects_nonpositive_data():
    with pytest.raises(ValueError):
        radial_one_phase(total_mass=0.0, g0=1.0, dim=2)
    with pytest.raises(ValueError):
        radial_one_phase(total_mass=1.0, g0=-2.0, dim=3)


def test_annular_construction_default_radii_and_values():
    res = annular_construction()
    assert res.outer_radius == pytest.approx(3.0, abs=1e-14)
    assert res.inner_radius == 1.0
    assert res.shell_value == pytest.approx(1.5, abs=1e-14)
    assert res.inner_gradient == pytest.approx(3.0, abs=1e-13)
    r = np.asarray([1.25, 1.75])
    np.testing.assert_allclose(res.solution.eval(r), 3.0 * (1.0 - 1.0 / r), rtol=1e-13)
    r = np.asarray([2.5, 2.9])
    np.testing.assert_allclose(res.solution.eval(r), 9.0 * (1.0 / r - 1.0 / 3.0), rtol=1e-12)


def test_annular_extension_reports_both_gradient_scalings():
    res = annular_construction()
    assert res.extension_inner_radius == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert res.extension_inner_gradient == pytest.approx(27.0, rel=1e-12)
    assert res.extension_inner_gradient_alt_scaling == pytest.approx(3.0**-5, rel=1e-12)
    # the extension is the odd Kelvin image: u*(r) = -(1/r) u(1/r) inside
    r = np.linspace(0.34, 0.99, 23)
    outside = res.solution.eval(1.0 / r)
    np.testing.assert_allclose(res.extension.eval(r), -outside / r, rtol=1e-11, atol=1e-13)


def test_annular_construction_rejects_weak_shell():
    from qsurf.reference import NoRootError

    with pytest.raises(NoRootError):
        annular_construction(shell_density=0.1)


def test_kelvin_invert_requires_zero_on_sphere():
    sol = radial_one_phase(total_mass=4.0 * math.pi, g0=1.0, dim=2)
    with pytest.raises(NonvanishingAtInversionSphereError):
        kelvin_invert(sol, inversion_radius=1.0)


def test_kelvin_invert_continues_ball_profiles():
    for dim, mass in ((2, 4.0 * math.pi), (3, 16.0 * math.pi)):
        sol = radial_one_phase(total_mass=mass, g0=1.0, dim=dim)
        ext = kelvin_invert(sol, inversion_radius=2.0)
        # ball profiles continue by the same formula, negative outside
        r = np.asarray([2.5, 3.0, 4.0])
        inner_formula = sol.pieces[0]
        kernel = np.log(r) if dim == 2 else 1.0 / r
        np.testing.assert_allclose(
            ext.eval(r), inner_formula.a + inner_formula.b * kernel, rtol=1e-12
        )
        assert np.all(ext.eval(r) < 0.0)


def test_radial_solution_rejects_gapped_pieces():
    with pytest.raises(ValueError):
        RadialSolution(dim=3, pieces=[RadialPiece(0.5, 1.0, 1.0, 0.0), RadialPiece(1.5, 2.0, 1.0, 0.0)])


def test_to_field_matches_formula_away_from_core():
    res = annular_construction()
    grid = build_grid(dim=3, origin=(-3.5, -3.5, -3.5), h=0.25, cells_per_axis=(28, 28, 28))
    fld = res.solution.to_field(grid, center=(0.0, 0.0, 0.0))
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    r = np.sqrt(sum(m**2 for m in mesh))
    mask = r > 0.5
    np.testing.assert_allclose(
        fld.values[mask], res.solution.eval(r[mask]), rtol=1e-12, atol=1e-12
    )


def test_cone_root_angle_and_normalization_are_pinned():
    profile = ac_cone()
    assert profile.theta0_deg == pytest.approx(CONE_ROOT_DEG, abs=1e-7)
    assert profile.normalization == pytest.approx(CONE_NORMALIZATION, abs=1e-8)
    assert abs(profile.f(np.asarray(profile.theta0_rad))) < 1e-9


def test_cone_profile_satisfies_sturm_liouville_equation():
    profile = ac_cone()
    thetas = np.linspace(0.2, math.pi / 2.0, 401)
    residual = profile.ode_residual(thetas)
    assert np.max(np.abs(residual)) < 1e-9


def test_cone_profile_derivative_vanishes_at_equator():
    profile = ac_cone()
    assert abs(float(profile.f_prime(np.asarray(math.pi / 2.0)))) < 1e-12


def test_cone_field_gradient_is_unit_on_the_cone():
    profile = ac_cone()
    factory = profile.field_factory()
    theta0 = profile.theta0_rad
    rng = np.random.default_rng(11)
    radii = rng.uniform(0.5, 3.0, size=40)
    phis = rng.uniform(0.0, 2.0 * math.pi, size=40)
    theta = theta0 + 1e-9
    pts = np.column_stack(
        [
            radii * math.sin(theta) * np.cos(phis),
            radii * math.sin(theta) * np.sin(phis),
            radii * math.cos(theta),
        ]
    )
    mags = np.linalg.norm(factory.grad(pts), axis=1)
    np.testing.assert_allclose(mags, 1.0, atol=1e-6)
    # just inside the cone the field is switched off
    inside = pts * 0.999
    inside[:, 2] = radii * math.cos(theta0 - 1e-3)
    inside[:, 0] = radii * math.sin(theta0 - 1e-3) * np.cos(phis)
    inside[:, 1] = radii * math.sin(theta0 - 1e-3) * np.sin(phis)
    assert np.all(factory.eval(inside) == 0.0)


def test_cone_field_vanishes_on_polar_axis():
    factory = ac_cone().field_factory()
    pts = np.asarray([[0.0, 0.0, 1.0], [0.0, 0.0, -2.0], [0.0, 0.0, 0.5]])
    np.testing.assert_allclose(factory.eval(pts), 0.0, atol=1e-12)


def test_two_plane_values_and_minimizer_flags():
    pts2 = np.asarray([[0.3, 0.7], [0.3, -0.4], [0.3, 0.0]])
    plus = two_plane("plus")
    np.testing.assert_allclose(plus.eval(pts2), [0.7, 0.0, 0.0])
    np.testing.assert_allclose(plus.grad(pts2)[:, 1], [1.0, 0.0, 0.0])
    assert plus.is_minimizer is True

    minus = two_plane("minus")
    np.testing.assert_allclose(minus.eval(pts2), [0.0, -0.4, 0.0])

    gap = two_plane("gap", gamma=0.5)
    pts = np.asarray([[0.0, 0.2], [0.0, -0.3], [0.0, -0.9]])
    np.testing.assert_allclose(gap.eval(pts), [0.2, 0.0, -0.4])
    np.testing.assert_allclose(gap.grad(pts)[:, 1], [1.0, 0.0, 1.0])

    assert two_plane("linear", slope=1.5).is_minimizer is True
    assert two_plane("linear", slope=0.5).is_minimizer is False
    lin = two_plane("linear", slope=2.0)
    np.testing.assert_allclose(lin.eval(pts2), 2.0 * pts2[:, 1])


def test_two_plane_rejects_bad_parameters():
    with pytest.raises(ValueError):
        two_plane("gap", gamma=-0.1)
    with pytest.raises(ValueError):
        two_plane("linear", slope=0.0)
    with pytest.raises(ValueError):
        two_plane("ridge")


def test_exterior_ball_three_dim_closed_form():
    factory = exterior_ball_null(radius=1.0, dim=3)
    rng = np.random.default_rng(5)
    dirs = rng.normal(size=(30, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(1.05, 4.0, size=30)
    pts = dirs * radii[:, None]
    np.testing.assert_allclose(factory.eval(pts), 1.0 - 1.0 / radii, rtol=1e-12)
    mags = np.linalg.norm(factory.grad(pts), axis=1)
    np.testing.assert_allclose(mags, radii**-2.0, rtol=1e-12)
    on_sphere = dirs * 1.0
    np.testing.assert_allclose(factory.eval(on_sphere), 0.0, atol=1e-12)


def test_exterior_ball_two_dim_log_variant():
    factory = exterior_ball_null(radius=2.0, center=(0.5, -0.5), dim=2, g0=3.0)
    pts = np.asarray([[0.5 + 2.0 * math.e, -0.5], [0.5, -0.5 + 2.0]])
    np.testing.assert_allclose(factory.eval(pts), [6.0, 0.0], rtol=1e-12, atol=1e-12)
    grad_on = factory.grad(np.asarray([[2.5, -0.5]]))
    np.testing.assert_allclose(np.linalg.norm(grad_on, axis=1), [3.0], rtol=1e-12)


def test_odd_reflection_is_exactly_antisymmetric():
    grid = build_grid(dim=2, origin=(-1.0, -1.0), h=0.125, cells_per_axis=(16, 16))
    factory = two_plane("plus", axis=0)
    u = factory.sample(grid)
    refl = odd_reflection(u, axis=0, offset=0.0)
    flipped = refl.values[::-1, :]
    np.testing.assert_array_equal(refl.values, -flipped)
    upper = grid.axes()[0] > 0.0
    np.testing.assert_array_equal(refl.values[upper, :], u.values[upper, :])


def test_odd_reflection_rejects_straddling_support():
    grid = build_grid(dim=2, origin=(-1.0, -1.0), h=0.125, cells_per_axis=(16, 16))
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    u = grid_field = np.exp(-4.0 * (mesh[0] ** 2 + mesh[1] ** 2))
    from qsurf.grid import ScalarField

    with pytest.raises(StraddlePlaneError):
        odd_reflection(ScalarField(grid, grid_field), axis=0, offset=0.0)


def test_odd_reflection_rejects_misaligned_plane():
    grid = build_grid(dim=2, origin=(-1.0, -1.0), h=0.125, cells_per_axis=(16, 16))
    u = two_plane("plus", axis=0).sample(grid)
    with pytest.raises(ValueError):
        odd_reflection(u, axis=0, offset=0.03)


def test_sakai_radii_compose_to_identity():
    rng = np.random.default_rng(77)
    for _ in range(100):
        R = float(rng.uniform(0.2, 5.0))
        M = float(rng.uniform(0.1, 20.0))
        l0 = float(rng.uniform(0.05, 3.0))
        dim = int(rng.integers(2, 5))
        radii = sakai_radius_identity(R, M, l0, dim)
        assert radii.sigma == pytest.approx(R, rel=1e-13)
        assert radii.r_threshold == pytest.approx(2.0 * dim * l0 / M, rel=1e-14)


def test_sakai_radius_identity_rejects_nonpositive_inputs():
    with pytest.raises(ValueError):
        sakai_radius_identity(0.0, 1.0, 1.0, 2)
    with pytest.raises(ValueError):
        sakai_radius_identity(1.0, 1.0, 1.0, 1)


def test_suggest_box_halfwidth_covers_ball_support():
    half = suggest_box_halfwidth(4.0 * math.pi, g_min=1.0, dim=2, mollifier_radius=0.25)
    assert half == pytest.approx(2.5, rel=1e-13)
    half3 = suggest_box_halfwidth(16.0 * math.pi, g_min=1.0, dim=3, mollifier_radius=0.5)
    assert half3 == pytest.approx(3.0, rel=1e-13)

from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from qsurf.boundary import extract_contour, phase_extraction_level
from qsurf.grid import (
    Atom,
    MeasureSpec,
    ScalarField,
    Shell,
    build_grid,
    rasterize_measure,
    sphere_points,
    unit_ball_volume,
)
from qsurf.quadrature import (
    CoincidentPointsError,
    RadiusBelowGridError,
    TestFunction,
    constant_test,
    discrete_harmonicity,
    harmonic_polynomials,
    harmonic_test_set,
    kernel_test,
    newtonian_kernel,
    qi_residual,
    sakai_check,
    subharmonic_qi_check,
    surface_integral_contour,
    surface_integral_green,
    windowed_null_residual,
)
from qsurf.reference import annular_construction, exterior_ball_null, radial_one_phase, two_plane


def _radial_setup_2d(h=1 / 64, cells=288):
    grid = build_grid(2, origin=(-2.25, -2.25), h=h, cells_per_axis=(cells, cells))
    mass = 4.0 * math.pi
    solution = radial_one_phase(total_mass=mass, g0=1.0, dim=2)
    u = solution.to_field(grid, center=(0.0, 0.0))
    measure = MeasureSpec(atoms=(Atom(center=(0.0, 0.0), mass=mass, mollifier_radius=0.25),))
    return grid, u, measure, mass


def _radial_setup_3d():
    grid = build_grid(3, origin=(-2.25,) * 3, h=1 / 16, cells_per_axis=(72,) * 3)
    mass = 16.0 * math.pi
    solution = radial_one_phase(total_mass=mass, g0=1.0, dim=3)
    u = solution.to_field(grid, center=(0.0,) * 3)
    measure = MeasureSpec(atoms=(Atom(center=(0.0, 0.0, 0.0), mass=mass, mollifier_radius=0.25),))
    return grid, u, measure, mass


def test_kernel_closed_form_values():
    assert newtonian_kernel([1.0, 0.0], [0.0, 0.0], 2) == 0.0
    assert newtonian_kernel([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 3) == pytest.approx(
        1.0 / (4.0 * math.pi), rel=1e-14
    )
    assert newtonian_kernel([0.5, 0.0], [0.0, 0.0], 2) > 0.0
    with pytest.raises(CoincidentPointsError):
        newtonian_kernel([1.0, 2.0], [1.0, 2.0], 2)


def test_kernel_flux_through_enclosing_sphere_is_one():
    # the defining normalization: flux of -grad G through any sphere around
    # the singularity equals the unit charge
    for dim in (2, 3):
        pts = 2.0 * sphere_points(dim, 20000)
        t = kernel_test([0.0] * dim, dim)
        normals = pts / 2.0
        area = 2.0 * math.pi * 2.0 if dim == 2 else 4.0 * math.pi * 4.0
        flux = -float(np.mean(np.sum(t.grad(pts) * normals, axis=1))) * area
        assert abs(flux - 1.0) < 1e-10


def test_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for dim in (2, 3):
        center = rng.normal(size=dim)
        t = kernel_test(center, dim)
        pts = center[None, :] + rng.normal(size=(6, dim)) + 3.0
        grad = t.grad(pts)
        eps = 1e-6
        for axis in range(dim):
            shift = np.zeros(dim)
            shift[axis] = eps
            fd = (t.eval(pts + shift) - t.eval(pts - shift)) / (2.0 * eps)
            assert np.max(np.abs(fd - grad[:, axis])) < 1e-6


def test_low_degree_polynomials_are_discretely_harmonic():
    grid = build_grid(2, origin=(-1.0, -1.0), h=1 / 16, cells_per_axis=(32, 32))
    grid3 = build_grid(3, origin=(-1.0,) * 3, h=1 / 8, cells_per_axis=(16,) * 3)
    for g in (grid, grid3):
        for t in harmonic_polynomials(g.dim, 3):
            assert discrete_harmonicity(t, g) < 1e-9, t.name


def test_degree_four_harmonicity_shrinks_at_second_order():
    coarse = build_grid(2, origin=(-1.0, -1.0), h=1 / 16, cells_per_axis=(32, 32))
    fine = build_grid(2, origin=(-1.0, -1.0), h=1 / 32, cells_per_axis=(64, 64))
    # the other quartic has no pure fourth derivatives, so its discrete
    # Laplacian is exact zero and the ratio would be roundoff noise
    quartic = next(t for t in harmonic_polynomials(2, 4) if t.name == "x4-6x2y2+y4")
    ratio = discrete_harmonicity(quartic, coarse) / discrete_harmonicity(quartic, fine)
    assert 3.0 < ratio < 5.0


def test_kernel_harmonicity_shrinks_at_second_order():
    coarse = build_grid(2, origin=(-1.0, -1.0), h=1 / 16, cells_per_axis=(32, 32))
    fine = build_grid(2, origin=(-1.0, -1.0), h=1 / 32, cells_per_axis=(64, 64))
    t = kernel_test([2.5, 1.0], 2)
    ratio = discrete_harmonicity(t, coarse) / discrete_harmonicity(t, fine)
    assert 3.0 < ratio < 5.0


def test_harmonic_test_set_composition_and_exteriority():
    box_min = np.array([-2.0, -2.0])
    box_max = np.array([2.0, 2.0])
    support = np.array([[1.5, 0.0], [-1.5, 0.0]])
    tests = harmonic_test_set(box_min, box_max, support, count=8, max_degree=2)
    names = [t.name for t in tests]
    assert names[0] == "const"
    assert "x" in names and "y" in names
    kernels = [t for t in tests if t.kind == "kernel"]
    assert len(kernels) == 8
    # every kernel is finite (hence singularity-free) on the inflated box
    center = 0.5 * (box_min + box_max)
    inflated_corner = center + 1.25 * (box_max - center)
    for t in kernels:
        probe = np.array([inflated_corner, box_min, box_max])
        assert np.all(np.isfinite(t.eval(probe)))
        assert np.all(np.abs(t.eval(probe)) < 10.0)


def test_harmonic_test_set_minimal_count_has_linear_polys():
    tests = harmonic_test_set([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], None, count=1, max_degree=1)
    names = [t.name for t in tests]
    assert names[:4] == ["const", "x", "y", "z"]
    assert sum(1 for t in tests if t.kind == "kernel") == 1


def test_contour_route_recovers_sphere_area():
    grid = build_grid(3, origin=(-2.25,) * 3, h=1 / 32, cells_per_axis=(144,) * 3)
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    r = np.sqrt(sum(m**2 for m in mesh))
    u = ScalarField(grid, np.maximum(2.0 - r, 0.0))
    geom = extract_contour(u, level=phase_extraction_level(u))
    area = surface_integral_contour(geom, 1.0, constant_test())
    assert area == pytest.approx(16.0 * math.pi, rel=0.02)


def test_contour_route_odd_test_function_cancels_on_circle():
    grid = build_grid(2, origin=(-2.25, -2.25), h=1 / 64, cells_per_axis=(288, 288))
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    r = np.sqrt(mesh[0] ** 2 + mesh[1] ** 2)
    u = ScalarField(grid, np.maximum(2.0 - r, 0.0))
    geom = extract_contour(u, level=phase_extraction_level(u))
    h_x = harmonic_polynomials(2, 1)[0]
    value = surface_integral_contour(geom, 1.0, h_x)
    assert abs(value) < 1e-3 * 4.0 * math.pi


def test_contour_route_empty_geometry_is_zero():
    grid = build_grid(2, origin=(-1.0, -1.0), h=1 / 16, cells_per_axis=(16, 16))
    u = ScalarField(grid, np.zeros(grid.node_shape))
    geom = extract_contour(u, level=0.5)
    assert surface_integral_contour(geom, 1.0, constant_test()) == 0.0


def test_green_route_radial_total_flux_matches_mass():
    grid, u, measure, mass = _radial_setup_3d()
    f = rasterize_measure(measure, grid)
    value = surface_integral_green(u, 1, f, constant_test())
    assert value == pytest.approx(mass, rel=0.02)


def test_green_route_radial_kernel_matches_mean_value():
    grid, u, measure, mass = _radial_setup_3d()
    f = rasterize_measure(measure, grid)
    t = kernel_test([0.0, 0.0, 4.0], 3)
    value = surface_integral_green(u, 1, f, t)
    target = mass * newtonian_kernel([0.0, 0.0, 0.0], [0.0, 0.0, 4.0], 3)
    assert value == pytest.approx(target, rel=0.02)


def test_green_route_zero_field_is_zero():
    grid = build_grid(2, origin=(-1.0, -1.0), h=1 / 16, cells_per_axis=(16, 16))
    z = ScalarField(grid, np.zeros(grid.node_shape))
    f = ScalarField(grid, np.zeros(grid.node_shape))
    assert surface_integral_green(z, 1, f, constant_test()) == 0.0
    with pytest.raises(ValueError):
        surface_integral_green(z, 2, f, constant_test())


def test_green_route_warns_on_curved_test_function():
    grid, u, measure, _ = _radial_setup_2d(h=1 / 32, cells=144)
    f = rasterize_measure(measure, grid)
    curved = TestFunction(
        kind="probe", name="dist2", eval_fn=lambda p: np.sum(p**2, axis=1)
    )
    with pytest.warns(UserWarning, match="Laplacian"):
        surface_integral_green(u, 1, f, curved)


def test_qi_residual_one_phase_radial_both_routes():
    grid, u, measure, _ = _radial_setup_2d()
    tests = harmonic_test_set(
        grid.box_min, grid.box_max, measure.support_points(), count=8, max_degree=2
    )
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        report = qi_residual(u, [measure, None], 1.0, tests)
    assert len(report.rows) == len(tests)
    assert report.max_relative("green") <= 0.02
    assert report.max_relative("contour") <= 0.02
    assert report.route_disagreement() <= 0.05


def test_qi_residual_is_linear_in_the_test_function():
    grid, u, measure, _ = _radial_setup_2d(h=1 / 32, cells=144)
    polys = harmonic_polynomials(2, 2)
    t1, t2 = polys[0], polys[2]
    combo = TestFunction(
        kind="combo",
        name="combo",
        eval_fn=lambda p: 2.0 * t1.eval(p) - 0.7 * t2.eval(p),
    )
    report = qi_residual(u, [measure, None], 1.0, [t1, t2, combo])
    r1, r2, rc = report.rows
    for key in ("residual_contour", "residual_green", "lhs_contour", "lhs_green", "rhs"):
        combined = 2.0 * getattr(r1, key) - 0.7 * getattr(r2, key)
        assert abs(combined - getattr(rc, key)) <= 1e-10 * max(1.0, abs(combined))


def test_qi_residual_rejects_misaligned_measures():
    grid, u, measure, _ = _radial_setup_2d(h=1 / 32, cells=144)
    with pytest.raises(ValueError, match="measures"):
        qi_residual(u, [measure], 1.0, [constant_test()])


def test_qi_residual_two_phase_separated_pair():
    grid = build_grid(2, origin=(-3.0, -3.0), h=1 / 64, cells_per_axis=(384, 384))
    mass = 2.0 * math.pi
    solution = radial_one_phase(total_mass=mass, g0=1.0, dim=2)
    u_pos = solution.to_field(grid, center=(-1.5, 0.0))
    u_neg = solution.to_field(grid, center=(1.5, 0.0))
    u = ScalarField(grid, u_pos.values - u_neg.values)
    mu1 = MeasureSpec(atoms=(Atom(center=(-1.5, 0.0), mass=mass, mollifier_radius=0.2),))
    mu2 = MeasureSpec(atoms=(Atom(center=(1.5, 0.0), mass=mass, mollifier_radius=0.2),))
    tests = harmonic_test_set(
        grid.box_min,
        grid.box_max,
        np.array([[-1.5, 0.0], [1.5, 0.0]]),
        count=4,
        max_degree=2,
    )
    report = qi_residual(u, [mu1, mu2], 1.0, tests)
    assert report.max_relative("green") <= 0.05
    assert report.max_relative("contour") <= 0.05
    assert report.route_disagreement() <= 0.05
    assert all(r.pair == (1, 2) for r in report.rows)


def test_qi_residual_shared_boundary_difference_cancels():
    # odd Kelvin extension of the annular profile: negative phase on the
    # annulus (1/3, 1), positive on (1, 3), sharing the unit sphere where
    # both one-sided integrals carry g = 3. The difference identity sees
    # the image shell mass M / s on the inverted radius.
    ann = annular_construction()
    grid = build_grid(3, origin=(-3.3,) * 3, h=1 / 16, cells_per_axis=(106,) * 3)
    u = ann.extension.to_field(grid, center=(0.0,) * 3)
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    r = np.sqrt(sum(m**2 for m in mesh))
    r_clamped = np.clip(r, 1.0 / 3.0 + 1e-9, 3.0 - 1e-9)
    g = ScalarField(grid, np.abs(ann.extension.deriv(r_clamped.ravel())).reshape(grid.node_shape))
    outer_mass = 3.0 * 4.0 * math.pi * 2.0**2
    inner_mass = outer_mass / 2.0
    mu1 = MeasureSpec(shells=(Shell(center=(0.0,) * 3, radius=2.0, surface_density=3.0, mollifier_radius=0.15),))
    inner_density = inner_mass / (4.0 * math.pi * 0.5**2)
    mu2 = MeasureSpec(
        shells=(Shell(center=(0.0,) * 3, radius=0.5, surface_density=inner_density, mollifier_radius=0.1),)
    )
    report = qi_residual(u, [mu1, mu2], g, [constant_test()])
    row = report.rows[0]
    assert row.rhs == pytest.approx(outer_mass - inner_mass, rel=1e-10)
    assert abs(row.residual_contour) <= 0.05 * row.scale
    assert abs(row.residual_green) <= 0.05 * row.scale


def test_qi_residual_three_phase_pairwise_rows():
    grid = build_grid(2, origin=(-3.0, -3.0), h=1 / 32, cells_per_axis=(192, 192))
    mass = math.pi / 2.0
    solution = radial_one_phase(total_mass=mass, g0=1.0, dim=2)
    centers = [(-1.8, -1.0), (1.8, -1.0), (0.0, 1.8)]
    fields = [solution.to_field(grid, center=c) for c in centers]
    measures = [
        MeasureSpec(atoms=(Atom(center=c, mass=mass, mollifier_radius=0.1),)) for c in centers
    ]
    tests = [constant_test(), kernel_test([9.0, 0.0], 2)]
    report = qi_residual(fields, measures, 1.0, tests)
    assert len(report.rows) == len(tests) * 3
    assert {r.pair for r in report.rows} == {(1, 2), (1, 3), (2, 3)}
    assert report.max_relative("green") <= 0.05
    assert report.max_relative("contour") <= 0.05
    # supports are far apart, so the masking collar never meets a contour
    # (up to interpolation roundoff in the cutoff weights)
    assert all(r.collar <= 1e-10 for r in report.rows)


def test_exterior_kernel_residual_shrinks_at_first_order():
    # a fixed extraction level of 1.5 g h isolates the inward-bias error
    # term; the adaptive level is separately checked to do no worse
    target_center = [3.5, 0.0]
    mass = 4.0 * math.pi
    residuals = {}
    adaptive = {}
    for cells, h in ((144, 1 / 32), (288, 1 / 64)):
        grid = build_grid(2, origin=(-2.25, -2.25), h=h, cells_per_axis=(cells, cells))
        u = radial_one_phase(total_mass=mass, g0=1.0, dim=2).to_field(grid, center=(0.0, 0.0))
        t = kernel_test(target_center, 2)
        target = mass * newtonian_kernel([0.0, 0.0], target_center, 2)
        geom = extract_contour(u, level=1.5 * h)
        residuals[h] = abs(surface_integral_contour(geom, 1.0, t) - target) / abs(target)
        geom_adaptive = extract_contour(u, level=phase_extraction_level(u))
        adaptive[h] = abs(surface_integral_contour(geom_adaptive, 1.0, t) - target) / abs(target)
    ratio = residuals[1 / 32] / residuals[1 / 64]
    assert 1.5 <= ratio <= 2.5
    for h in residuals:
        assert adaptive[h] <= residuals[h]


def test_subharmonic_check_is_nonnegative_for_subharmonic_test():
    grid, u, measure, _ = _radial_setup_2d()
    y0 = np.array([0.3, -0.2])
    h_sub = TestFunction(
        kind="probe", name="dist2", eval_fn=lambda p: np.sum((p - y0) ** 2, axis=1)
    )
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        value = subharmonic_qi_check(u, [measure, None], 1.0, h_sub)
    assert value >= -1e-10
    assert value > 1.0


def test_subharmonic_check_warns_on_wrong_curvature():
    grid, u, measure, _ = _radial_setup_2d(h=1 / 32, cells=144)
    h_bad = TestFunction(
        kind="probe", name="negdist2", eval_fn=lambda p: -np.sum(p**2, axis=1)
    )
    with pytest.warns(UserWarning, match="subharmonic"):
        subharmonic_qi_check(u, [measure, None], 1.0, h_bad)


def test_subharmonic_check_equals_green_residual_for_harmonic_test():
    grid, u, measure, _ = _radial_setup_2d(h=1 / 32, cells=144)
    t = harmonic_polynomials(2, 2)[2]
    value = subharmonic_qi_check(u, [measure, None], 1.0, t)
    report = qi_residual(u, [measure, None], 1.0, [t])
    assert value == report.rows[0].residual_green


def test_sakai_thresholds_match_dimension_formula():
    grid2 = build_grid(2, origin=(-2.0, -2.0), h=1 / 32, cells_per_axis=(128, 128))
    m2 = MeasureSpec(atoms=(Atom(center=(0.0, 0.0), mass=30.0, mollifier_radius=0.25),))
    report2 = sakai_check(m2, 1.0, [0.5, 0.25, 0.125], grid2)
    assert report2.threshold == 24.0
    assert report2.verdict == "pass"
    grid3 = build_grid(3, origin=(-1.0,) * 3, h=1 / 16, cells_per_axis=(32,) * 3)
    m3 = MeasureSpec(atoms=(Atom(center=(0.0,) * 3, mass=300.0, mollifier_radius=0.25),))
    report3 = sakai_check(m3, 1.0, [0.25], grid3)
    assert report3.threshold == 216.0
    assert report3.verdict == "pass"


def test_sakai_atom_value_at_mollifier_radius():
    grid = build_grid(2, origin=(-2.0, -2.0), h=1 / 64, cells_per_axis=(256, 256))
    mass = 30.0
    rho = 0.25
    m = MeasureSpec(atoms=(Atom(center=(0.0, 0.0), mass=mass, mollifier_radius=rho),))
    report = sakai_check(m, 1.0, [rho], grid)
    expected = rho * mass / (unit_ball_volume(2) * rho**2)
    assert report.values[0] == pytest.approx(expected, rel=0.02)


def test_sakai_is_monotone_in_mass():
    grid = build_grid(2, origin=(-2.0, -2.0), h=1 / 32, cells_per_axis=(128, 128))
    verdicts = []
    for mass in np.linspace(1.0, 200.0, 20):
        m = MeasureSpec(atoms=(Atom(center=(0.0, 0.0), mass=float(mass), mollifier_radius=0.25),))
        verdicts.append(sakai_check(m, 1.0, [0.5, 0.25, 0.125], grid).verdict)
    seen_pass = False
    for v in verdicts:
        if v == "pass":
            seen_pass = True
        assert not (seen_pass and v == "fail")
    assert verdicts[0] == "fail" and verdicts[-1] == "pass"


def test_sakai_rejects_bad_radii():
    grid = build_grid(2, origin=(-2.0, -2.0), h=1 / 32, cells_per_axis=(128, 128))
    m = MeasureSpec(atoms=(Atom(center=(0.0, 0.0), mass=30.0, mollifier_radius=0.25),))
    with pytest.raises(ValueError, match="decreasing"):
        sakai_check(m, 1.0, [0.25, 0.5], grid)
    with pytest.raises(RadiusBelowGridError):
        sakai_check(m, 1.0, [0.25, 1.0 / 32.0], grid)


def test_windowed_identity_vanishes_on_plane_family():
    lo = np.array([-1.0, -1.0])
    hi = np.array([1.0, 1.0])
    members = [
        two_plane("plus"),
        two_plane("minus"),
        two_plane("gap", gamma=0.5),
        two_plane("linear", slope=1.3),
    ]
    tests = [constant_test()] + harmonic_polynomials(2, 2)
    for factory in members:
        for t in tests:
            report = windowed_null_residual(factory, lo, hi, t)
            assert abs(report.residual) <= 1e-3 * report.scale, (factory.name, t.name)


def test_windowed_identity_vanishes_on_exterior_ball():
    for dim in (2, 3):
        factory = exterior_ball_null(radius=1.0, center=(0.0,) * dim, dim=dim, g0=1.0)
        lo = np.full(dim, -2.0)
        hi = np.full(dim, 2.0)
        for t in [constant_test()] + harmonic_polynomials(dim, 2):
            report = windowed_null_residual(factory, lo, hi, t)
            assert abs(report.residual) <= 1e-3 * report.scale, (dim, t.name)
        assert windowed_null_residual(factory, lo, hi, constant_test()).lhs_surface > 1.0


def test_windowed_identity_requires_boundary_chart():
    from qsurf.reference import ac_cone

    factory = ac_cone().field_factory()
    with pytest.raises(ValueError, match="boundary chart"):
        windowed_null_residual(factory, np.full(3, -1.0), np.full(3, 1.0), constant_test())


def test_qi_report_serialization_round_trip():
    grid, u, measure, _ = _radial_setup_2d(h=1 / 32, cells=144)
    report = qi_residual(u, [measure, None], 1.0, [constant_test()])
    blob = report.as_dict()
    assert blob["rows"][0]["test_name"] == "const"
    header = report.csv_header()
    rows = report.as_rows()
    assert len(rows[0]) == len(header)
    assert rows[0][header.index("kind")] == "constant"

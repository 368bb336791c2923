"""Forces from excluded fields: oracles, symmetry, energy consistency."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from polsphere import (
    FieldTrace,
    ForceReport,
    GeometryError,
    GlobalCoeffVector,
    OperatorContext,
    SphereSpec,
    SphereSystem,
    SurfaceCoeffs,
    analyze,
    build_grid,
    compute_all_forces,
    energy,
    energy_gradient_fd,
    excluded_potential,
    field_trace,
    flat_index,
    force_on_sphere,
    free_charge_vector,
    make_alternating_lattice,
    num_coeffs,
    solve_induced_charge,
    synthesize,
)
from _oracles import eval_regular_expansion, quad_exterior_potential

RNG = np.random.default_rng(20240615)
SQRT4PI = np.sqrt(4.0 * np.pi)


def solve_system(system, lmax, **ctx_kwargs):
    ctx = OperatorContext(system, lmax, **ctx_kwargs)
    sigma_f = free_charge_vector(system, lmax)
    report = solve_induced_charge(ctx, sigma_f)
    assert report.converged
    return ctx, report.nu


def test_uniform_field_on_charged_sphere():
    # F = kappa0 * integral sigma E dS = kappa0 Q E for a constant field
    kappa0, radius, Q = 3.0, 2.0, 1.7
    system = SphereSystem((SphereSpec([0.0, 0.0, 0.0], radius, 5.0, Q),), kappa0=kappa0)
    lmax = 4
    ctx = OperatorContext(system, lmax)
    zero = SurfaceCoeffs(lmax, np.zeros(num_coeffs(lmax)))
    ez = np.zeros(num_coeffs(lmax))
    ez[0] = SQRT4PI  # the constant value 1
    field = FieldTrace(0, (zero, zero, SurfaceCoeffs(lmax, ez)))
    sigma = system.spheres[0].charge_density(lmax)
    force = force_on_sphere(ctx, sigma, field)
    assert_allclose(force, [0.0, 0.0, kappa0 * Q], rtol=1e-14)


def test_field_trace_of_linear_potential():
    # phi = z has the single trace coefficient r sqrt(4 pi / 3) at (1, 0);
    # its field is the constant (0, 0, -1)
    radius, lmax = 1.8, 4
    system = SphereSystem((SphereSpec([0.0, 0.0, 0.0], radius, 5.0),))
    ctx = OperatorContext(system, lmax)
    phi_vals = np.zeros(num_coeffs(lmax + 1))
    phi_vals[flat_index(1, 0)] = radius * np.sqrt(4.0 * np.pi / 3.0)
    from polsphere import ExcludedPotential

    trace = field_trace(ctx, ExcludedPotential(0, SurfaceCoeffs(lmax + 1, phi_vals)))
    ex, ey, ez = trace.components
    assert_allclose(ex.values, 0.0, rtol=0, atol=1e-14)
    assert_allclose(ey.values, 0.0, rtol=0, atol=1e-14)
    expect = np.zeros(num_coeffs(lmax))
    expect[0] = -SQRT4PI
    assert_allclose(ez.values, expect, rtol=0, atol=1e-13)


def test_field_trace_against_finite_differences():
    # independent check of the whole trace -> regular -> gradient pipeline
    radius, lmax = 1.4, 5
    system = SphereSystem((SphereSpec([0.0, 0.0, 0.0], radius, 5.0),))
    ctx = OperatorContext(system, lmax)
    phi_vals = RNG.normal(size=num_coeffs(lmax + 1))
    from polsphere import ExcludedPotential

    trace = field_trace(ctx, ExcludedPotential(0, SurfaceCoeffs(lmax + 1, phi_vals)))
    dirs = RNG.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    points = radius * dirs
    h = 1e-5
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        fd = (
            eval_regular_expansion(phi_vals, lmax + 1, radius, points + step)
            - eval_regular_expansion(phi_vals, lmax + 1, radius, points - step)
        ) / (2.0 * h)
        got = synthesize(trace.components[axis], dirs)
        assert_allclose(got, -fd, rtol=0, atol=1e-6)


def test_isolated_sphere_feels_nothing():
    system = SphereSystem((SphereSpec([0.0, 0.0, 0.0], 1.0, 10.0, 2.0),))
    ctx, nu = solve_system(system, 6)
    report = compute_all_forces(ctx, nu)
    assert_allclose(report.forces, 0.0, rtol=0, atol=1e-13)


def test_unpolarizable_pair_is_exactly_coulomb():
    # kappa = kappa0 spheres do not polarize, so the interaction reduces to
    # point charges: F = 4 pi q1 q2 / (kappa0 d^2), exactly at any distance
    kappa0, d, q1, q2 = 2.0, 5.0, 2.0, -3.0
    system = SphereSystem(
        (
            SphereSpec([0.0, 0.0, 0.0], 1.0, kappa0, q1),
            SphereSpec([0.0, 0.0, d], 1.0, kappa0, q2),
        ),
        kappa0=kappa0,
    )
    ctx, nu = solve_system(system, 8)
    report = compute_all_forces(ctx, nu)
    coulomb = 4.0 * np.pi * q1 * q2 / (kappa0 * d**2)
    assert_allclose(report.forces[0], [0.0, 0.0, -coulomb], rtol=1e-12, atol=1e-13)
    assert_allclose(report.forces[1], [0.0, 0.0, coulomb], rtol=1e-12, atol=1e-13)
    assert_allclose(
        report.energy,
        4.0 * np.pi * q1 * q2 / (kappa0 * d)
        + 2.0 * np.pi * q1**2 / (kappa0 * 1.0)
        + 2.0 * np.pi * q2**2 / (kappa0 * 1.0),
        rtol=1e-12,
    )


def test_polarizable_far_pair_approaches_coulomb():
    d = 50.0
    system = SphereSystem(
        (
            SphereSpec([0.0, 0.0, 0.0], 1.0, 10.0, 1.0),
            SphereSpec([0.0, 0.0, d], 1.0, 0.1, 1.0),
        )
    )
    ctx, nu = solve_system(system, 6)
    report = compute_all_forces(ctx, nu)
    coulomb = 4.0 * np.pi / d**2
    assert_allclose(report.forces[1, 2], coulomb, rtol=1e-4)
    assert_allclose(report.forces[0] + report.forces[1], 0.0, rtol=0, atol=1e-12)


def test_excluded_potential_matches_quadrature():
    # the trace coefficients of the other sphere's potential are exact
    # per coefficient; rebuild them by projecting the surface integral
    lmax = 4
    system = SphereSystem(
        (
            SphereSpec([0.0, 0.0, 0.0], 2.0, 10.0),
            SphereSpec([7.0, 0.0, 0.0], 1.5, 5.0),
        )
    )
    ctx = OperatorContext(system, lmax)
    vals = np.zeros((2, num_coeffs(lmax)))
    vals[1] = RNG.normal(size=num_coeffs(lmax))
    nu = GlobalCoeffVector(lmax, vals)
    got = excluded_potential(ctx, nu, 0)
    assert got.sphere_index == 0
    assert got.coeffs.degree_max == lmax + 1

    grid = build_grid(2 * (lmax + 1) + 80)
    surface = system.spheres[0].center + 2.0 * grid.nodes
    pointwise = quad_exterior_potential(
        system.spheres[1].center, 1.5, vals[1], lmax, surface, exactness=80
    )
    expect = analyze(pointwise, grid, lmax + 1)
    assert_allclose(got.coeffs.values, expect.values, rtol=0, atol=1e-12)


def test_excluded_potential_index_range():
    system = make_alternating_lattice(2)
    ctx = OperatorContext(system, 2)
    nu = GlobalCoeffVector.zeros(8, 2)
    with pytest.raises(IndexError):
        excluded_potential(ctx, nu, 8)


def test_batch_forces_match_single_sphere_path():
    system = make_alternating_lattice(2)
    ctx, nu = solve_system(system, 4)
    report = compute_all_forces(ctx, nu)
    for i in range(system.n_spheres):
        phi = excluded_potential(ctx, nu, i)
        field = field_trace(ctx, phi)
        single = force_on_sphere(ctx, nu.block(i), field)
        assert_allclose(report.forces[i], single, rtol=0, atol=1e-14)
    sigma_f = free_charge_vector(system, 4)
    assert_allclose(report.energy, energy(ctx, sigma_f, nu), rtol=1e-14)


def test_forces_sum_to_zero():
    system = make_alternating_lattice(3)
    ctx, nu = solve_system(system, 4)
    report = compute_all_forces(ctx, nu)
    scale = np.abs(report.forces).max()
    assert_allclose(report.force_sum, 0.0, rtol=0, atol=1e-12 * scale)


def test_force_report_recomputes_derived_fields():
    forces = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    report = ForceReport(
        forces=forces,
        energy=1.0,
        force_sum=np.array([99.0, 99.0, 99.0]),
        diagnostics=np.array([99.0]),
    )
    assert_allclose(report.force_sum, [5.0, 7.0, 9.0])
    assert_allclose(report.diagnostics, np.linalg.norm(forces, axis=1))


def test_fd_force_agreement():
    system = make_alternating_lattice(2)
    lmax = 4
    ctx, nu = solve_system(system, lmax)
    report = compute_all_forces(ctx, nu)
    sigma_f = free_charge_vector(system, lmax)
    for i in (0, 5):
        fd = energy_gradient_fd(
            lambda s: OperatorContext(s, lmax), system, sigma_f, i
        )
        err = np.abs(fd - report.forces[i])
        bound = np.maximum(1e-5 * np.abs(report.forces[i]), 1e-10)
        assert np.all(err <= bound)


def test_fd_rejects_overlapping_perturbation():
    system = SphereSystem(
        (
            SphereSpec([0.0, 0.0, 0.0], 1.0, 10.0, 1.0),
            SphereSpec([2.00005, 0.0, 0.0], 1.0, 5.0, -1.0),
        )
    )
    sigma_f = free_charge_vector(system, 2)
    with pytest.raises(GeometryError):
        energy_gradient_fd(lambda s: OperatorContext(s, 2), system, sigma_f, 0)

"""Krylov solver behavior on dense oracles and the physical system."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from polsphere import (
    DomainError,
    GlobalCoeffVector,
    OperatorContext,
    SolveSettings,
    SphereSpec,
    SphereSystem,
    apply_system,
    free_charge_vector,
    gmres,
    num_coeffs,
    solve_induced_charge,
)

RNG = np.random.default_rng(20240614)


def wrap_matrix(A, n_spheres, degree):
    k = num_coeffs(degree)

    def apply(vec):
        return GlobalCoeffVector(degree, (A @ vec.values.ravel()).reshape(n_spheres, k))

    return apply


def test_matches_dense_solve():
    # 5 blocks of degree 1: a 20 x 20 well-conditioned unsymmetric system
    n, degree = 5, 1
    size = n * num_coeffs(degree)
    A = np.eye(size) + 0.3 * RNG.normal(size=(size, size)) / np.sqrt(size)
    b = RNG.normal(size=size)
    rhs = GlobalCoeffVector(degree, b.reshape(n, -1))
    report = gmres(wrap_matrix(A, n, degree), rhs, SolveSettings(tolerance=1e-14))
    expect = np.linalg.solve(A, b)
    assert report.converged
    assert_allclose(report.nu.values.ravel(), expect, rtol=0, atol=1e-10)


def test_identity_converges_in_one_iteration():
    n, degree = 3, 2
    rhs = GlobalCoeffVector(degree, RNG.normal(size=(n, num_coeffs(degree))))
    report = gmres(lambda v: v, rhs)
    assert report.iterations == 1
    assert report.converged
    assert_allclose(report.nu.values, rhs.values, rtol=1e-14)


def test_zero_rhs():
    rhs = GlobalCoeffVector.zeros(4, 3)
    report = gmres(lambda v: v, rhs)
    assert report.converged
    assert report.iterations == 0
    assert_allclose(report.nu.values, 0.0)
    assert report.residual_history == (0.0,)


def test_residual_history_shape_and_recomputed_residual():
    n, degree = 4, 2
    size = n * num_coeffs(degree)
    A = np.eye(size) + 0.5 * RNG.normal(size=(size, size)) / np.sqrt(size)
    b = RNG.normal(size=size)
    rhs = GlobalCoeffVector(degree, b.reshape(n, -1))
    tol = 1e-9
    report = gmres(wrap_matrix(A, n, degree), rhs, SolveSettings(tolerance=tol))
    assert report.residual_history[0] == 1.0
    assert len(report.residual_history) == report.iterations + 1
    # the recurrence residual must match the true one it promised
    true_res = np.linalg.norm(b - A @ report.nu.values.ravel()) / np.linalg.norm(b)
    assert true_res <= 1.01 * tol


def test_iteration_cap_reports_nonconvergence():
    n, degree = 4, 2
    size = n * num_coeffs(degree)
    A = np.eye(size) + 0.5 * RNG.normal(size=(size, size)) / np.sqrt(size)
    rhs = GlobalCoeffVector(degree, RNG.normal(size=(n, num_coeffs(degree))))
    report = gmres(
        wrap_matrix(A, n, degree), rhs, SolveSettings(tolerance=1e-15, max_iterations=3)
    )
    assert report.iterations == 3
    assert not report.converged


def test_happy_breakdown_gives_exact_solution():
    # an operator whose Krylov space closes after 2 steps: A = I + rank-1
    n, degree = 3, 1
    size = n * num_coeffs(degree)
    u = RNG.normal(size=size)
    A = np.eye(size) + np.outer(u, u) / (u @ u)
    b = u.copy()
    rhs = GlobalCoeffVector(degree, b.reshape(n, -1))
    report = gmres(wrap_matrix(A, n, degree), rhs, SolveSettings(tolerance=1e-30))
    assert report.converged
    assert report.iterations <= 2
    assert_allclose(A @ report.nu.values.ravel(), b, rtol=0, atol=1e-12)


def test_deterministic_history():
    n, degree = 4, 2
    size = n * num_coeffs(degree)
    A = np.eye(size) + 0.4 * RNG.normal(size=(size, size)) / np.sqrt(size)
    rhs = GlobalCoeffVector(degree, RNG.normal(size=(n, num_coeffs(degree))))
    first = gmres(wrap_matrix(A, n, degree), rhs)
    second = gmres(wrap_matrix(A, n, degree), rhs)
    assert first.residual_history == second.residual_history
    assert np.array_equal(first.nu.values, second.nu.values)


def test_settings_validation():
    with pytest.raises(DomainError):
        SolveSettings(tolerance=0.0)
    with pytest.raises(DomainError):
        SolveSettings(max_iterations=0)


def test_single_sphere_solves_in_one_iteration():
    # the single-sphere operator is the identity on the rhs Krylov space:
    # DtN V is diagonal and the rhs has only the l=0 line, which DtN kills
    system = SphereSystem((SphereSpec([0.0, 0.0, 0.0], 2.0, 50.0, 1.0),))
    ctx = OperatorContext(system, 8)
    sigma_f = free_charge_vector(system, 8)
    report = solve_induced_charge(ctx, sigma_f)
    assert report.converged
    assert report.iterations == 1
    # nu carries exactly the scaled free charge line
    expect = sigma_f.values * 4.0 * np.pi / system.kappa0
    assert_allclose(report.nu.values, expect, rtol=1e-14)


def test_matched_background_solves_in_one_iteration():
    system = SphereSystem(
        (
            SphereSpec([0.0, 0.0, 0.0], 1.0, 2.0, 1.0),
            SphereSpec([4.0, 0.0, 0.0], 1.0, 2.0, -1.0),
        ),
        kappa0=2.0,
    )
    ctx = OperatorContext(system, 5)
    sigma_f = free_charge_vector(system, 5)
    report = solve_induced_charge(ctx, sigma_f)
    assert report.converged
    assert report.iterations == 1


def test_solution_satisfies_operator_equation():
    from polsphere import make_alternating_lattice, rhs_from_free_charge

    system = make_alternating_lattice(2)
    ctx = OperatorContext(system, 4)
    sigma_f = free_charge_vector(system, 4)
    report = solve_induced_charge(ctx, sigma_f, SolveSettings(tolerance=1e-12))
    assert report.converged
    rhs = rhs_from_free_charge(ctx, sigma_f)
    residual = apply_system(ctx, report.nu).values - rhs.values
    rel = np.linalg.norm(residual) / np.linalg.norm(rhs.values)
    assert rel < 1e-11

"""Per-sphere electrostatic forces via excluded fields, plus the FD oracle.

The force on sphere i pairs its total surface charge against the electric
field generated by everything else (the "excluded" field: the self-sphere
contribution is removed before differentiation).  The pipeline is

  1. solve for the induced charge nu at degree lmax,
  2. expand the excluded potential on each sphere to degree lmax+1,
  3. differentiate its interior harmonic extension (gradient table),
  4. restrict the field back to the surface at degree lmax,
  5. pair against nu.

An independent check comes from central finite differences of the discrete
energy with the charge re-solved at every perturbed geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    NonPositiveParameter,
    OverlapError,
    SphereSystem,
    free_charge_vector,
    validate,
)
from .harmonics import GlobalCoeffVector, SurfaceCoeffs, degree_map, num_coeffs
from .operators import OperatorContext, apply_V, energy, inner_l2
from .solver import SolveSettings, solve_induced_charge


class GeometryError(ValueError):
    """A perturbed geometry no longer satisfies the validity assumptions."""


@dataclass(frozen=True)
class ExcludedPotential:
    """Trace of the potential of all other spheres, one degree past lmax."""

    sphere_index: int
    coeffs: SurfaceCoeffs


@dataclass(frozen=True)
class FieldTrace:
    """Cartesian components of the excluded electric field on one sphere."""

    sphere_index: int
    components: tuple[SurfaceCoeffs, SurfaceCoeffs, SurfaceCoeffs]


@dataclass(frozen=True)
class ForceReport:
    forces: np.ndarray
    energy: float
    force_sum: np.ndarray = None
    diagnostics: np.ndarray = None  # per-sphere force magnitudes

    def __post_init__(self):
        forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
        # derived fields are always recomputed from the forces themselves
        object.__setattr__(self, "forces", forces)
        object.__setattr__(self, "force_sum", forces.sum(axis=0))
        object.__setattr__(self, "diagnostics", np.linalg.norm(forces, axis=1))


def _excluded_values(ctx: OperatorContext, nu: GlobalCoeffVector):
    """All excluded-potential blocks at degree lmax+1 from one batched apply.

    Returns the excluded traces and the raw (V nu) traces; the latter feed
    the energy without a second operator application.
    """
    lam = apply_V(ctx, nu, out_degree=ctx.lmax + 1)
    out = lam.values.copy()
    deg = degree_map(nu.degree_max)
    out[:, : nu.values.shape[1]] -= nu.values * (ctx.radii[:, None] / (2 * deg + 1))
    return out, lam.values


def excluded_potential(ctx: OperatorContext, nu: GlobalCoeffVector, i: int) -> ExcludedPotential:
    """Potential on sphere i generated by every other sphere's charge."""
    if not 0 <= i < ctx.n_spheres:
        raise IndexError(f"sphere index {i} out of range [0, {ctx.n_spheres})")
    values, _ = _excluded_values(ctx, nu)
    return ExcludedPotential(i, SurfaceCoeffs(ctx.lmax + 1, values[i]))


def _field_values(ctx: OperatorContext, phi_values: np.ndarray, radii: np.ndarray) -> list[np.ndarray]:
    """E = -grad phi for a batch of degree-(lmax+1) potential traces.

    Trace coefficients become interior regular-solid-harmonic coefficients
    through division by r^l, the gradient table differentiates degree l into
    degree l-1, and multiplication by r^(l-1) restores surface traces at
    degree lmax.
    """
    deg_hi = degree_map(ctx.lmax + 1)
    deg_lo = degree_map(ctx.lmax)
    r = radii[:, None]
    regular = phi_values / r ** (deg_hi + 0.0)
    table = ctx.gradient_table
    return [-table.apply(regular, axis) * r ** (deg_lo + 0.0) for axis in range(3)]


def field_trace(ctx: OperatorContext, phi: ExcludedPotential) -> FieldTrace:
    """Surface trace of the excluded electric field on one sphere."""
    if phi.coeffs.degree_max != ctx.lmax + 1:
        raise ValueError(
            f"excluded potential must have degree {ctx.lmax + 1}, "
            f"got {phi.coeffs.degree_max}"
        )
    i = phi.sphere_index
    traces = _field_values(ctx, phi.coeffs.values[None, :], ctx.radii[i : i + 1])
    comps = tuple(SurfaceCoeffs(ctx.lmax, t[0]) for t in traces)
    return FieldTrace(i, comps)


def force_on_sphere(ctx: OperatorContext, nu_i: SurfaceCoeffs, field: FieldTrace) -> np.ndarray:
    """F = kappa0 r^2 sum over coefficients of [nu][E_alpha]."""
    r = ctx.radii[field.sphere_index]
    vals = nu_i.truncated(ctx.lmax).values
    return np.array(
        [ctx.kappa0 * r**2 * float(vals @ comp.values) for comp in field.components]
    )


def compute_all_forces(ctx: OperatorContext, nu: GlobalCoeffVector) -> ForceReport:
    """Forces on every sphere from one batched potential evaluation.

    The report's energy pairs the system's own free charge against V nu;
    the excluded-potential expansion is reused for it (degree blocks nest,
    so its truncation at lmax equals a direct degree-lmax application).
    """
    phi, lam_values = _excluded_values(ctx, nu)
    traces = _field_values(ctx, phi, ctx.radii)
    k = num_coeffs(ctx.lmax)
    nu_vals = nu.truncated(ctx.lmax).values
    scale = ctx.kappa0 * ctx.radii**2
    forces = np.stack([scale * np.sum(nu_vals * t, axis=1) for t in traces], axis=1)

    sigma_f = free_charge_vector(ctx.system, ctx.lmax)
    e = 0.5 * 4.0 * np.pi * inner_l2(
        ctx, sigma_f, GlobalCoeffVector(ctx.lmax, lam_values[:, :k])
    )
    return ForceReport(forces=forces, energy=e)


def energy_gradient_fd(
    ctx_factory,
    system: SphereSystem,
    sigma_f: GlobalCoeffVector,
    i: int,
    h: float = 1e-4,
    settings: SolveSettings | None = None,
) -> np.ndarray:
    """Force estimate -grad_i E by central differences with re-solves.

    ``ctx_factory`` maps a SphereSystem to an OperatorContext; the induced
    charge is re-solved at each of the six perturbed geometries with a tight
    tolerance (default 1e-11) so solver noise stays below the O(h^2)
    differencing error.
    """
    if not 0 <= i < system.n_spheres:
        raise IndexError(f"sphere index {i} out of range [0, {system.n_spheres})")
    if settings is None:
        settings = SolveSettings(tolerance=1e-11)
    base = system.spheres[i].center
    grad = np.zeros(3)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        energies = []
        for sign in (1.0, -1.0):
            moved = system.with_center(i, base + sign * step)
            try:
                validate(moved)
            except (OverlapError, NonPositiveParameter) as exc:
                raise GeometryError(
                    f"perturbed sphere {i} (axis {axis}, step {sign * h:+g}) "
                    f"fails validation: {exc}"
                ) from exc
            ctx = ctx_factory(moved)
            rep = solve_induced_charge(ctx, sigma_f, settings)
            energies.append(energy(ctx, sigma_f, rep.nu))
        grad[axis] = -(energies[0] - energies[1]) / (2.0 * h)
    return grad

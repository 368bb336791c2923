"""Electrostatics of many polarizable dielectric spheres.

The library solves a second-kind boundary integral equation for the induced
surface charge on each sphere, expanded in real spherical harmonics, and
evaluates the electrostatic energy and the net force on every sphere from
the solution.  Cross-sphere interactions run either through exact pairwise
multipole translations or through an octree of grouped expansions.

Typical use::

    import polsphere as ps

    system = ps.make_alternating_lattice(3)
    ctx = ps.OperatorContext(system, lmax=8)
    sigma_f = ps.free_charge_vector(system, ctx.lmax)
    report = ps.solve_induced_charge(ctx, sigma_f)
    forces = ps.compute_all_forces(ctx, report.nu)
"""

from .forces import (
    ExcludedPotential,
    FieldTrace,
    ForceReport,
    GeometryError,
    compute_all_forces,
    energy_gradient_fd,
    excluded_potential,
    field_trace,
    force_on_sphere,
)
from .geometry import (
    NonPositiveParameter,
    OverlapError,
    SphereSpec,
    SphereSystem,
    ValidationReport,
    free_charge_vector,
    load_system,
    make_alternating_lattice,
    make_layered_lattice,
    save_system,
    validate,
)
from .harmonics import (
    DomainError,
    GlobalCoeffVector,
    GradientTable,
    QuadratureGrid,
    SizeMismatch,
    SurfaceCoeffs,
    analyze,
    build_gradient_table,
    build_grid,
    degree_map,
    eval_real_sh,
    flat_index,
    num_coeffs,
    order_map,
    sh_basis,
    synthesize,
)
from .operators import (
    BackendError,
    OperatorContext,
    apply_DtN,
    apply_system,
    apply_V,
    energy,
    hs_norm,
    inner_l2,
    rhs_from_free_charge,
    triple_dual_norm,
    triple_norm,
)
from .solver import SolveReport, SolveSettings, gmres, solve_induced_charge
from .translations import (
    DepthError,
    LocalExpansion,
    MultipoleExpansion,
    Octree,
    SingularTranslation,
    TranslationCache,
    build_octree,
    default_mac_ratio,
    eval_local,
    eval_multipole,
    l2l,
    m2l,
    m2m,
    point_charge_multipole,
    sphere_to_multipole,
    translation_matrix,
    tree_potential,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "DepthError",
    "DomainError",
    "ExcludedPotential",
    "FieldTrace",
    "ForceReport",
    "GeometryError",
    "GlobalCoeffVector",
    "GradientTable",
    "LocalExpansion",
    "MultipoleExpansion",
    "NonPositiveParameter",
    "Octree",
    "OperatorContext",
    "OverlapError",
    "QuadratureGrid",
    "SingularTranslation",
    "SizeMismatch",
    "SolveReport",
    "SolveSettings",
    "SphereSpec",
    "SphereSystem",
    "SurfaceCoeffs",
    "TranslationCache",
    "ValidationReport",
    "analyze",
    "apply_DtN",
    "apply_V",
    "apply_system",
    "build_gradient_table",
    "build_grid",
    "build_octree",
    "compute_all_forces",
    "default_mac_ratio",
    "degree_map",
    "energy",
    "energy_gradient_fd",
    "eval_local",
    "eval_multipole",
    "eval_real_sh",
    "excluded_potential",
    "field_trace",
    "flat_index",
    "force_on_sphere",
    "free_charge_vector",
    "gmres",
    "hs_norm",
    "inner_l2",
    "l2l",
    "load_system",
    "m2l",
    "m2m",
    "make_alternating_lattice",
    "make_layered_lattice",
    "num_coeffs",
    "order_map",
    "point_charge_multipole",
    "rhs_from_free_charge",
    "save_system",
    "sh_basis",
    "solve_induced_charge",
    "sphere_to_multipole",
    "synthesize",
    "translation_matrix",
    "tree_potential",
    "triple_dual_norm",
    "triple_norm",
    "validate",
]

"""Discrete boundary operators, norms, and the electrostatic energy.

Everything acts on per-sphere real spherical-harmonic coefficient blocks.
With the orthonormal basis, the Galerkin mass matrices are multiples of the
identity and cancel from the linear system, so the operators below work in
coefficient space directly:

  - the single layer operator V has self-sphere eigenvalues r/(2l+1) and
    cross-sphere blocks realized by exact multipole/local translations;
  - the interior Dirichlet-to-Neumann map is diagonal with eigenvalues l/r;
  - the system operator is nu - ((kappa0 - kappa_i)/kappa0) DtN(V nu).

Cross-sphere work runs through one of two backends: "direct" translates
every ordered sphere pair (exact, O(N^2)), "tree" routes the far field
through an octree of grouped expansions (controllably accurate, near O(N)).
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import SphereSystem, validate
from .harmonics import (
    DomainError,
    GlobalCoeffVector,
    GradientTable,
    SizeMismatch,
    build_gradient_table,
    degree_map,
    num_coeffs,
)
from .translations import (
    Octree,
    TranslationCache,
    apply_translation_groups,
    build_octree,
    group_by_displacement,
    tree_potential,
)


class BackendError(RuntimeError):
    """The requested cross-sphere backend cannot be used."""


class OperatorContext:
    """Immutable bundle of a validated system, a truncation degree, and caches.

    Parameters
    ----------
    system : the sphere system; validated on construction.
    lmax : truncation degree of the surface densities.
    backend : "direct" for exact pairwise translations, "tree" for the
        octree backend.
    tree_levels, tree_order, mac_ratio : tree backend knobs; order defaults
        to 2*lmax (doubling rule), levels to "auto".

    The configuration is fixed after construction.  Internally the context
    lazily builds and caches translation-matrix tables, the octree, and the
    gradient table, all of which depend only on the configuration.
    """

    def __init__(
        self,
        system: SphereSystem,
        lmax: int,
        backend: str = "direct",
        tree_levels: int | str = "auto",
        tree_order: int | None = None,
        mac_ratio: float | None = None,
    ):
        if lmax < 0:
            raise DomainError("lmax must be >= 0")
        if backend not in ("direct", "tree"):
            raise BackendError(f"unknown backend {backend!r}")
        self.system = system
        self.report = validate(system)
        self.lmax = int(lmax)
        self.backend = backend
        self.tree_levels = tree_levels
        self.tree_order = int(tree_order) if tree_order is not None else 2 * self.lmax
        self.mac_ratio = mac_ratio
        self.radii = system.radii
        self.centers = system.centers
        self.kappas = system.kappas
        self.kappa0 = system.kappa0
        self._octree: Octree | None = None
        self._pair_groups = None
        self._pair_matrices: dict[int, list] = {}
        self._cache = TranslationCache()
        self._gradient_table: GradientTable | None = None

    @property
    def n_spheres(self) -> int:
        return self.system.n_spheres

    @property
    def octree(self) -> Octree:
        if self._octree is None:
            self._octree = build_octree(
                self.system,
                levels=self.tree_levels,
                order=self.tree_order,
                mac_ratio=self.mac_ratio,
            )
        return self._octree

    @property
    def gradient_table(self) -> GradientTable:
        if self._gradient_table is None:
            self._gradient_table = build_gradient_table(self.lmax + 1)
        return self._gradient_table

    def _pairs(self):
        """Ordered cross-sphere pairs grouped by displacement class."""
        if self._pair_groups is None:
            n = self.n_spheres
            i, j = np.divmod(np.arange(n * n, dtype=np.int64), n)
            keep = i != j
            i, j = i[keep], j[keep]
            self._pair_groups = group_by_displacement(
                self.centers[i] - self.centers[j], i, j
            )
        return self._pair_groups

    def _direct_tables(self, out_degree: int, in_degree: int):
        """Per-class translation matrices for the direct backend.

        Matrices are built once at out degree lmax+1; the lmax variant is a
        row slice of the same matrix (degree blocks nest), so both apply_V
        output degrees share a single construction pass.
        """
        key = (out_degree, in_degree)
        tables = self._pair_matrices.get(key)
        if tables is None:
            full = self._pair_matrices.get((self.lmax + 1, in_degree))
            if full is None:
                full = [
                    self._cache.get("sr", dvec, self.lmax + 1, in_degree)
                    for dvec, _, _ in self._pairs()
                ]
                self._pair_matrices[(self.lmax + 1, in_degree)] = full
            if out_degree == self.lmax + 1:
                tables = full
            else:
                k = num_coeffs(out_degree)
                tables = [np.ascontiguousarray(T[:k]) for T in full]
            self._pair_matrices[key] = tables
        return tables


def _as_values(vec: GlobalCoeffVector, n: int, lmax: int) -> np.ndarray:
    if not isinstance(vec, GlobalCoeffVector):
        raise SizeMismatch("expected a GlobalCoeffVector")
    if vec.n_spheres != n:
        raise SizeMismatch(f"expected {n} blocks, got {vec.n_spheres}")
    if vec.degree_max > lmax:
        raise DomainError(f"degree {vec.degree_max} exceeds lmax {lmax}")
    return vec.values


def apply_V(
    ctx: OperatorContext, sigma: GlobalCoeffVector, out_degree: int | None = None
) -> GlobalCoeffVector:
    """Surface traces of the single layer potential of ``sigma``.

    Block i of the result holds the coefficients of (V sigma) restricted to
    sphere i, truncated at ``out_degree`` (lmax or lmax+1; the extra degree
    feeds the force pipeline).  The self-sphere part is the exact eigenvalue
    relation r_i/(2l+1); cross-sphere parts arrive as local expansions about
    each center and pick up the factor r_i^l on degree l to become traces.
    """
    if out_degree is None:
        out_degree = ctx.lmax
    if out_degree not in (ctx.lmax, ctx.lmax + 1):
        raise DomainError(f"out_degree must be lmax or lmax+1, got {out_degree}")
    n = ctx.n_spheres
    values = _as_values(sigma, n, ctx.lmax)
    src_deg = sigma.degree_max
    radii = ctx.radii
    k_out = num_coeffs(out_degree)

    if ctx.backend == "tree":
        local = tree_potential(ctx.octree, sigma, out_degree).values
    else:
        deg_in = degree_map(src_deg)
        mult = values * (4.0 * np.pi / (2 * deg_in + 1)) * radii[:, None] ** (deg_in + 2.0)
        local = np.zeros((n, k_out))
        for (dvec, tgt, src_idx), T in zip(ctx._pairs(), ctx._direct_tables(out_degree, src_deg)):
            local[tgt] += mult[src_idx] @ T.T

    deg_out = degree_map(out_degree)
    out = local * radii[:, None] ** (deg_out + 0.0) / (4.0 * np.pi)
    self_scale = radii[:, None] / (2 * degree_map(src_deg) + 1)
    out[:, : values.shape[1]] += values * self_scale
    return GlobalCoeffVector(out_degree, out)


def apply_DtN(ctx: OperatorContext, lam: GlobalCoeffVector) -> GlobalCoeffVector:
    """Interior Dirichlet-to-Neumann map: degree l scales by l/r_i.

    The interior harmonic extension of a degree-l trace is (rho/r)^l Y, whose
    outward normal derivative on the surface is (l/r) Y; constants map to
    zero.
    """
    deg = degree_map(lam.degree_max)
    return GlobalCoeffVector(lam.degree_max, lam.values * (deg / ctx.radii[:, None]))


def apply_system(ctx: OperatorContext, nu: GlobalCoeffVector) -> GlobalCoeffVector:
    """The discrete integral operator: nu - ((kappa0 - kappa_i)/kappa0) DtN(V nu)."""
    values = _as_values(nu, ctx.n_spheres, ctx.lmax)
    w = apply_V(ctx, nu, out_degree=ctx.lmax)
    d = apply_DtN(ctx, w)
    contrast = (ctx.kappa0 - ctx.kappas) / ctx.kappa0
    out = d.values * (-contrast[:, None])
    out[:, : values.shape[1]] += values
    return GlobalCoeffVector(ctx.lmax, out)


def rhs_from_free_charge(ctx: OperatorContext, sigma_f: GlobalCoeffVector) -> GlobalCoeffVector:
    """Right-hand side (4 pi / kappa0) sigma_f, projected to degree lmax."""
    return GlobalCoeffVector(
        ctx.lmax, sigma_f.truncated(ctx.lmax).values * (4.0 * np.pi / ctx.kappa0)
    )


def hs_norm(ctx: OperatorContext, u: GlobalCoeffVector, s: float) -> float:
    """Sobolev-scale coefficient norm with per-degree weight (l/r)^(2s).

    The l=0 weight is r^2 for every s, so s=0 gives the scaled L2 norm and
    s=1/2 reproduces triple_norm.
    """
    if s < 0:
        raise DomainError("s must be >= 0")
    deg = degree_map(u.degree_max)
    ratio = deg / ctx.radii[:, None]
    weights = np.where(deg[None, :] == 0, 1.0, ratio ** (2.0 * s))
    total = np.sum(ctx.radii**2 * np.sum(weights * u.values**2, axis=1))
    return math.sqrt(total)


def triple_norm(ctx: OperatorContext, lam: GlobalCoeffVector) -> float:
    """The energy-space norm: sqrt(sum r^2 [l=0]^2 + r^2 (l/r) [coeffs]^2)."""
    return hs_norm(ctx, lam, 0.5)


def triple_dual_norm(ctx: OperatorContext, sigma: GlobalCoeffVector) -> float:
    """Exact dual of triple_norm under the L2 pairing sum r^2 [sigma][psi].

    Diagonal duality gives per-coefficient weights r^2 at l=0 and r^3/l at
    l >= 1.
    """
    deg = degree_map(sigma.degree_max)
    r = ctx.radii[:, None]
    weights = np.where(deg[None, :] == 0, r**2, r**3 / np.maximum(deg[None, :], 1))
    return math.sqrt(float(np.sum(weights * sigma.values**2)))


def inner_l2(ctx: OperatorContext, a: GlobalCoeffVector, b: GlobalCoeffVector) -> float:
    """Surface L2 pairing: sum_i r_i^2 sum_lm [a_i][b_i]."""
    if a.degree_max != b.degree_max:
        raise SizeMismatch("degree mismatch in pairing")
    return float(np.sum(ctx.radii**2 * np.sum(a.values * b.values, axis=1)))


def energy(ctx: OperatorContext, sigma_f: GlobalCoeffVector, nu: GlobalCoeffVector) -> float:
    """Electrostatic energy (1/2) 4 pi <sigma_f, V nu> at degree lmax."""
    w = apply_V(ctx, nu, out_degree=ctx.lmax)
    sf = sigma_f.truncated(ctx.lmax)
    return 0.5 * 4.0 * np.pi * inner_l2(ctx, sf, w)

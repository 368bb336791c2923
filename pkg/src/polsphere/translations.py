"""Solid-harmonic expansions, translation operators, and an octree far-field.

The bare Coulomb kernel ``1/|x - y|`` is used throughout this module.  A
multipole expansion with coefficients ``M_l^m`` about center ``c`` represents

    Phi(x) = sum_lm M_l^m S_l^m(x - c),   S_l^m(x) = |x|^-(l+1) Y_l^m(x/|x|)

valid outside the sources; a local expansion represents

    Phi(x) = sum_lm L_l^m R_l^m(x - c),   R_l^m(x) = |x|^l Y_l^m(x/|x|)

valid inside a source-free ball.  Translations between these families are
diagonal in the harmonic order after rotating the displacement onto the z
axis, which is how all translation matrices here are assembled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .harmonics import (
    DomainError,
    SizeMismatch,
    SurfaceCoeffs,
    GlobalCoeffVector,
    build_grid,
    degree_map,
    flat_index,
    num_coeffs,
    sh_basis,
)

__all__ = [
    "SingularTranslation",
    "DepthError",
    "MultipoleExpansion",
    "LocalExpansion",
    "sphere_to_multipole",
    "point_charge_multipole",
    "m2l",
    "m2m",
    "l2l",
    "eval_multipole",
    "eval_local",
    "translation_matrix",
    "TranslationCache",
    "Octree",
    "build_octree",
    "tree_potential",
]


class SingularTranslation(ValueError):
    """Raised when a multipole-to-local translation has zero displacement."""


class DepthError(ValueError):
    """Raised when a requested octree depth leaves spheres larger than leaves."""


# ---------------------------------------------------------------------------
# z-axis translation coefficients
#
# A shift by t along +z maps each harmonic order m to itself, identically for
# the cosine and sine components, so the coefficient tables below are pure
# numbers indexed by (m, l_in, l_out) and the power of t is fixed by the pair
# of degrees.  The tables follow from differentiating the expansion in t and
# using the z-derivative ladder of solid harmonics:
#
#     d/dz R_l^m = a_lm R_{l-1}^m,  a_lm = sqrt((l^2-m^2)(2l+1)/(2l-1))
#     d/dz S_l^m = -b_lm S_{l+1}^m, b_lm = sqrt(((l+1)^2-m^2)(2l+1)/(2l+3))
# ---------------------------------------------------------------------------


def _ladder_a(l: int, m: int) -> float:
    return math.sqrt((l * l - m * m) * (2 * l + 1) / (2 * l - 1))


def _ladder_b(l: int, m: int) -> float:
    return math.sqrt(((l + 1) ** 2 - m * m) * (2 * l + 1) / (2 * l + 3))


def _seed_ratio(m: int, lp: int) -> float:
    """N_mm / N_lp,m as a log-space-stable product of factorial ratios."""
    lg = (
        math.log(2 * m + 1)
        + math.lgamma(lp + m + 1)
        - math.lgamma(2 * m + 1)
        - math.log(2 * lp + 1)
        - math.lgamma(lp - m + 1)
    )
    return math.exp(0.5 * lg)


_Z_TABLE_CACHE: dict[tuple[str, int, int], list[np.ndarray]] = {}


def _z_tables(kind: str, deg_out: int, deg_in: int) -> list[np.ndarray]:
    """Pure-number z-shift tables; entry [m][l_in, l_out], zero where invalid.

    kind "sr": S_l(x + t z) = sum c[l,l'] t^-(l+l'+1) R_l'(x)   (|x| < t)
    kind "ss": S_l(x + t z) = sum e[l,l'] t^(l'-l) S_l'(x)      (|x| > t)
    kind "rr": R_l(x + t z) = sum d[l,l'] t^(l-l') R_l'(x)      (all x)
    """
    key = (kind, deg_out, deg_in)
    hit = _Z_TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    tables = []
    for m in range(min(deg_out, deg_in) + 1):
        A = np.zeros((deg_in + 1, deg_out + 1))
        if kind in ("sr", "ss"):
            for lp in range(m, deg_out + 1):
                sign = -1.0 if (lp - m) % 2 else 1.0
                A[m, lp] = sign * _seed_ratio(m, lp)
            for l in range(m, deg_in):
                b = _ladder_b(l, m)
                if kind == "sr":
                    for lp in range(m, deg_out + 1):
                        A[l + 1, lp] = (l + lp + 1) * A[l, lp] / b
                else:
                    for lp in range(m, deg_out + 1):
                        A[l + 1, lp] = (l - lp) * A[l, lp] / b
        elif kind == "rr":
            for l in range(m, deg_in + 1):
                if l <= deg_out:
                    A[l, l] = 1.0
                prod = 1.0
                for lp in range(l - 1, m - 1, -1):
                    prod *= _ladder_a(lp + 1, m)
                    if lp <= deg_out:
                        A[l, lp] = prod / math.factorial(l - lp)
        else:
            raise ValueError(f"unknown translation kind {kind!r}")
        tables.append(A)
    _Z_TABLE_CACHE[key] = tables
    return tables


def _z_matrix(kind: str, t: float, deg_out: int, deg_in: int) -> np.ndarray:
    """Dense translation matrix for a shift of t along +z."""
    tables = _z_tables(kind, deg_out, deg_in)
    out = np.zeros((num_coeffs(deg_out), num_coeffs(deg_in)))
    for m in range(min(deg_out, deg_in) + 1):
        li = np.arange(m, deg_in + 1)
        lo = np.arange(m, deg_out + 1)
        block = tables[m][np.ix_(li, lo)]
        if kind == "sr":
            powers = t ** (-(li[:, None] + lo[None, :] + 1.0))
        elif kind == "ss":
            powers = np.where(block != 0.0, t ** (lo[None, :] - li[:, None] + 0.0), 0.0)
        else:
            powers = np.where(block != 0.0, t ** (li[:, None] - lo[None, :] + 0.0), 0.0)
        block = (block * powers).T  # now (l_out, l_in)
        rows = lo * lo + lo + m
        cols = li * li + li + m
        out[np.ix_(rows, cols)] = block
        if m > 0:
            out[np.ix_(lo * lo + lo - m, li * li + li - m)] = block
    return out


# ---------------------------------------------------------------------------
# Rotations of real harmonic coefficient blocks
# ---------------------------------------------------------------------------


def _frame_rotation(unit: np.ndarray) -> np.ndarray | None:
    """Orthogonal Q with Q @ unit = z-hat, or None when unit is z-hat."""
    if unit[2] > 1.0 - 1e-14:
        return None
    if unit[2] < -1.0 + 1e-14:
        return np.diag([1.0, -1.0, -1.0])
    k = int(np.argmin(np.abs(unit)))
    e1 = -unit * unit[k]
    e1[k] += 1.0
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(unit, e1)
    return np.array([e1, e2, unit])


_ROT_CACHE: dict[tuple[bytes, int], np.ndarray] = {}
_ROT_GRIDS: dict[int, object] = {}


def _rotation_blocks(Q: np.ndarray, degree_max: int) -> np.ndarray:
    """Coefficient rotation D with Y_l^m(Q^T u) = sum_m' D[m'm] Y_l^m'(u).

    Computed by quadrature of exactness 2*degree_max, which integrates the
    product of two degree-l harmonics exactly, so D is exact to roundoff.
    Block diagonal over degrees and orthogonal.
    """
    key = (np.round(Q, 12).tobytes(), degree_max)
    hit = _ROT_CACHE.get(key)
    if hit is not None:
        return hit
    grid = _ROT_GRIDS.get(degree_max)
    if grid is None:
        grid = build_grid(2 * degree_max)
        _ROT_GRIDS[degree_max] = grid
    base = grid.basis(degree_max)
    rotated = sh_basis(grid.nodes @ Q, degree_max)
    D = base.T @ (grid.weights[:, None] * rotated)
    deg = degree_map(degree_max)
    D[deg[:, None] != deg[None, :]] = 0.0
    D.flags.writeable = False
    _ROT_CACHE[key] = D
    return D


def translation_matrix(kind: str, displacement: np.ndarray, deg_out: int, deg_in: int) -> np.ndarray:
    """Matrix re-expanding solid harmonics about a shifted center.

    For coefficients A of a field ``sum A_lm X_l^m(x - c_old)``, the product
    ``T @ A`` gives coefficients about ``c_new = c_old + displacement`` in the
    output family.  ``kind`` is "sr" (singular to regular), "ss" (singular to
    singular) or "rr" (regular to regular).
    """
    d = np.asarray(displacement, dtype=np.float64).reshape(3)
    t = float(np.linalg.norm(d))
    if kind == "sr" and t < 1e-12:
        raise SingularTranslation("singular-to-regular shift requires a nonzero displacement")
    if t == 0.0:
        k = min(deg_out, deg_in)
        out = np.zeros((num_coeffs(deg_out), num_coeffs(deg_in)))
        idx = np.arange(num_coeffs(k))
        out[idx, idx] = 1.0
        return out
    Q = _frame_rotation(d / t)
    Tz = _z_matrix(kind, t, deg_out, deg_in)
    if Q is None:
        return Tz
    d_out = _rotation_blocks(Q, deg_out)
    d_in = _rotation_blocks(Q, deg_in)
    return d_out.T @ (Tz @ d_in)


def _parity_flip(T: np.ndarray, deg_out: int, deg_in: int) -> np.ndarray:
    """Translation matrix for the opposite displacement, via parity."""
    so = np.where(degree_map(deg_out) % 2 == 0, 1.0, -1.0)
    si = np.where(degree_map(deg_in) % 2 == 0, 1.0, -1.0)
    return (so[:, None] * T) * si[None, :]


class TranslationCache:
    """Translation matrices cached per displacement class.

    Opposite displacements share one build through the parity relation
    ``T(-d) = P T(d) P`` with ``P = diag((-1)^l)``.
    """

    def __init__(self):
        self._store: dict = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, kind: str, dvec: np.ndarray, deg_out: int, deg_in: int) -> np.ndarray:
        key = (kind, deg_out, deg_in, np.round(dvec, 10).tobytes())
        hit = self._store.get(key)
        if hit is None:
            mirror = (kind, deg_out, deg_in, np.round(-np.asarray(dvec), 10).tobytes())
            partner = self._store.get(mirror)
            if partner is not None:
                hit = _parity_flip(partner, deg_out, deg_in)
            else:
                hit = translation_matrix(kind, dvec, deg_out, deg_in)
            self._store[key] = hit
        return hit


# ---------------------------------------------------------------------------
# Expansion value objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultipoleExpansion:
    """Outgoing (singular) expansion about a center, bare-kernel convention."""

    center: np.ndarray
    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.shape != (num_coeffs(self.order),):
            raise SizeMismatch(
                f"expected {num_coeffs(self.order)} coefficients, got {coeffs.shape}"
            )
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "coeffs", coeffs)

    def coeff(self, l: int, m: int) -> float:
        if l < 0 or l > self.order or abs(m) > l:
            raise DomainError(f"(l={l}, m={m}) outside truncation {self.order}")
        return float(self.coeffs[flat_index(l, m)])


@dataclass(frozen=True)
class LocalExpansion:
    """Incoming (regular) expansion about a center, bare-kernel convention."""

    center: np.ndarray
    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.shape != (num_coeffs(self.order),):
            raise SizeMismatch(
                f"expected {num_coeffs(self.order)} coefficients, got {coeffs.shape}"
            )
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "coeffs", coeffs)

    def coeff(self, l: int, m: int) -> float:
        if l < 0 or l > self.order or abs(m) > l:
            raise DomainError(f"(l={l}, m={m}) outside truncation {self.order}")
        return float(self.coeffs[flat_index(l, m)])


def sphere_to_multipole(
    sphere, density: SurfaceCoeffs, order: int | None = None
) -> MultipoleExpansion:
    """Multipole expansion of a single-layer density on a sphere surface.

    ``sphere`` is anything with ``center`` and ``radius`` attributes.  A
    surface density ``Y_l^m`` on a sphere of radius r produces the exact
    multipole ``(4 pi / (2l+1)) r^(l+2)`` at the same (l, m); degrees above
    ``order`` (default: the density's own degree) are dropped.
    """
    radius = float(sphere.radius)
    if radius <= 0:
        raise DomainError("radius must be positive")
    if order is None:
        order = density.degree_max
    vals = np.zeros(num_coeffs(order))
    top = min(order, density.degree_max)
    k = num_coeffs(top)
    deg = degree_map(top)
    vals[:k] = density.values[:k] * (4.0 * np.pi / (2 * deg + 1)) * radius ** (deg + 2.0)
    return MultipoleExpansion(sphere.center, order, vals)


def point_charge_multipole(center: np.ndarray, charge: float, order: int) -> MultipoleExpansion:
    """Multipole expansion of an isolated point charge (bare kernel)."""
    vals = np.zeros(num_coeffs(order))
    vals[0] = charge * math.sqrt(4.0 * np.pi)
    return MultipoleExpansion(center, order, vals)


def m2l(source: MultipoleExpansion, target_center: np.ndarray, target_order: int) -> LocalExpansion:
    """Re-expand a multipole as a local expansion about a distant center."""
    target_center = np.asarray(target_center, dtype=np.float64).reshape(3)
    T = translation_matrix("sr", target_center - source.center, target_order, source.order)
    return LocalExpansion(target_center, target_order, T @ source.coeffs)


def m2m(child: MultipoleExpansion, new_center: np.ndarray, order: int | None = None) -> MultipoleExpansion:
    """Re-center a multipole expansion; exact for all retained degrees."""
    new_center = np.asarray(new_center, dtype=np.float64).reshape(3)
    if order is None:
        order = child.order
    T = translation_matrix("ss", new_center - child.center, order, child.order)
    return MultipoleExpansion(new_center, order, T @ child.coeffs)


def l2l(parent: LocalExpansion, new_center: np.ndarray, order: int | None = None) -> LocalExpansion:
    """Re-center a local expansion; exact at equal order."""
    new_center = np.asarray(new_center, dtype=np.float64).reshape(3)
    if order is None:
        order = parent.order
    T = translation_matrix("rr", new_center - parent.center, order, parent.order)
    return LocalExpansion(new_center, order, T @ parent.coeffs)


def eval_multipole(expansion: MultipoleExpansion, points: np.ndarray) -> np.ndarray:
    """Evaluate a multipole expansion at points outside its sources."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rel = points - expansion.center
    r = np.linalg.norm(rel, axis=1)
    if np.any(r == 0):
        raise DomainError("cannot evaluate a multipole expansion at its center")
    basis = sh_basis(rel / r[:, None], expansion.order)
    deg = degree_map(expansion.order)
    return (basis * r[:, None] ** (-(deg[None, :] + 1.0))) @ expansion.coeffs


def eval_local(expansion: LocalExpansion, points: np.ndarray) -> np.ndarray:
    """Evaluate a local expansion at points inside its ball of validity."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rel = points - expansion.center
    r = np.linalg.norm(rel, axis=1)
    deg = degree_map(expansion.order)
    safe = np.where(r > 0, r, 1.0)
    dirs = np.where(r[:, None] > 0, rel / safe[:, None], [[0.0, 0.0, 1.0]])
    basis = sh_basis(dirs, expansion.order)
    powers = np.where(
        (r[:, None] == 0) & (deg[None, :] > 0), 0.0, safe[:, None] ** (deg[None, :] + 0.0)
    )
    return (basis * powers) @ expansion.coeffs


# ---------------------------------------------------------------------------
# Octree far-field backend
# ---------------------------------------------------------------------------


@dataclass
class _TreeLevel:
    codes: np.ndarray          # sorted linear box codes, occupied boxes only
    centers: np.ndarray        # (n_boxes, 3)
    content_radius: np.ndarray  # covers every sphere in the subtree
    parent_row: np.ndarray     # row in the coarser level (-1 at the root)


@dataclass
class Octree:
    """Spatial grouping of spheres plus interaction lists for the far field.

    Geometry only; translation matrices are built lazily on first use and
    cached per displacement class, so repeated applications (for instance
    inside an iterative solve) reuse them.
    """

    centers: np.ndarray
    radii: np.ndarray
    origin: np.ndarray
    side: float
    levels: int
    order: int
    mac_ratio: float
    level_data: list[_TreeLevel]
    leaf_row: np.ndarray                 # sphere -> leaf row
    m2l_groups: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]]
    m2m_groups: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]]
    l2l_groups: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]]
    lift_groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    drop_groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    near_groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    stats: dict
    _matrix_cache: TranslationCache = field(default_factory=TranslationCache, repr=False)

    @property
    def n_spheres(self) -> int:
        return self.centers.shape[0]


def group_by_displacement(
    disp: np.ndarray, tgt: np.ndarray, src: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Group interaction pairs sharing the same displacement vector."""
    if disp.shape[0] == 0:
        return []
    keys, inverse = np.unique(np.round(disp, 10), axis=0, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(keys.shape[0] + 1))
    groups = []
    for g in range(keys.shape[0]):
        sel = order[bounds[g] : bounds[g + 1]]
        groups.append((keys[g], tgt[sel], src[sel]))
    return groups


def apply_translation_groups(
    cache: TranslationCache,
    kind: str,
    groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    values: np.ndarray,
    deg_out: int,
    n_out: int,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Gather-transform-scatter application of one family of translations.

    Within a single displacement class, target indices never repeat (the
    map source + displacement -> target is injective), so the scatter is a
    plain fancy-index accumulation rather than a bincount reduction.
    """
    k_out = num_coeffs(deg_out)
    deg_in = int(math.isqrt(values.shape[1])) - 1
    if out is None:
        out = np.zeros((n_out, k_out))
    for dvec, tgt, src in groups:
        T = cache.get(kind, dvec, deg_out, deg_in)
        out[tgt] += values[src] @ T.T
    return out


def default_mac_ratio(order: int) -> float:
    """Admissibility threshold giving roughly 1e-10 far-field truncation error.

    The leading truncation term of a separated expansion of order P decays
    like ratio**(P+1), so the threshold loosens as the order grows.
    """
    return min(0.4, 10.0 ** (-10.0 / (order + 2.0)))


def build_octree(
    system,
    levels: int | str = "auto",
    order: int | None = None,
    mac_ratio: float | None = None,
) -> Octree:
    """Build the spatial tree and interaction lists for a sphere system.

    Parameters
    ----------
    system : SphereSystem (anything with ``centers`` (n,3) and ``radii`` (n,)).
    levels : number of subdivisions below the root box, or "auto" to pick the
        deepest level averaging at most 8 spheres per leaf while keeping leaf
        boxes at least two maximum radii wide.
    order : expansion order for box multipoles and locals.
    mac_ratio : admissibility threshold.  A pair of boxes interacts through
        expansions only when each content radius is at most ``mac_ratio``
        times its distance to the other box's content sphere; smaller values
        are more accurate and push more pairs into the exact near field.
        Default: ``default_mac_ratio(order)``.

    Raises
    ------
    DepthError
        If an explicit ``levels`` makes leaf boxes narrower than the widest
        sphere diameter.
    """
    centers = np.asarray(system.centers, dtype=np.float64)
    radii = np.asarray(system.radii, dtype=np.float64)
    n = centers.shape[0]
    if order is None:
        raise DomainError("order must be specified")
    order = int(order)
    if order < 0:
        raise DomainError("order must be >= 0")
    if mac_ratio is None:
        mac_ratio = default_mac_ratio(order)
    if not (0 < mac_ratio < 1):
        raise DomainError("mac_ratio must lie in (0, 1)")

    lo = np.min(centers - radii[:, None], axis=0)
    hi = np.max(centers + radii[:, None], axis=0)
    side = float(np.max(hi - lo)) * (1.0 + 1e-12) + 1e-300
    origin = (lo + hi) / 2.0 - side / 2.0
    r_max = float(radii.max()) if n else 0.0

    if levels == "auto":
        depth = 0
        while n / 8.0**depth > 8.0 and side / 2.0 ** (depth + 1) >= 2.0 * r_max:
            depth += 1
    else:
        depth = int(levels)
        if depth < 0:
            raise DomainError("levels must be >= 0")
        if depth > 0 and side / 2.0**depth < 2.0 * r_max:
            raise DepthError(
                f"{depth} levels give leaf width {side / 2.0 ** depth:.4g}, "
                f"narrower than the widest sphere diameter {2 * r_max:.4g}"
            )

    nb = 2**depth
    leaf_ijk = np.clip(((centers - origin) / (side / nb)).astype(np.int64), 0, nb - 1)

    level_data: list[_TreeLevel] = []
    sphere_rows: list[np.ndarray] = []
    level_ijk: list[np.ndarray] = []
    for lev in range(depth + 1):
        shift = depth - lev
        ijk = leaf_ijk >> shift
        nb_l = 2**lev
        codes_all = (ijk[:, 0] * nb_l + ijk[:, 1]) * nb_l + ijk[:, 2]
        codes = np.unique(codes_all)
        rows = np.searchsorted(codes, codes_all)
        box_ijk = np.empty((codes.size, 3), dtype=np.int64)
        box_ijk[:, 2] = codes % nb_l
        box_ijk[:, 1] = (codes // nb_l) % nb_l
        box_ijk[:, 0] = codes // (nb_l * nb_l)
        w = side / nb_l
        box_centers = origin + (box_ijk + 0.5) * w
        content = np.zeros(codes.size)
        reach = np.linalg.norm(centers - box_centers[rows], axis=1) + radii
        np.maximum.at(content, rows, reach)
        if lev == 0:
            parent = np.full(codes.size, -1, dtype=np.int64)
        else:
            pikj = box_ijk >> 1
            nb_p = nb_l // 2
            pcodes = (pikj[:, 0] * nb_p + pikj[:, 1]) * nb_p + pikj[:, 2]
            parent = np.searchsorted(level_data[lev - 1].codes, pcodes)
        level_data.append(_TreeLevel(codes, box_centers, content, parent))
        sphere_rows.append(rows)
        level_ijk.append(box_ijk)

    leaf_row = sphere_rows[depth]

    # children lists per level, for expanding inadmissible pairs
    children: list[list[np.ndarray]] = []
    for lev in range(depth):
        par = level_data[lev + 1].parent_row
        order_idx = np.argsort(par, kind="stable")
        bounds = np.searchsorted(par[order_idx], np.arange(level_data[lev].codes.size + 1))
        children.append([order_idx[bounds[i] : bounds[i + 1]] for i in range(level_data[lev].codes.size)])

    # dual traversal with the content-sphere admissibility condition
    m2l_groups: list[list] = [[] for _ in range(depth + 1)]
    near_a_parts: list[np.ndarray] = []
    near_b_parts: list[np.ndarray] = []
    n_m2l = np.zeros(depth + 1, dtype=np.int64)
    cand_a = np.zeros(1, dtype=np.int64)
    cand_b = np.zeros(1, dtype=np.int64)
    for lev in range(depth + 1):
        data = level_data[lev]
        if cand_a.size:
            d = data.centers[cand_a] - data.centers[cand_b]
            dist = np.linalg.norm(d, axis=1)
            ra = data.content_radius[cand_a]
            rb = data.content_radius[cand_b]
            ok = (dist > ra + rb) & (ra <= mac_ratio * (dist - rb)) & (rb <= mac_ratio * (dist - ra))
        else:
            ok = np.zeros(0, dtype=bool)
        adm_a, adm_b = cand_a[ok], cand_b[ok]
        if adm_a.size:
            w = side / 2**lev
            offsets = (level_ijk[lev][adm_a] - level_ijk[lev][adm_b]) * w
            m2l_groups[lev] = group_by_displacement(offsets, adm_a, adm_b)
            n_m2l[lev] = adm_a.size
        bad_a, bad_b = cand_a[~ok], cand_b[~ok]
        if lev == depth:
            near_a_parts.append(bad_a)
            near_b_parts.append(bad_b)
            break
        next_a = []
        next_b = []
        kids = children[lev]
        for a, b in zip(bad_a, bad_b):
            ca, cb = kids[a], kids[b]
            next_a.append(np.repeat(ca, cb.size))
            next_b.append(np.tile(cb, ca.size))
        cand_a = np.concatenate(next_a) if next_a else np.zeros(0, dtype=np.int64)
        cand_b = np.concatenate(next_b) if next_b else np.zeros(0, dtype=np.int64)

    # near field: expand inadmissible leaf pairs into ordered sphere pairs
    spheres_in_leaf: list[np.ndarray] = []
    order_idx = np.argsort(leaf_row, kind="stable")
    bounds = np.searchsorted(leaf_row[order_idx], np.arange(level_data[depth].codes.size + 1))
    for i in range(level_data[depth].codes.size):
        spheres_in_leaf.append(order_idx[bounds[i] : bounds[i + 1]])
    pair_i: list[np.ndarray] = []
    pair_j: list[np.ndarray] = []
    for a, b in zip(np.concatenate(near_a_parts), np.concatenate(near_b_parts)):
        sa, sb = spheres_in_leaf[a], spheres_in_leaf[b]
        ii = np.repeat(sa, sb.size)
        jj = np.tile(sb, sa.size)
        if a == b:
            keep = ii != jj
            ii, jj = ii[keep], jj[keep]
        pair_i.append(ii)
        pair_j.append(jj)
    near_i = np.concatenate(pair_i) if pair_i else np.zeros(0, dtype=np.int64)
    near_j = np.concatenate(pair_j) if pair_j else np.zeros(0, dtype=np.int64)
    near_groups = group_by_displacement(centers[near_i] - centers[near_j], near_i, near_j)

    # sphere <-> leaf shifts
    leaf_centers = level_data[depth].centers
    sph_idx = np.arange(n, dtype=np.int64)
    lift_groups = group_by_displacement(leaf_centers[leaf_row] - centers, leaf_row, sph_idx)
    drop_groups = group_by_displacement(centers - leaf_centers[leaf_row], sph_idx, leaf_row)

    # parent <-> child shifts per level
    m2m_groups: list[list] = [[] for _ in range(depth + 1)]
    l2l_groups: list[list] = [[] for _ in range(depth + 1)]
    for lev in range(1, depth + 1):
        data = level_data[lev]
        rows = np.arange(data.codes.size, dtype=np.int64)
        up = level_data[lev - 1].centers[data.parent_row] - data.centers
        m2m_groups[lev] = group_by_displacement(up, data.parent_row, rows)
        l2l_groups[lev] = group_by_displacement(-up, rows, data.parent_row)

    stats = {
        "levels": depth,
        "boxes_per_level": [int(l.codes.size) for l in level_data],
        "m2l_pairs": [int(v) for v in n_m2l],
        "near_pairs": int(near_i.size),
    }
    return Octree(
        centers=centers,
        radii=radii,
        origin=origin,
        side=side,
        levels=depth,
        order=order,
        mac_ratio=float(mac_ratio),
        level_data=level_data,
        leaf_row=leaf_row,
        m2l_groups=m2l_groups,
        m2m_groups=m2m_groups,
        l2l_groups=l2l_groups,
        lift_groups=lift_groups,
        drop_groups=drop_groups,
        near_groups=near_groups,
        stats=stats,
    )


def tree_potential(tree: Octree, densities, target_degree: int) -> GlobalCoeffVector:
    """Bare-kernel local expansions of all cross-sphere surface potentials.

    ``densities`` holds per-sphere surface coefficient blocks (a
    GlobalCoeffVector or an (n, k) array).  Block ``i`` of the result holds
    the local expansion, about sphere i's center, of the potential generated
    by every other sphere's single-layer density, truncated at
    ``target_degree``.  Self-sphere contributions are excluded.
    """
    if isinstance(densities, GlobalCoeffVector):
        values = densities.values
        src_deg = densities.degree_max
    else:
        values = np.asarray(densities, dtype=np.float64)
        src_deg = int(math.isqrt(values.shape[1])) - 1
        if num_coeffs(src_deg) != values.shape[1]:
            raise SizeMismatch(f"density block size {values.shape[1]} is not a square")
    n = tree.n_spheres
    if values.shape[0] != n:
        raise SizeMismatch(f"expected {n} density blocks, got {values.shape[0]}")
    if src_deg > tree.order:
        raise DomainError(
            f"density degree {src_deg} exceeds the tree expansion order {tree.order}"
        )
    P = tree.order
    deg = degree_map(src_deg)
    sphere_mult = values * (4.0 * np.pi / (2 * deg + 1)) * tree.radii[:, None] ** (deg + 2.0)

    depth = tree.levels
    # upward pass: sphere multipoles to leaf boxes, then to coarser levels
    padded = np.zeros((n, num_coeffs(P)))
    padded[:, : values.shape[1]] = sphere_mult
    box_mult = [None] * (depth + 1)
    box_mult[depth] = apply_translation_groups(
        tree._matrix_cache, "ss", tree.lift_groups, padded, P, tree.level_data[depth].codes.size
    )
    for lev in range(depth, 0, -1):
        box_mult[lev - 1] = apply_translation_groups(
            tree._matrix_cache, "ss", tree.m2m_groups[lev], box_mult[lev], P, tree.level_data[lev - 1].codes.size
        )

    # interaction pass, then downward accumulation of box locals
    box_local = [None] * (depth + 1)
    for lev in range(depth + 1):
        box_local[lev] = apply_translation_groups(
            tree._matrix_cache, "sr", tree.m2l_groups[lev], box_mult[lev], P, tree.level_data[lev].codes.size
        )
        if lev > 0:
            apply_translation_groups(
                tree._matrix_cache,
                "rr",
                tree.l2l_groups[lev],
                box_local[lev - 1],
                P,
                tree.level_data[lev].codes.size,
                out=box_local[lev],
            )

    # box locals down to sphere centers, plus exact near-field translations
    out = apply_translation_groups(tree._matrix_cache, "rr", tree.drop_groups, box_local[depth], target_degree, n)
    apply_translation_groups(tree._matrix_cache, "sr", tree.near_groups, sphere_mult, target_degree, n, out=out)
    return GlobalCoeffVector(target_degree, out)

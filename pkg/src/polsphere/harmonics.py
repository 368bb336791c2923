"""Real spherical harmonics, spherical quadrature, and surface transforms.

Conventions used throughout the package:

* Real orthonormal spherical harmonics without the Condon-Shortley phase:

  - ``Y_l^0  = N_l0 P_l(cos th)``
  - ``Y_l^m  = sqrt(2) N_lm P_l^m(cos th) cos(m ph)`` for ``m > 0``
  - ``Y_l^-m = sqrt(2) N_lm P_l^m(cos th) sin(m ph)`` for ``m > 0``

  with ``N_lm = sqrt((2l+1)(l-m)! / (4 pi (l+m)!))`` and ``P_l^m`` the
  associated Legendre function with positive sign convention.

* Coefficients of degree ``l`` and order ``m`` live at flat index
  ``l*l + l + m``; a truncation at ``degree_max`` holds ``(degree_max+1)**2``
  coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "DomainError",
    "SizeMismatch",
    "num_coeffs",
    "flat_index",
    "degree_map",
    "order_map",
    "eval_real_sh",
    "sh_basis",
    "QuadratureGrid",
    "build_grid",
    "SurfaceCoeffs",
    "GlobalCoeffVector",
    "analyze",
    "synthesize",
    "GradientTable",
    "build_gradient_table",
]


class DomainError(ValueError):
    """Raised for out-of-domain harmonic indices or non-unit directions."""


class SizeMismatch(ValueError):
    """Raised when array shapes disagree with the declared truncation."""


def num_coeffs(degree_max: int) -> int:
    """Number of real harmonic coefficients for degrees ``0..degree_max``."""
    return (degree_max + 1) ** 2


def flat_index(l: int, m: int) -> int:
    """Flat coefficient index of the pair ``(l, m)``."""
    return l * l + l + m


@lru_cache(maxsize=None)
def degree_map(degree_max: int) -> np.ndarray:
    """Array giving the degree ``l`` of every flat coefficient index."""
    out = np.empty(num_coeffs(degree_max), dtype=np.int64)
    for l in range(degree_max + 1):
        out[l * l : (l + 1) ** 2] = l
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def order_map(degree_max: int) -> np.ndarray:
    """Array giving the order ``m`` of every flat coefficient index."""
    out = np.empty(num_coeffs(degree_max), dtype=np.int64)
    for l in range(degree_max + 1):
        out[l * l : (l + 1) ** 2] = np.arange(-l, l + 1)
    out.flags.writeable = False
    return out


def _check_directions(dirs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise DomainError(f"directions must have shape (n, 3), got {dirs.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", dirs, dirs))
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise DomainError(f"directions deviate from unit length by {worst:.3e}")
    return dirs / norms[:, None]


def sh_basis(dirs: np.ndarray, degree_max: int) -> np.ndarray:
    """Evaluate all real harmonics up to ``degree_max`` at unit directions.

    Parameters
    ----------
    dirs : (n, 3) array of unit vectors.
    degree_max : highest degree to evaluate.

    Returns
    -------
    (n, (degree_max+1)**2) array; column ``l*l+l+m`` holds ``Y_l^m``.

    Uses the standard normalized upward recurrences, stable for the degree
    range handled here (well beyond 64).
    """
    if degree_max < 0:
        raise DomainError("degree_max must be >= 0")
    dirs = _check_directions(dirs)
    n = dirs.shape[0]
    L = degree_max
    ct = dirs[:, 2]
    st = np.hypot(dirs[:, 0], dirs[:, 1])
    safe = st > 0
    cphi = np.where(safe, dirs[:, 0], 1.0) / np.where(safe, st, 1.0)
    sphi = np.where(safe, dirs[:, 1], 0.0) / np.where(safe, st, 1.0)

    out = np.empty((n, num_coeffs(L)))
    # cos(m phi), sin(m phi) by angle-addition recurrence
    cosm = np.empty((L + 1, n))
    sinm = np.empty((L + 1, n))
    cosm[0] = 1.0
    sinm[0] = 0.0
    for m in range(1, L + 1):
        cosm[m] = cosm[m - 1] * cphi - sinm[m - 1] * sphi
        sinm[m] = sinm[m - 1] * cphi + cosm[m - 1] * sphi

    sqrt2 = np.sqrt(2.0)
    sect = np.full(n, 1.0 / np.sqrt(4.0 * np.pi))  # S_mm as m climbs
    for m in range(L + 1):
        if m > 0:
            sect = sect * st * np.sqrt((2 * m + 1) / (2.0 * m))
        if m == 0:
            out[:, flat_index(m, 0)] = sect
        else:
            out[:, flat_index(m, m)] = sqrt2 * sect * cosm[m]
            out[:, flat_index(m, -m)] = sqrt2 * sect * sinm[m]
        prev = np.zeros(n)
        cur = sect
        for l in range(m + 1, L + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            prev, cur = cur, a * (ct * cur - b * prev)
            if m == 0:
                out[:, flat_index(l, 0)] = cur
            else:
                out[:, flat_index(l, m)] = sqrt2 * cur * cosm[m]
                out[:, flat_index(l, -m)] = sqrt2 * cur * sinm[m]
    return out


def eval_real_sh(l: int, m: int, direction: np.ndarray) -> float:
    """Evaluate a single real harmonic ``Y_l^m`` at one unit direction."""
    if l < 0 or abs(m) > l:
        raise DomainError(f"invalid harmonic indices (l={l}, m={m})")
    row = sh_basis(np.asarray(direction, dtype=np.float64).reshape(1, 3), l)
    return float(row[0, flat_index(l, m)])


class QuadratureGrid:
    """Tensor quadrature on the unit sphere with stated polynomial exactness.

    Gauss-Legendre nodes in ``cos(theta)`` crossed with a uniform azimuthal
    rule; exact for spherical polynomials up to ``exactness_degree``.
    """

    def __init__(self, nodes: np.ndarray, weights: np.ndarray, exactness_degree: int):
        self.nodes = nodes
        self.weights = weights
        self.exactness_degree = exactness_degree
        self.nodes.flags.writeable = False
        self.weights.flags.writeable = False
        self._basis_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def basis(self, degree_max: int) -> np.ndarray:
        """Cached matrix of harmonic values at the grid nodes."""
        hit = self._basis_cache.get(degree_max)
        if hit is None:
            hit = sh_basis(self.nodes, degree_max)
            hit.flags.writeable = False
            self._basis_cache[degree_max] = hit
        return hit


def build_grid(exactness_degree: int) -> QuadratureGrid:
    """Build the tensor Gauss-Legendre/azimuth grid of a given exactness."""
    if exactness_degree < 0:
        raise DomainError("exactness_degree must be >= 0")
    n_polar = (exactness_degree + 2) // 2
    n_polar = max(n_polar, 1)
    n_az = exactness_degree + 1
    x, w = np.polynomial.legendre.leggauss(n_polar)
    phi = 2.0 * np.pi * np.arange(n_az) / n_az
    st = np.sqrt(1.0 - x * x)
    nodes = np.empty((n_polar * n_az, 3))
    nodes[:, 0] = np.outer(st, np.cos(phi)).ravel()
    nodes[:, 1] = np.outer(st, np.sin(phi)).ravel()
    nodes[:, 2] = np.repeat(x, n_az)
    weights = np.repeat(w * (2.0 * np.pi / n_az), n_az)
    total = float(weights.sum())
    if abs(total - 4.0 * np.pi) > 1e-12 * 4.0 * np.pi:
        raise RuntimeError(f"grid weights sum to {total!r}, expected 4*pi")
    return QuadratureGrid(nodes, weights, exactness_degree)


@dataclass(frozen=True)
class SurfaceCoeffs:
    """Real harmonic coefficients of a scalar field on one sphere surface."""

    degree_max: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (num_coeffs(self.degree_max),):
            raise SizeMismatch(
                f"expected {num_coeffs(self.degree_max)} coefficients for "
                f"degree_max={self.degree_max}, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def coeff(self, l: int, m: int) -> float:
        if l < 0 or l > self.degree_max or abs(m) > l:
            raise DomainError(f"(l={l}, m={m}) outside truncation {self.degree_max}")
        return float(self.values[flat_index(l, m)])

    def truncated(self, degree_max: int) -> "SurfaceCoeffs":
        """Copy truncated or zero-padded to another maximum degree."""
        k = num_coeffs(degree_max)
        out = np.zeros(k)
        take = min(k, self.values.size)
        out[:take] = self.values[:take]
        return SurfaceCoeffs(degree_max, out)


@dataclass(frozen=True)
class GlobalCoeffVector:
    """Stacked per-sphere coefficient blocks at a common truncation degree.

    ``values[i]`` is the coefficient block of sphere ``i``.
    """

    degree_max: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != num_coeffs(self.degree_max):
            raise SizeMismatch(
                f"expected (n, {num_coeffs(self.degree_max)}) for "
                f"degree_max={self.degree_max}, got {values.shape}"
            )
        object.__setattr__(self, "values", values)

    @property
    def n_spheres(self) -> int:
        return self.values.shape[0]

    def block(self, i: int) -> SurfaceCoeffs:
        return SurfaceCoeffs(self.degree_max, self.values[i].copy())

    def truncated(self, degree_max: int) -> "GlobalCoeffVector":
        k = num_coeffs(degree_max)
        out = np.zeros((self.n_spheres, k))
        take = min(k, self.values.shape[1])
        out[:, :take] = self.values[:, :take]
        return GlobalCoeffVector(degree_max, out)

    @staticmethod
    def zeros(n_spheres: int, degree_max: int) -> "GlobalCoeffVector":
        return GlobalCoeffVector(degree_max, np.zeros((n_spheres, num_coeffs(degree_max))))


def analyze(samples: np.ndarray, grid: QuadratureGrid, degree_max: int) -> SurfaceCoeffs:
    """Project point samples at the grid nodes onto harmonic coefficients.

    Exact for band-limited inputs when the grid exactness is at least
    ``2 * degree_max``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape != (len(grid),):
        raise SizeMismatch(
            f"expected {len(grid)} samples for this grid, got {samples.shape}"
        )
    coeffs = grid.basis(degree_max).T @ (grid.weights * samples)
    return SurfaceCoeffs(degree_max, coeffs)


def synthesize(coeffs: SurfaceCoeffs, dirs: np.ndarray) -> np.ndarray:
    """Evaluate a coefficient representation at unit directions."""
    return sh_basis(dirs, coeffs.degree_max) @ coeffs.values


class GradientTable:
    """Exact Cartesian gradients of regular solid harmonics.

    For ``R_l^m(x) = |x|^l Y_l^m(x/|x|)`` the derivative ``d R_l^m / d x_a``
    is a regular solid harmonic of degree ``l - 1``; the table stores its
    coefficients.  Entries are obtained from the identity

        coeff[(l-1, m'), (l, m)] = (2l+1) * int_{S^2} Y_{l-1}^{m'} n_a Y_l^m

    which follows from the divergence theorem on the unit ball and needs no
    numerical differentiation.
    """

    def __init__(self, degree_max: int, matrices: tuple[np.ndarray, np.ndarray, np.ndarray]):
        self.degree_max = degree_max
        self.matrices = matrices
        for mat in matrices:
            mat.flags.writeable = False

    def entries(self, l: int, m: int, axis: int) -> list[tuple[int, float]]:
        """Sparse coefficients of ``d R_l^m / d x_axis`` at degree ``l - 1``."""
        if l < 1 or l > self.degree_max or abs(m) > l:
            raise DomainError(f"(l={l}, m={m}) outside table range {self.degree_max}")
        col = self.matrices[axis][:, flat_index(l, m)]
        lo, hi = (l - 1) ** 2, l * l
        out = []
        for idx in range(lo, hi):
            c = col[idx]
            if abs(c) > 1e-12:
                out.append((int(idx - lo - (l - 1)), float(c)))
        return out

    def apply(self, values: np.ndarray, axis: int) -> np.ndarray:
        """Map regular coefficients of degree <= L to their gradient, degree <= L-1."""
        return np.asarray(values) @ self.matrices[axis].T


def build_gradient_table(degree_max: int) -> GradientTable:
    if degree_max < 1:
        raise DomainError("degree_max must be >= 1")
    grid = build_grid(2 * degree_max)
    basis = grid.basis(degree_max)
    k_out = num_coeffs(degree_max - 1)
    k_in = num_coeffs(degree_max)
    mats = []
    for axis in range(3):
        weighted = basis * (grid.weights * grid.nodes[:, axis])[:, None]
        full = basis.T @ weighted  # inner products <Y_i, n_axis Y_j>
        g = np.zeros((k_out, k_in))
        for l in range(1, degree_max + 1):
            rows = slice((l - 1) ** 2, l * l)
            cols = slice(l * l, (l + 1) ** 2)
            g[rows, cols] = (2 * l + 1) * full[rows, cols]
        mats.append(g)
    return GradientTable(degree_max, tuple(mats))

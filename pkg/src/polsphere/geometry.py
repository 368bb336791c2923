"""Sphere system definitions, validation, and benchmark lattice generators.

A system is a collection of non-overlapping dielectric spheres embedded in a
uniform background medium.  Each sphere carries a center, a radius, a
dielectric constant, and a free surface charge given either as a total charge
(spread uniformly) or as an explicit coefficient expansion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .harmonics import GlobalCoeffVector, SurfaceCoeffs, num_coeffs


class OverlapError(ValueError):
    """Two spheres touch or overlap."""

    def __init__(self, i: int, j: int, separation: float):
        self.i = i
        self.j = j
        self.separation = separation
        super().__init__(
            f"spheres {i} and {j} overlap (surface separation {separation:.6g} <= 0)"
        )


class NonPositiveParameter(ValueError):
    """A radius or dielectric constant is zero or negative."""


@dataclass(frozen=True)
class SphereSpec:
    """One dielectric sphere.

    ``free_charge`` is either a scalar total charge, stored as a uniform
    surface density, or a SurfaceCoeffs giving the density expansion
    directly.  Positivity of ``radius`` and ``kappa`` is checked by
    ``validate``, not at construction, so malformed inputs can be loaded and
    then rejected with a proper report.
    """

    center: np.ndarray
    radius: float
    kappa: float
    free_charge: float | SurfaceCoeffs = 0.0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        center.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "kappa", float(self.kappa))
        if not isinstance(self.free_charge, SurfaceCoeffs):
            object.__setattr__(self, "free_charge", float(self.free_charge))

    def charge_density(self, degree_max: int) -> SurfaceCoeffs:
        """Free-charge surface density as coefficients up to ``degree_max``.

        A scalar total charge q becomes the uniform density with degree-0
        coefficient q / (sqrt(4 pi) r^2); explicit coefficients are truncated
        or zero-padded to the requested degree.
        """
        values = np.zeros(num_coeffs(degree_max))
        if isinstance(self.free_charge, SurfaceCoeffs):
            k = min(values.size, self.free_charge.values.size)
            values[:k] = self.free_charge.values[:k]
        else:
            values[0] = self.free_charge / (math.sqrt(4.0 * math.pi) * self.radius**2)
        return SurfaceCoeffs(degree_max, values)

    def total_free_charge(self) -> float:
        if isinstance(self.free_charge, SurfaceCoeffs):
            return float(self.free_charge.values[0]) * math.sqrt(4.0 * math.pi) * self.radius**2
        return self.free_charge


@dataclass(frozen=True)
class SphereSystem:
    """An ordered collection of spheres in a background of constant kappa0."""

    spheres: tuple[SphereSpec, ...]
    kappa0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "spheres", tuple(self.spheres))
        object.__setattr__(self, "kappa0", float(self.kappa0))

    @property
    def n_spheres(self) -> int:
        return len(self.spheres)

    @property
    def centers(self) -> np.ndarray:
        return np.array([s.center for s in self.spheres])

    @property
    def radii(self) -> np.ndarray:
        return np.array([s.radius for s in self.spheres])

    @property
    def kappas(self) -> np.ndarray:
        return np.array([s.kappa for s in self.spheres])

    def with_center(self, i: int, center: np.ndarray) -> "SphereSystem":
        """Copy of the system with sphere ``i`` moved to ``center``."""
        spheres = list(self.spheres)
        s = spheres[i]
        spheres[i] = SphereSpec(center, s.radius, s.kappa, s.free_charge)
        return SphereSystem(tuple(spheres), self.kappa0)


@dataclass(frozen=True)
class ValidationReport:
    min_separation: float
    min_radius: float
    max_radius: float
    kappa_range: tuple[float, float]
    warnings: tuple[str, ...]


def validate(system: SphereSystem) -> ValidationReport:
    """Check a system against the geometric assumptions and summarize it.

    Raises OverlapError for any touching or overlapping pair and
    NonPositiveParameter for non-positive radii or dielectric constants.
    Spheres with kappa equal to the background value only generate a warning;
    they are harmless (their equation block reduces to the identity).
    """
    if system.n_spheres == 0:
        raise NonPositiveParameter("system has no spheres")
    if system.kappa0 <= 0:
        raise NonPositiveParameter(f"kappa0 = {system.kappa0} must be positive")
    for i, s in enumerate(system.spheres):
        if s.radius <= 0:
            raise NonPositiveParameter(f"sphere {i} has radius {s.radius}")
        if s.kappa <= 0:
            raise NonPositiveParameter(f"sphere {i} has kappa {s.kappa}")

    centers = system.centers
    radii = system.radii
    n = system.n_spheres
    min_sep = math.inf
    if n > 1:
        for i in range(n - 1):
            d = np.linalg.norm(centers[i + 1 :] - centers[i], axis=1)
            sep = d - radii[i + 1 :] - radii[i]
            j_rel = int(np.argmin(sep))
            if sep[j_rel] <= 0:
                raise OverlapError(i, i + 1 + j_rel, float(sep[j_rel]))
            min_sep = min(min_sep, float(sep[j_rel]))

    warnings = tuple(
        f"sphere {i} has kappa equal to the background kappa0 = {system.kappa0}"
        for i, s in enumerate(system.spheres)
        if s.kappa == system.kappa0
    )
    kappas = system.kappas
    return ValidationReport(
        min_separation=min_sep,
        min_radius=float(radii.min()),
        max_radius=float(radii.max()),
        kappa_range=(float(kappas.min()), float(kappas.max())),
        warnings=warnings,
    )


_EVEN_SITE = dict(radius=3.0, kappa=10.0, charge=-1.0)
_ODD_SITE = dict(radius=2.0, kappa=5.0, charge=1.0)


def _lattice(n_per_axis: int, edge: float, parity) -> SphereSystem:
    if n_per_axis < 1:
        raise NonPositiveParameter("n_per_axis must be >= 1")
    spheres = []
    for i in range(n_per_axis):
        for j in range(n_per_axis):
            for k in range(n_per_axis):
                site = _EVEN_SITE if parity(i, j, k) == 0 else _ODD_SITE
                spheres.append(
                    SphereSpec(
                        center=np.array([i, j, k], dtype=np.float64) * edge,
                        radius=site["radius"],
                        kappa=site["kappa"],
                        free_charge=site["charge"],
                    )
                )
    return SphereSystem(tuple(spheres), kappa0=1.0)


def make_alternating_lattice(n_per_axis: int, edge: float = 6.0) -> SphereSystem:
    """Cubic lattice with checkerboard alternation of the two sphere types.

    Even-parity sites (i+j+k even) get radius 3, kappa 10, total charge -1;
    odd sites get radius 2, kappa 5, total charge +1.  Background kappa0 = 1.
    """
    return _lattice(n_per_axis, edge, lambda i, j, k: (i + j + k) % 2)


def make_layered_lattice(n_per_axis: int, edge: float = 7.0) -> SphereSystem:
    """Cubic lattice alternating the two sphere types by layer (k index)."""
    return _lattice(n_per_axis, edge, lambda i, j, k: k % 2)


def free_charge_vector(system: SphereSystem, degree_max: int) -> GlobalCoeffVector:
    """Stack every sphere's free-charge density into one coefficient vector."""
    values = np.stack(
        [s.charge_density(degree_max).values for s in system.spheres]
    )
    return GlobalCoeffVector(degree_max, values)


def save_system(system: SphereSystem, path) -> None:
    """Write a system to JSON; floats round-trip exactly."""
    spheres = []
    for s in system.spheres:
        entry = {
            "center": [float(c) for c in s.center],
            "radius": s.radius,
            "kappa": s.kappa,
        }
        if isinstance(s.free_charge, SurfaceCoeffs):
            entry["coeffs"] = [float(v) for v in s.free_charge.values]
        else:
            entry["charge"] = s.free_charge
        spheres.append(entry)
    doc = {"kappa0": system.kappa0, "spheres": spheres}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_system(path) -> SphereSystem:
    """Read a system written by ``save_system`` (or built by hand)."""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    spheres = []
    for entry in doc["spheres"]:
        if "coeffs" in entry:
            vals = np.asarray(entry["coeffs"], dtype=np.float64)
            deg = int(math.isqrt(vals.size)) - 1
            charge = SurfaceCoeffs(deg, vals)
        else:
            charge = float(entry.get("charge", 0.0))
        spheres.append(
            SphereSpec(
                center=np.asarray(entry["center"], dtype=np.float64),
                radius=float(entry["radius"]),
                kappa=float(entry["kappa"]),
                free_charge=charge,
            )
        )
    return SphereSystem(tuple(spheres), kappa0=float(doc["kappa0"]))

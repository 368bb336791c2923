"""Full (non-restarted) GMRES and the induced-surface-charge solve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .harmonics import DomainError, GlobalCoeffVector
from .operators import OperatorContext, apply_system, rhs_from_free_charge


@dataclass(frozen=True)
class SolveSettings:
    tolerance: float = 1e-8
    max_iterations: int = 400

    def __post_init__(self):
        if self.tolerance <= 0:
            raise DomainError("tolerance must be positive")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")


@dataclass(frozen=True)
class SolveReport:
    nu: GlobalCoeffVector
    iterations: int
    residual_history: tuple[float, ...]
    converged: bool


def gmres(apply, rhs: GlobalCoeffVector, settings: SolveSettings | None = None) -> SolveReport:
    """Minimal-residual Krylov solve in the Euclidean coefficient norm.

    Full GMRES with a zero initial guess: modified Gram-Schmidt Arnoldi with
    one conditional reorthogonalization pass, Givens rotations for the
    running residual, no restarts.  A happy breakdown (the Krylov space
    becomes invariant) yields the exact solution of the projected system and
    terminates early.  Deterministic: identical inputs produce identical
    residual histories.
    """
    if settings is None:
        settings = SolveSettings()
    n_spheres = rhs.n_spheres
    degree = rhs.degree_max
    shape = rhs.values.shape
    b = rhs.values.ravel()
    beta = float(np.linalg.norm(b))
    if beta == 0.0:
        return SolveReport(GlobalCoeffVector.zeros(n_spheres, degree), 0, (0.0,), True)

    max_it = min(settings.max_iterations, b.size)
    V = [b / beta]
    H = np.zeros((max_it + 1, max_it))
    cs = np.zeros(max_it)
    sn = np.zeros(max_it)
    g = np.zeros(max_it + 1)
    g[0] = beta
    history = [1.0]
    k_done = 0
    converged = False

    for k in range(max_it):
        w = apply(GlobalCoeffVector(degree, V[k].reshape(shape))).values.ravel().copy()
        norm_before = float(np.linalg.norm(w))
        for i in range(k + 1):
            h = float(V[i] @ w)
            w -= h * V[i]
            H[i, k] += h
        if float(np.linalg.norm(w)) < 0.5 * norm_before:
            # severe cancellation: one extra orthogonalization pass
            for i in range(k + 1):
                c = float(V[i] @ w)
                w -= c * V[i]
                H[i, k] += c
        h_next = float(np.linalg.norm(w))
        H[k + 1, k] = h_next

        # fold the new column through the accumulated Givens rotations
        for i in range(k):
            t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
            H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
            H[i, k] = t
        denom = float(np.hypot(H[k, k], H[k + 1, k]))
        if denom == 0.0:
            cs[k], sn[k] = 1.0, 0.0
        else:
            cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
        H[k, k] = denom
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]

        k_done = k + 1
        rel = abs(g[k + 1]) / beta
        history.append(rel)
        if rel <= settings.tolerance:
            converged = True
            break
        if h_next <= 1e-14 * max(norm_before, beta):
            # invariant Krylov space: the projected solve is exact
            converged = True
            break
        V.append(w / h_next)

    y = np.zeros(k_done)
    for i in range(k_done - 1, -1, -1):
        y[i] = (g[i] - H[i, i + 1 : k_done] @ y[i + 1 : k_done]) / H[i, i]
    x = np.zeros_like(b)
    for i in range(k_done):
        x += y[i] * V[i]
    return SolveReport(
        nu=GlobalCoeffVector(degree, x.reshape(shape)),
        iterations=k_done,
        residual_history=tuple(history),
        converged=converged,
    )


def solve_induced_charge(
    ctx: OperatorContext, sigma_f: GlobalCoeffVector, settings: SolveSettings | None = None
) -> SolveReport:
    """Solve the discrete integral equation for the induced surface charge."""
    rhs = rhs_from_free_charge(ctx, sigma_f)
    return gmres(lambda v: apply_system(ctx, v), rhs, settings)

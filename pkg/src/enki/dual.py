"""Single-assimilation solvers: the MAP point by primal and dual routes,
the sample-average (SAA) dual solution, and the EnKF particle update.

For the linear-Gaussian problem

    min_u  1/2 ||d - A u||^2_{Sigma^-1} + 1/2 ||u - u0||^2_{C^-1}

the dual variable solves ``(Sigma + A C A^T) lam = A u0 - d`` and the MAP
point is recovered as ``u0 - C A^T lam``. Replacing ``C`` by ``Omega Omega^T``
built from perturbation draws gives the EnKF update. Every
``(Sigma + A S A^T)^{-1}`` application goes through a Cholesky factorisation
of the ``m x m`` matrix; nothing is inverted explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .core import _frozen, psd_sqrt


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LinearProblem:
    A: np.ndarray
    u0: np.ndarray
    C: np.ndarray
    Sigma: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        m, n = A.shape
        u0 = np.atleast_1d(np.asarray(self.u0, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if u0.shape != (n,) or C.shape != (n, n):
            raise ValueError(f"prior dimensions {u0.shape}, {C.shape} inconsistent with A {A.shape}")
        if Sigma.shape != (m, m) or d.shape != (m,):
            raise ValueError(f"noise/data dimensions {Sigma.shape}, {d.shape} inconsistent with A {A.shape}")
        try:
            linalg.cholesky(Sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("noise covariance Sigma is not SPD") from exc
        for name, val in (("A", A), ("u0", u0), ("C", C), ("Sigma", Sigma), ("d", d)):
            object.__setattr__(self, name, _frozen(val))

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def B(self) -> np.ndarray:
        """The dual Hessian ``Sigma + A C A^T``."""
        B = self.Sigma + self.A @ self.C @ self.A.T
        return 0.5 * (B + B.T)


@dataclass(frozen=True)
class PerturbationDraw:
    """Prior perturbations ``delta^(i) ~ N(0, C)`` (``n x N``) and data
    perturbations ``sigma^(i) ~ N(0, Sigma)`` (``m x N``)."""

    deltas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        deltas = np.atleast_2d(np.asarray(self.deltas, dtype=float))
        sigmas = np.atleast_2d(np.asarray(self.sigmas, dtype=float))
        if deltas.shape[1] != sigmas.shape[1]:
            raise ValueError("deltas and sigmas must have the same number of columns")
        object.__setattr__(self, "deltas", _frozen(deltas))
        object.__setattr__(self, "sigmas", _frozen(sigmas))

    @property
    def N(self) -> int:
        return self.deltas.shape[1]

    @property
    def Omega(self) -> np.ndarray:
        return self.deltas / np.sqrt(self.N)

    @property
    def delta_bar(self) -> np.ndarray:
        return self.deltas.mean(axis=1)

    @property
    def sigma_bar(self) -> np.ndarray:
        return self.sigmas.mean(axis=1)


def draw_perturbations(p: LinearProblem, N: int, rng: np.random.Generator,
                       C_sqrt: np.ndarray | None = None,
                       Sigma_chol: np.ndarray | None = None) -> PerturbationDraw:
    """Sample an i.i.d. perturbation draw of size ``N``.

    ``C_sqrt`` and ``Sigma_chol`` may be passed in to avoid refactorising
    in Monte-Carlo loops.
    """
    if C_sqrt is None:
        C_sqrt = psd_sqrt(p.C)
    if Sigma_chol is None:
        Sigma_chol = linalg.cholesky(p.Sigma, lower=True)
    deltas = C_sqrt @ rng.standard_normal((p.n, N))
    sigmas = Sigma_chol @ rng.standard_normal((p.m, N))
    return PerturbationDraw(deltas, sigmas)


def exact_draw(p: LinearProblem, N: int, rng: np.random.Generator | None = None) -> PerturbationDraw:
    """A draw with ``Omega Omega^T = C`` and zero means, for testing.

    Builds ``Omega = C^{1/2} Q`` with ``Q`` (``n x N``) having orthonormal rows
    that are also orthogonal to the ones vector, so ``delta_bar = 0``. Needs
    ``N >= n + 1``. Data perturbations are zero.
    """
    n = p.n
    if N < n + 1:
        raise ValueError(f"an exact draw needs N >= n + 1 = {n + 1}, got {N}")
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.column_stack([np.ones(N), rng.standard_normal((N, n))])
    Qfull, _ = np.linalg.qr(X)
    Q = Qfull[:, 1:n + 1].T
    Omega = psd_sqrt(p.C) @ Q
    return PerturbationDraw(np.sqrt(N) * Omega, np.zeros((p.m, N)))


def _cho(M: np.ndarray, what: str):
    try:
        return linalg.cho_factor(0.5 * (M + M.T), lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        cond = np.linalg.cond(M)
        raise np.linalg.LinAlgError(
            f"Cholesky of {what} failed (condition estimate {cond:.3e})") from exc


def solve_map_primal(p: LinearProblem) -> np.ndarray:
    """``(A^T Sigma^-1 A + C^-1)^-1 (A^T Sigma^-1 d + C^-1 u0)``; needs invertible ``C``."""
    try:
        Cf = linalg.cho_factor(p.C, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            "prior covariance C is singular; use solve_map_dual instead") from exc
    Sf = _cho(p.Sigma, "Sigma")
    Cinv = linalg.cho_solve(Cf, np.eye(p.n))
    H = p.A.T @ linalg.cho_solve(Sf, p.A) + Cinv
    rhs = p.A.T @ linalg.cho_solve(Sf, p.d) + linalg.cho_solve(Cf, p.u0)
    return linalg.cho_solve(_cho(H, "the primal Hessian"), rhs)


def solve_dual_lambda(p: LinearProblem) -> np.ndarray:
    """Maximiser of the dual function: ``(Sigma + A C A^T)^-1 (A u0 - d)``."""
    return linalg.cho_solve(_cho(p.B, "Sigma + A C A^T"), p.A @ p.u0 - p.d)


def map_from_dual(p: LinearProblem, lam: np.ndarray) -> np.ndarray:
    return p.u0 - p.C @ (p.A.T @ lam)


def solve_map_dual(p: LinearProblem) -> np.ndarray:
    return map_from_dual(p, solve_dual_lambda(p))


def kkt_residuals(p: LinearProblem, lam: np.ndarray) -> tuple[float, float, float]:
    """Relative residuals of the three KKT conditions at the dual point ``lam``.

    With ``u = u0 - C A^T lam`` and ``v = d + Sigma lam`` these are the
    stationarity in ``u`` (checked through ``C^{-1}(u - u0) + A^T lam = 0``
    rewritten without ``C^{-1}``), stationarity in ``v``, and primal
    feasibility ``A u = v``.
    """
    u = map_from_dual(p, lam)
    v = p.d + p.Sigma @ lam
    scale_u = max(np.linalg.norm(u), np.linalg.norm(p.u0), 1e-300)
    scale_v = max(np.linalg.norm(v), 1e-300)
    r_u = np.linalg.norm(u - p.u0 + p.C @ p.A.T @ lam) / scale_u
    r_v = np.linalg.norm(linalg.solve(p.Sigma, v - p.d, assume_a="pos") - lam) / max(np.linalg.norm(lam), 1e-300)
    r_feas = np.linalg.norm(p.A @ u - v) / scale_v
    return r_u, r_v, r_feas


def saa_dual_solve(p: LinearProblem, draw: PerturbationDraw) -> np.ndarray:
    """SAA dual solution ``(Sigma + A Omega Omega^T A^T)^-1 (A(u0 + delta_bar) - (d + sigma_bar))``."""
    AO = p.A @ draw.Omega
    M = p.Sigma + AO @ AO.T
    rhs = p.A @ (p.u0 + draw.delta_bar) - (p.d + draw.sigma_bar)
    return linalg.cho_solve(_cho(M, "Sigma + A Omega Omega^T A^T"), rhs)


def induced_primal_saa(p: LinearProblem, lam_bar: np.ndarray) -> np.ndarray:
    """Primal point induced by the SAA dual solution, using the true ``C``."""
    return map_from_dual(p, lam_bar)


class EnkfResult(NamedTuple):
    particles: np.ndarray
    mean: np.ndarray


def enkf_update(p: LinearProblem, draw: PerturbationDraw) -> EnkfResult:
    """Perturbed-observation EnKF analysis of the prior ``u0 + delta^(i)``.

    ``u^(i) = u0 + delta^(i) + Omega (A Omega)^T (Sigma + A Omega (A Omega)^T)^-1
    (d + sigma^(i) - A (u0 + delta^(i)))``; one factorisation is shared by all
    particles.
    """
    Omega = draw.Omega
    AO = p.A @ Omega
    fac = _cho(p.Sigma + AO @ AO.T, "Sigma + A Omega Omega^T A^T")
    prior = p.u0[:, None] + draw.deltas
    innov = p.d[:, None] + draw.sigmas - p.A @ prior
    particles = prior + Omega @ (AO.T @ linalg.cho_solve(fac, innov))
    return EnkfResult(particles, particles.mean(axis=1))

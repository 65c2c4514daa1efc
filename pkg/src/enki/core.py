"""Shared dense linear-algebra data model.

Ensembles are stored as ``n x N`` arrays, one particle per column. Sample
covariances use the ``1/N`` normalisation throughout the package (not the
unbiased ``1/(N-1)`` form found in many EnKF references), and are carried
around as a deviation factor ``D = (U - mean) / sqrt(N)`` so that products
like ``C A^T`` never form an ``n x n`` matrix when ``N < n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np


class ForwardMapError(RuntimeError):
    """A forward map failed on one particle of an ensemble."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"forward map failed on particle {index}: {cause}")
        self.index = index
        self.cause = cause


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def psd_sqrt(C: np.ndarray) -> np.ndarray:
    """Symmetric principal square root; negative eigenvalues are clamped to 0."""
    C = np.asarray(C, dtype=float)
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class Ensemble:
    """Particle collection ``u_k = [u^(1), ..., u^(N)]`` stored column-wise."""

    particles: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.particles, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if U.ndim != 2 or U.shape[0] == 0:
            raise ValueError(f"particles must be a non-empty n x N matrix, got {U.shape}")
        if U.shape[1] == 0:
            raise ValueError("empty ensemble")
        if not np.all(np.isfinite(U)):
            raise ValueError("ensemble contains non-finite entries")
        object.__setattr__(self, "particles", _frozen(U))

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def N(self) -> int:
        return self.particles.shape[1]

    def mean(self) -> np.ndarray:
        return sample_mean(self)

    def deviation_factor(self) -> np.ndarray:
        return deviation_factor(self)

    def covariance(self) -> np.ndarray:
        return sample_covariance(self)


def sample_mean(e: Ensemble) -> np.ndarray:
    if e.N < 1:
        raise ValueError("empty ensemble")
    return e.particles.mean(axis=1)


def deviation_factor(e: Ensemble) -> np.ndarray:
    """Return ``D = (U - mean) / sqrt(N)`` so that the sample covariance is ``D D^T``."""
    U = e.particles
    return (U - sample_mean(e)[:, None]) / np.sqrt(e.N)


def sample_covariance(e: Ensemble) -> np.ndarray:
    """``(1/N) sum_i (u_i - mean)(u_i - mean)^T``, symmetrised."""
    D = deviation_factor(e)
    C = D @ D.T
    return 0.5 * (C + C.T)


@dataclass(frozen=True)
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray
    cov_factor: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {n}")
        scale = max(np.abs(cov).max(), np.finfo(float).tiny)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10 * np.linalg.norm(cov, 2):
            raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))
        if self.cov_factor is None:
            object.__setattr__(self, "cov_factor", _frozen(psd_sqrt(cov)))
        else:
            F = np.atleast_2d(np.asarray(self.cov_factor, dtype=float))
            if F.shape[0] != n:
                raise ValueError("covariance factor has the wrong number of rows")
            object.__setattr__(self, "cov_factor", _frozen(F))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` samples as columns of an ``n x size`` matrix."""
        F = self.cov_factor
        z = rng.standard_normal((F.shape[1], size))
        return self.mean[:, None] + F @ z


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic observation noise ``Sigma_h = mu * I``."""

    mu: float
    m: int

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"noise variance mu must be positive, got {self.mu}")
        if self.m < 1:
            raise ValueError("observation dimension must be >= 1")

    @property
    def cov(self) -> np.ndarray:
        return self.mu * np.eye(self.m)


@dataclass(frozen=True)
class Observation:
    d: np.ndarray
    truth: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "d", _frozen(np.atleast_1d(self.d)))
        if self.truth is not None:
            object.__setattr__(self, "truth", _frozen(np.atleast_1d(self.truth)))

    @property
    def m(self) -> int:
        return self.d.shape[0]


class ForwardOperator:
    """Map ``u -> G(u)`` from R^n to R^m.

    Subclasses implement :meth:`apply`; :meth:`apply_ensemble` maps every
    column of an ``n x N`` matrix and may be overridden with a batched version.
    """

    n: int
    m: int
    linear: bool = False

    def apply(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_ensemble(self, U: np.ndarray) -> np.ndarray:
        out = np.empty((self.m, U.shape[1]))
        for i in range(U.shape[1]):
            try:
                out[:, i] = self.apply(U[:, i])
            except ForwardMapError:
                raise
            except Exception as exc:
                raise ForwardMapError(i, exc) from exc
        return out

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.apply(u)


class LinearOperator(ForwardOperator):
    linear = True

    def __init__(self, A: np.ndarray):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        self.A = _frozen(A)
        self.m, self.n = A.shape

    def apply(self, u):
        return self.A @ u

    def apply_ensemble(self, U):
        return self.A @ U


class NonlinearOperator(ForwardOperator):
    """Wrap a deterministic, side-effect-free callable.

    ``batch`` (optional) maps an ``n x N`` matrix to ``m x N`` in one call;
    errors raised inside it are not attributed to a particle.
    """

    def __init__(self, func: Callable[[np.ndarray], np.ndarray], n: int, m: int,
                 batch: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        self.func = func
        self.batch = batch
        self.n = int(n)
        self.m = int(m)

    def apply(self, u):
        return np.asarray(self.func(u), dtype=float)

    def apply_ensemble(self, U):
        if self.batch is None:
            return super().apply_ensemble(U)
        return np.asarray(self.batch(U), dtype=float)


class ForwardStats(NamedTuple):
    """Ensemble statistics in image space.

    ``C_up = D Gd^T`` and ``C_pp = Gd Gd^T`` where ``D`` and ``Gd`` are the
    parameter and image deviation factors (both scaled by ``1/sqrt(N)``).
    """

    images: np.ndarray  # m x N, G applied to each particle
    g_mean: np.ndarray
    D: np.ndarray
    Gd: np.ndarray

    @property
    def C_up(self) -> np.ndarray:
        return self.D @ self.Gd.T

    @property
    def C_pp(self) -> np.ndarray:
        S = self.Gd @ self.Gd.T
        return 0.5 * (S + S.T)


def forward_stats(e: Ensemble, G: ForwardOperator) -> ForwardStats:
    images = G.apply_ensemble(e.particles)
    if images.shape != (G.m, e.N):
        raise ValueError(f"forward map returned shape {images.shape}, expected {(G.m, e.N)}")
    g_mean = images.mean(axis=1)
    Gd = (images - g_mean[:, None]) / np.sqrt(e.N)
    return ForwardStats(images, g_mean, deviation_factor(e), Gd)


def ensemble_forward_stats(e: Ensemble, G: ForwardOperator):
    """Return ``(C_up, C_pp, G_mean)`` for the ensemble."""
    s = forward_stats(e, G)
    return s.C_up, s.C_pp, s.g_mean

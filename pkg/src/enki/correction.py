"""Adaptive multiplicative covariance correction for EnKI.

At iteration ``k`` the factor ``alpha`` is the fixed point of

    zeta(alpha) = 1 + f1(alpha) f2(alpha) / (4 delta(k)),

with ``M(alpha) = mu I + alpha S``, ``w = M^-1 r``, ``f1 = r.w``,
``f2 = w.S w`` and ``S`` the image-space ensemble covariance. ``delta(k)``
is large enough that ``|zeta'| <= q < 1``, so the map is a contraction on
``[1, inf)``. By default one Newton-type step from the previous ``alpha`` is
taken instead of iterating to convergence.

Two variants: a single ``alpha`` from the mean residual (MC1), or one
``alpha`` per particle from its own residual, refreshed every ``K`` steps (MC2).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import Ensemble, ForwardOperator, ForwardStats, NoiseModel
from .iteration import EnkiState, RunResult, Termination, run


class AlphaGuardError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeltaParams:
    q: float = 0.99
    eps_delta: float = 1e-15
    alpha_bound: float = 1e4

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if not self.eps_delta > 0:
            raise ValueError("eps_delta must be positive")
        if not self.alpha_bound > 1:
            raise ValueError("alpha_bound must exceed 1")


@dataclass(frozen=True)
class AlphaState:
    alpha_prev: float = 1.0
    eps_delta_current: float = 1e-15
    history: tuple = ()

    def __post_init__(self):
        if not self.alpha_prev >= 1:
            raise ValueError("alpha_prev must be >= 1")

    @classmethod
    def start(cls, params: DeltaParams) -> "AlphaState":
        return cls(1.0, params.eps_delta, ())


@dataclass(frozen=True)
class ResidualStats:
    r_bar: np.ndarray
    residuals: np.ndarray  # m x N
    S: np.ndarray
    lambda_min: float
    lambda_max: float
    evals: Optional[np.ndarray] = field(default=None, repr=False)
    evecs: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_matrix(cls, S: np.ndarray, r_bar: np.ndarray, residuals: Optional[np.ndarray] = None):
        S = 0.5 * (np.asarray(S, float) + np.asarray(S, float).T)
        w, V = np.linalg.eigh(S)
        r_bar = np.asarray(r_bar, float)
        res = r_bar[:, None] if residuals is None else np.asarray(residuals, float)
        # S is PSD; eigenvalues at roundoff level are zeros of a rank-deficient S
        cut = S.shape[0] * np.finfo(float).eps * max(abs(w[-1]), 0.0)
        lam = np.where(w > cut, w, 0.0)
        return cls(r_bar, res, S, float(w[0]), float(w[-1]), lam, V)

    @classmethod
    def from_forward(cls, stats: ForwardStats, d: np.ndarray) -> "ResidualStats":
        d = np.asarray(d, float)
        return cls.from_matrix(stats.C_pp, d - stats.g_mean, d[:, None] - stats.images)

    @property
    def collapsed(self) -> bool:
        return self.lambda_max <= 0.0


def _r(stats: ResidualStats, r) -> np.ndarray:
    return stats.r_bar if r is None else np.asarray(r, float)


def scalar_functionals(alpha: float, stats: ResidualStats, mu: float, r=None):
    """``(f1, f2, f3)`` at ``alpha``.

    Evaluated in the eigenbasis of ``S``: forming ``w = M^-1 r`` and then
    ``w.S w`` loses most digits when ``r`` has a large component in the null
    space of a rank-deficient ``S``, which is the usual case (N < m).
    """
    r = _r(stats, r)
    if stats.evals is None:
        stats = ResidualStats.from_matrix(stats.S, stats.r_bar, stats.residuals)
    lam = stats.evals
    t2 = (stats.evecs.T @ r) ** 2
    s = mu + alpha * lam
    f1 = float(np.sum(t2 / s))
    f2 = float(np.sum(lam * t2 / s ** 2))
    f3 = float(np.sum(lam ** 2 * t2 / s ** 3))
    return f1, f2, f3


def delta_of_k(k: int, stats: ResidualStats, params: DeltaParams, mu: float, r=None,
               eps_delta: Optional[float] = None) -> float:
    if k < 0:
        raise ValueError("k must be >= 0")
    r = _r(stats, r)
    eps = params.eps_delta if eps_delta is None else eps_delta
    lmin = max(stats.lambda_min, 0.0)
    lmax = max(stats.lambda_max, 0.0)
    rr = float(r @ r)
    return (3.0 / (4.0 * params.q)) * lmax ** 2 * rr ** 2 / (mu + lmin) ** 4 + eps * k


def _check_delta(delta):
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")


def zeta(alpha: float, stats: ResidualStats, delta: float, mu: float, r=None) -> float:
    _check_delta(delta)
    f1, f2, _ = scalar_functionals(alpha, stats, mu, r)
    return 1.0 + f1 * f2 / (4.0 * delta)


def zeta_prime(alpha: float, stats: ResidualStats, delta: float, mu: float, r=None) -> float:
    _check_delta(delta)
    f1, f2, f3 = scalar_functionals(alpha, stats, mu, r)
    return -(f2 * f2 + 2.0 * f1 * f3) / (4.0 * delta)


def _trivial(stats: ResidualStats, r) -> bool:
    r = _r(stats, r)
    return stats.collapsed or not np.any(r)


def alpha_fixed_point(stats: ResidualStats, delta: float, mu: float, tol: float = 1e-10,
                      start: float = 1.0, r=None, max_iter: int = 1000) -> float:
    """Iterate ``alpha <- zeta(alpha)`` from ``start``."""
    if _trivial(stats, r):
        return 1.0
    a = max(float(start), 1.0)
    for _ in range(max_iter):
        z = zeta(a, stats, delta, mu, r)
        if abs(z - a) <= tol * max(1.0, abs(a)):
            return z
        a = z
    raise RuntimeError(f"fixed-point iteration for alpha did not converge in {max_iter} steps "
                       "(contraction condition violated?)")


def alpha_taylor(state: AlphaState, stats: ResidualStats, delta: float, mu: float, r=None) -> float:
    """Linearise ``zeta`` at the previous ``alpha`` and solve for the fixed point."""
    a = state.alpha_prev
    if _trivial(stats, r):
        return 1.0
    f1, f2, f3 = scalar_functionals(a, stats, mu, r)
    z = 1.0 + f1 * f2 / (4.0 * delta)
    zp = -(f2 * f2 + 2.0 * f1 * f3) / (4.0 * delta)
    return max(1.0, a + (z - a) / (1.0 - zp))


def _alpha(method: str, prev: float, eps_cur: float, k: int, stats, params, mu, r):
    delta = delta_of_k(k, stats, params, mu, r, eps_cur)
    if _trivial(stats, r):
        return 1.0, delta
    if method == "taylor":
        a = alpha_taylor(AlphaState(prev, eps_cur), stats, delta, mu, r)
    elif method == "fixed_point":
        a = alpha_fixed_point(stats, delta, mu, start=prev, r=r)
    else:
        raise ValueError(f"unknown alpha method {method!r}")
    return a, delta


MAX_GUARD_RETRIES = 100


def mc1_alpha_policy(k: int, state: AlphaState, stats: ResidualStats, params: DeltaParams,
                     mu: float, method: str = "taylor"):
    """Return ``(alpha_k, new_state)``; ``eps_delta`` is raised tenfold while
    ``alpha`` exceeds ``alpha_bound`` and stays raised afterwards."""
    eps_cur = state.eps_delta_current
    for _ in range(MAX_GUARD_RETRIES + 1):
        a, delta = _alpha(method, state.alpha_prev, eps_cur, k, stats, params, mu, None)
        if a <= params.alpha_bound:
            hist = state.history + ((k, a, delta),)
            return a, AlphaState(a, eps_cur, hist)
        eps_cur *= 10.0
    raise AlphaGuardError(f"alpha stayed above alpha_bound={params.alpha_bound} after "
                          f"{MAX_GUARD_RETRIES} increases of eps_delta at iteration {k}")


@dataclass(frozen=True)
class AlphaVectorState:
    """Per-particle factors with a shared ``eps_delta``."""

    alphas: np.ndarray
    eps_delta_current: float
    deltas: np.ndarray

    @classmethod
    def start(cls, N: int, params: DeltaParams, alpha0: float = 1.0) -> "AlphaVectorState":
        return cls(np.full(N, float(alpha0)), params.eps_delta, np.full(N, np.nan))


def mc2_alpha_policy(k: int, state: AlphaVectorState, stats: ResidualStats, params: DeltaParams,
                     mu: float, K_recompute: int = 5, method: str = "taylor"):
    """Return ``(alphas, new_state)``; values are refreshed only when ``k % K == 0``."""
    if K_recompute < 1:
        raise ValueError("K_recompute must be >= 1")
    if k % K_recompute != 0:
        return state.alphas.copy(), state
    N = stats.residuals.shape[1]
    if state.alphas.shape != (N,):
        raise ValueError("state size does not match the ensemble")
    eps_cur = state.eps_delta_current
    for _ in range(MAX_GUARD_RETRIES + 1):
        out = np.empty(N)
        dl = np.empty(N)
        for i in range(N):
            out[i], dl[i] = _alpha(method, state.alphas[i], eps_cur, k, stats, params, mu,
                                   stats.residuals[:, i])
        if out.max() <= params.alpha_bound:
            return out.copy(), AlphaVectorState(out, eps_cur, dl)
        eps_cur *= 10.0
    raise AlphaGuardError(f"max alpha stayed above alpha_bound={params.alpha_bound} after "
                          f"{MAX_GUARD_RETRIES} increases of eps_delta at iteration {k}")


# ---------------------------------------------------------------- policies

class MC1Policy:
    """Shared ``alpha`` from the mean residual.

    With ``compare_fixed_point`` the fully converged fixed-point value is also
    computed each step (same ``delta``, same start) and logged next to the
    one actually used.
    """

    name = "mc1"

    def __init__(self, params: DeltaParams = DeltaParams(), method: str = "taylor",
                 compare_fixed_point: bool = False):
        self.params = params
        self.method = method
        self.compare = compare_fixed_point
        self.state = AlphaState.start(params)
        self._extras: dict = {}

    def prepare(self, state: EnkiState) -> Ensemble:
        return state.ensemble

    def alpha(self, k, stats, ensemble, d, noise):
        rs = ResidualStats.from_forward(stats, d)
        prev = self.state.alpha_prev
        a, self.state = mc1_alpha_policy(k, self.state, rs, self.params, noise.mu, self.method)
        delta = self.state.history[-1][2]
        self._extras = {"delta_k": delta, "eps_delta_current": self.state.eps_delta_current}
        if self.compare:
            other = "fixed_point" if self.method == "taylor" else "taylor"
            b, _ = _alpha(other, prev, self.state.eps_delta_current, k, rs, self.params,
                          noise.mu, None)
            self._extras["alpha_" + other] = b
        return a

    def extras(self) -> dict:
        return dict(self._extras)


class MC2Policy:
    """Per-particle ``alpha``, after ``warmup`` MC1 iterations."""

    name = "mc2"

    def __init__(self, params: DeltaParams = DeltaParams(), K_recompute: int = 5,
                 warmup: int = 10, method: str = "taylor"):
        self.params = params
        self.K = K_recompute
        self.warmup = warmup
        self.method = method
        self.mc1 = MC1Policy(params, method)
        self.vstate: Optional[AlphaVectorState] = None
        self._extras: dict = {}

    def prepare(self, state: EnkiState) -> Ensemble:
        return state.ensemble

    def alpha(self, k, stats, ensemble, d, noise):
        if k < self.warmup:
            a = self.mc1.alpha(k, stats, ensemble, d, noise)
            e = self.mc1.extras()
            self._extras = {"alpha_min": a, "alpha_max": a, "alpha_mean": a,
                            "delta_k": e["delta_k"], "eps_delta_current": e["eps_delta_current"]}
            return a
        if self.vstate is None:
            st = self.mc1.state
            self.vstate = AlphaVectorState(np.full(ensemble.N, st.alpha_prev), st.eps_delta_current,
                                           np.full(ensemble.N, np.nan))
        rs = ResidualStats.from_forward(stats, d)
        alphas, self.vstate = mc2_alpha_policy(k, self.vstate, rs, self.params, noise.mu,
                                               self.K, self.method)
        self._extras = {"alpha_min": float(alphas.min()), "alpha_max": float(alphas.max()),
                        "alpha_mean": float(alphas.mean()),
                        "delta_k": float(np.nanmean(self.vstate.deltas)),
                        "eps_delta_current": self.vstate.eps_delta_current}
        return alphas

    def extras(self) -> dict:
        return dict(self._extras)


def run_mc1(initial: Ensemble, G: ForwardOperator, noise: NoiseModel, d, term: Termination,
            params: DeltaParams = DeltaParams(), method: str = "taylor",
            compare_fixed_point: bool = False, **kw) -> RunResult:
    return run(initial, G, noise, d, term, MC1Policy(params, method, compare_fixed_point), **kw)


def run_mc2(initial: Ensemble, G: ForwardOperator, noise: NoiseModel, d, term: Termination,
            params: DeltaParams = DeltaParams(), K_recompute: int = 5, warmup: int = 10,
            method: str = "taylor", **kw) -> RunResult:
    return run(initial, G, noise, d, term, MC2Policy(params, K_recompute, warmup, method), **kw)

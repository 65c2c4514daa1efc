"""Reference step-size policies for comparison: power-law inflation,
MAP-estimated inflation, and Nesterov momentum on the particles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import Ensemble, ForwardOperator, NoiseModel
from .iteration import EnkiState, enki_step


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "chada"
    beta: float = 0.8

    def __post_init__(self):
        if self.method not in ("chada", "nesterov", "anderson"):
            raise ValueError(f"unknown baseline {self.method!r}")
        if self.method == "chada" and not 0 <= self.beta <= 0.8:
            raise ValueError("beta must lie in [0, 0.8]")


def chada_alpha(k: int, beta: float = 0.8) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(k) ** beta


class ChadaPolicy:
    """``alpha = k^beta`` with ``k`` counted from 1 at the first step."""

    name = "chada"

    def __init__(self, beta: float = 0.8):
        BaselineConfig("chada", beta)
        self.beta = beta

    def prepare(self, state):
        return state.ensemble

    def alpha(self, k, stats, ensemble, d, noise):
        return chada_alpha(k + 1, self.beta)

    def extras(self):
        return {}


# --------------------------------------------------------------- Anderson

def anderson_objective(alpha: float, r_bar: np.ndarray, S: np.ndarray, mu: float) -> float:
    """``1/2 r^T S(a)^-1 r + 1/2 logdet S(a) + 1/2 (a - 1)^2`` with ``S(a) = mu I + a S``."""
    M = mu * np.eye(r_bar.size) + alpha * S
    try:
        L = linalg.cholesky(M, lower=True)
    except linalg.LinAlgError:
        return np.nan
    y = linalg.solve_triangular(L, r_bar, lower=True)
    return 0.5 * float(y @ y) + float(np.sum(np.log(np.diag(L)))) + 0.5 * (alpha - 1.0) ** 2


_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 500) -> float:
    a, b = lo, hi
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def anderson_alpha(stats, mu: float, bracket=(1e-6, 1e4), grid_points: int = 400) -> float:
    """Minimise the inflation objective over ``bracket``.

    ``stats`` needs ``r_bar`` and ``S``. The objective can be multimodal in
    ``alpha``, so a log-spaced scan picks the best cell before the golden
    section refines it; the result is never worse than ``alpha = 1`` or
    either bracket end.
    """
    r_bar = np.asarray(stats.r_bar, float)
    S = np.asarray(stats.S, float)
    lo, hi = bracket
    # In the eigenbasis of S every evaluation is O(m) instead of a Cholesky.
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    lam = np.clip(lam, 0.0, None)
    rt2 = (V.T @ r_bar) ** 2

    def f(a):
        s = mu + a * lam
        if np.any(s <= 0):
            return np.inf
        v = 0.5 * np.sum(rt2 / s) + 0.5 * np.sum(np.log(s)) + 0.5 * (a - 1.0) ** 2
        return v if np.isfinite(v) else np.inf

    xs = np.geomspace(lo, hi, grid_points)
    Sg = mu + xs[:, None] * lam[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = (0.5 * (rt2 / Sg).sum(axis=1) + 0.5 * np.log(Sg).sum(axis=1)
                + 0.5 * (xs - 1.0) ** 2)
    vals = np.where(np.isfinite(vals), vals, np.inf)
    if not np.any(np.isfinite(vals)):
        raise FloatingPointError("inflation objective is non-finite on the whole bracket")
    j = int(np.argmin(vals))
    a = xs[max(j - 1, 0)]
    b = xs[min(j + 1, grid_points - 1)]
    best = golden_section(f, a, b)
    cands = [(f(best), best), (vals[j], xs[j]), (f(lo), lo), (f(hi), hi)]
    if lo <= 1.0 <= hi:
        cands.append((f(1.0), 1.0))
    return float(min(cands)[1])


class AndersonPolicy:
    name = "anderson"

    def __init__(self, bracket=(1e-6, 1e4)):
        self.bracket = bracket

    def prepare(self, state):
        return state.ensemble

    def alpha(self, k, stats, ensemble, d, noise):
        from .correction import ResidualStats
        return anderson_alpha(ResidualStats.from_forward(stats, d), noise.mu, self.bracket)

    def extras(self):
        return {}


# --------------------------------------------------------------- Nesterov

def nesterov_coefficient(k: int) -> float:
    return (k - 1.0) / (k + 2.0) if k >= 1 else 0.0


def nesterov_extrapolate(state: EnkiState) -> Ensemble:
    """``u_k + ((k-1)/(k+2)) (u_k - u_{k-1})`` for every particle."""
    coef = nesterov_coefficient(state.k)
    if coef == 0.0:
        return state.ensemble
    U, V = state.ensemble.particles, state.prev_ensemble.particles
    return Ensemble(U + coef * (U - V))


def nesterov_step(state: EnkiState, G: ForwardOperator, noise: NoiseModel, d) -> EnkiState:
    return enki_step(state, G, noise, d, 1.0, base=nesterov_extrapolate(state))


class NesterovPolicy:
    name = "nesterov"

    def prepare(self, state):
        return nesterov_extrapolate(state)

    def alpha(self, k, stats, ensemble, d, noise):
        return 1.0

    def extras(self):
        return {}

"""Iterative ensemble Kalman inversion (EnKI) with pluggable step-size policies.

One step moves every particle along ``alpha C_up (mu I + alpha C_pp)^-1 (d - G(u_i))``
using a single noise-free data vector. The policy object supplies ``alpha``
(scalar, or one value per particle) and may also replace the ensemble the
step starts from, which is how momentum variants plug in.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

import numpy as np
from scipy import linalg

from .core import Ensemble, ForwardOperator, ForwardStats, NoiseModel, forward_stats


class DivergenceError(RuntimeError):
    def __init__(self, k: int, detail: str = ""):
        super().__init__(f"divergence detected at iteration {k}" + (f": {detail}" if detail else ""))
        self.k = k


@dataclass(frozen=True)
class Termination:
    eps_c: float = 1e-5
    I_max: int = 10_000

    def __post_init__(self):
        if not self.eps_c > 0:
            raise ValueError("eps_c must be positive")
        if self.I_max < 1:
            raise ValueError("I_max must be >= 1")


class History(Sequence):
    """Read-only prefix view of an append-only record list.

    Snapshots taken earlier keep their length even as the run continues.
    """

    def __init__(self, records: list | None = None, length: int | None = None):
        self._records = [] if records is None else records
        self._len = len(self._records) if length is None else length

    def __len__(self):
        return self._len

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self._records[j] for j in range(*i.indices(self._len))]
        if i < 0:
            i += self._len
        if not 0 <= i < self._len:
            raise IndexError(i)
        return self._records[i]

    def column(self, key: str) -> np.ndarray:
        return np.array([r.get(key, np.nan) for r in self], dtype=float)

    def to_csv(self) -> str:
        return history_csv(self)


@dataclass(frozen=True)
class EnkiState:
    k: int
    ensemble: Ensemble
    prev_ensemble: Ensemble
    history: History = field(default_factory=History)
    stop_reason: Optional[str] = None

    @classmethod
    def initial(cls, ensemble: Ensemble) -> "EnkiState":
        return cls(0, ensemble, ensemble, History())


# ---------------------------------------------------------------- pieces

def misfit_loss(u: np.ndarray, G: ForwardOperator, noise: NoiseModel, d: np.ndarray) -> float:
    r = np.asarray(d) - G.apply(np.asarray(u))
    return 0.5 * float(r @ r) / noise.mu


class SubspaceProjector:
    """Orthogonal projector onto the span of a fixed set of particles."""

    def __init__(self, initial: Ensemble, rtol: float = 1e-12):
        U, s, _ = np.linalg.svd(initial.particles, full_matrices=False)
        rank = int(np.sum(s > rtol * max(s.max(), 1e-300))) if s.size else 0
        self.Q = U[:, :rank]

    def residual(self, u: np.ndarray) -> np.ndarray:
        """Relative residual per column (or a scalar for a vector input)."""
        u = np.asarray(u, dtype=float)
        X = u[:, None] if u.ndim == 1 else u
        R = X - self.Q @ (self.Q.T @ X)
        res = np.linalg.norm(R, axis=0) / np.maximum(np.linalg.norm(X, axis=0), 1e-30)
        return float(res[0]) if u.ndim == 1 else res


def subspace_residual(u: np.ndarray, initial: Ensemble) -> float:
    return SubspaceProjector(initial).residual(np.asarray(u, dtype=float))


def spread(state_or_ensemble) -> float:
    """Largest eigenvalue of the ensemble sample covariance."""
    e = getattr(state_or_ensemble, "ensemble", state_or_ensemble)
    D = e.deviation_factor()
    gram = D.T @ D
    return float(max(np.linalg.eigvalsh(0.5 * (gram + gram.T))[-1], 0.0))


def _gain_factor(noise: NoiseModel, C_pp: np.ndarray, alpha: float):
    M = noise.mu * np.eye(C_pp.shape[0]) + alpha * C_pp
    try:
        return linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError as exc:  # mu > 0 and C_pp PSD make this unreachable
        raise AssertionError(f"gain matrix not SPD for alpha={alpha}") from exc


def alpha_key(a: float) -> float:
    return float(f"{a:.12g}")


def kalman_update(U: np.ndarray, stats: ForwardStats, noise: NoiseModel, d: np.ndarray,
                  alpha) -> np.ndarray:
    """Apply the EnKI update to the particle matrix ``U``.

    ``alpha`` may be a scalar or one value per particle; particles with equal
    ``alpha`` (to 12 significant digits) share a Cholesky factorisation.
    """
    R = np.asarray(d)[:, None] - stats.images
    C_pp = stats.C_pp
    D, Gd = stats.D, stats.Gd
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 0:
        a = float(a)
        if not a > 0:
            raise ValueError(f"alpha must be positive, got {a}")
        W = linalg.cho_solve(_gain_factor(noise, C_pp, a), R)
        return U + a * (D @ (Gd.T @ W))
    if a.shape != (U.shape[1],):
        raise ValueError("per-particle alpha must have one entry per particle")
    if not np.all(a > 0):
        raise ValueError("alpha must be positive")
    out = np.empty_like(U)
    cache: dict[float, Any] = {}
    for i in range(U.shape[1]):
        key = alpha_key(a[i])
        fac = cache.get(key)
        if fac is None:
            fac = cache[key] = _gain_factor(noise, C_pp, a[i])
        w = linalg.cho_solve(fac, R[:, i])
        out[:, i] = U[:, i] + a[i] * (D @ (Gd.T @ w))
    return out


def enki_step(state: EnkiState, G: ForwardOperator, noise: NoiseModel, d: np.ndarray,
              alpha=1.0, stats: Optional[ForwardStats] = None,
              base: Optional[Ensemble] = None) -> EnkiState:
    """One EnKI iteration from ``base`` (defaults to the current ensemble).

    Returns a new state with ``k + 1``; history is not extended here (the
    run loop records diagnostics).
    """
    base = state.ensemble if base is None else base
    if stats is None:
        stats = forward_stats(base, G)
    U_new = kalman_update(base.particles, stats, noise, d, alpha)
    if not np.all(np.isfinite(U_new)):
        raise DivergenceError(state.k + 1, "non-finite particle values")
    return EnkiState(state.k + 1, Ensemble(U_new), state.ensemble, state.history)


def relative_change(new: Ensemble, old: Ensemble) -> float:
    num = np.linalg.norm(new.particles - old.particles)
    den = np.linalg.norm(old.particles)
    return float(num / den) if den > 0 else float(num)


# ---------------------------------------------------------------- policies

class AlphaPolicy(Protocol):
    name: str

    def prepare(self, state: EnkiState) -> Ensemble: ...

    def alpha(self, k: int, stats: ForwardStats, ensemble: Ensemble, d: np.ndarray,
              noise: NoiseModel): ...

    def extras(self) -> dict: ...


class VanillaPolicy:
    name = "vanilla"

    def prepare(self, state: EnkiState) -> Ensemble:
        return state.ensemble

    def alpha(self, k, stats, ensemble, d, noise):
        return 1.0

    def extras(self) -> dict:
        return {}


# -------------------------------------------------------------- run loop

@dataclass
class RunResult:
    state: EnkiState
    history: History
    stop_reason: str
    iterations: int
    forward_evals: int
    subspace_max: Optional[float] = None

    @property
    def mean(self) -> np.ndarray:
        return self.state.ensemble.mean()


def run(initial: Ensemble, G: ForwardOperator, noise: NoiseModel, d: np.ndarray,
        term: Termination, policy: Optional[AlphaPolicy] = None, truth: Optional[np.ndarray] = None,
        track_subspace: bool = False,
        observer: Optional[Callable[[EnkiState], None]] = None) -> RunResult:
    """Iterate until the relative ensemble change drops to ``eps_c`` or
    ``I_max`` steps have been taken."""
    policy = VanillaPolicy() if policy is None else policy
    d = np.asarray(d, dtype=float)
    if d.shape != (G.m,):
        raise ValueError(f"data length {d.shape} != forward map output {G.m}")
    records: list[dict] = []
    state = EnkiState.initial(initial)
    proj = SubspaceProjector(initial) if track_subspace else None
    sub_max = float(np.max(proj.residual(initial.particles))) if proj else None
    truth_norm = np.linalg.norm(truth) if truth is not None else None
    stop = None
    while stop is None:
        k = state.k
        base = policy.prepare(state)
        stats = forward_stats(base, G)
        if not np.all(np.isfinite(stats.images)):
            raise DivergenceError(k + 1, "non-finite forward map output")
        alpha = policy.alpha(k, stats, base, d, noise)
        new = enki_step(state, G, noise, d, alpha, stats=stats, base=base)
        rel = relative_change(new.ensemble, state.ensemble)
        mean = new.ensemble.mean()
        a = np.asarray(alpha, dtype=float)
        rec = {
            "k": new.k,
            "loss": misfit_loss(mean, G, noise, d),
            "rel_change": rel,
            "spread": spread(new.ensemble),
            "alpha": float(a) if a.ndim == 0 else float(a.mean()),
        }
        if truth is not None:
            rec["rel_error_vs_truth"] = float(np.linalg.norm(mean - truth) / truth_norm)
        rec.update(policy.extras())
        records.append(rec)
        if proj is not None:
            sub_max = max(sub_max, float(np.max(proj.residual(new.ensemble.particles))))
        if rel <= term.eps_c:
            stop = "converged"
        elif new.k >= term.I_max:
            stop = "max_iter"
        state = EnkiState(new.k, new.ensemble, new.prev_ensemble, History(records), stop)
        if observer is not None:
            observer(state)
    hist = History(records)
    return RunResult(state, hist, stop, state.k, initial.N * (state.k + 1), sub_max)


# ------------------------------------------------------------------ CSV

BASE_COLUMNS = ("k", "loss", "rel_change", "spread", "alpha", "rel_error_vs_truth")


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def history_csv(history) -> str:
    cols = [c for c in BASE_COLUMNS if any(c in r for r in history)]
    for r in history:
        for key in r:
            if key not in cols:
                cols.append(key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(cols)
    for r in history:
        w.writerow([fmt(r[c]) if c in r else "" for c in cols])
    return buf.getvalue()

"""Benchmark inverse problems: 1D deconvolution, Lorenz 96 initial-condition
inversion and a nonlinear steady heat equation, plus their priors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .core import Ensemble, ForwardOperator, LinearOperator, NoiseModel, Observation, psd_sqrt


# ---------------------------------------------------------------- grids

@dataclass(frozen=True)
class Grid1D:
    n: int
    lo: float = -10.0
    hi: float = 10.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("Grid1D needs n >= 2")
        if not self.hi > self.lo:
            raise ValueError("Grid1D needs hi > lo")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def dx(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)


@dataclass(frozen=True)
class Grid2D:
    """Interior nodes of the unit square, ``s`` per side, spacing ``1/(s+1)``."""

    s: int

    def __post_init__(self):
        if self.s < 2:
            raise ValueError("Grid2D needs s >= 2")

    @property
    def h(self) -> float:
        return 1.0 / (self.s + 1)

    @property
    def n(self) -> int:
        return self.s * self.s

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates, row-major with ``x`` varying fastest."""
        t = self.h * np.arange(1, self.s + 1)
        X, Y = np.meshgrid(t, t, indexing="xy")
        return X.ravel(), Y.ravel()

    def center_index(self) -> int:
        if self.s % 2 == 0:
            raise ValueError("grid has no center node for even s")
        c = self.s // 2
        return c * self.s + c


@dataclass(frozen=True)
class L96Config:
    n: int
    F: float = 8.0
    T: float = 0.3
    h_rk: float = 0.01
    obs_indices: tuple = ()

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("Lorenz 96 needs n >= 4")
        steps = self.T / self.h_rk
        if abs(steps - round(steps)) > 1e-12 * max(1.0, steps):
            raise ValueError(f"h_rk={self.h_rk} does not divide T={self.T}")
        idx = tuple(int(i) for i in (self.obs_indices or range(self.n)))
        if any(i < 0 or i >= self.n for i in idx):
            raise ValueError("observation index out of range")
        object.__setattr__(self, "obs_indices", idx)

    @property
    def steps(self) -> int:
        return int(round(self.T / self.h_rk))

    @property
    def m(self) -> int:
        return len(self.obs_indices)


# ---------------------------------------------------------- deconvolution

def kernel_constant(a: float) -> float:
    # int_{-a}^{a} (x+a)^2 (x-a)^2 dx = 16 a^5 / 15
    return 15.0 / (16.0 * a ** 5)


def deconv_kernel(x, a: float = 0.235) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    val = kernel_constant(a) * (x + a) ** 2 * (x - a) ** 2
    return np.where(np.abs(x) <= a, val, 0.0)


def deconv_operator(grid: Grid1D, a: float = 0.235) -> np.ndarray:
    """Convolution quadrature ``A_ij = dx * Psi(x_i - x_j)``, zero outside the domain."""
    if not a > 0:
        raise ValueError("kernel half-width a must be positive")
    x = grid.x
    diff = x[:, None] - x[None, :]
    return grid.dx * deconv_kernel(diff, a)


def exp_sine_squared_cov(points, length_scale: float = 0.5, periodicity: float = 20.0,
                         variance: float = 1e-4) -> np.ndarray:
    if not (length_scale > 0 and periodicity > 0):
        raise ValueError("length_scale and periodicity must be positive")
    x = np.asarray(points, dtype=float).ravel()
    dist = np.abs(x[:, None] - x[None, :])
    K = variance * np.exp(-2.0 * np.sin(np.pi * dist / periodicity) ** 2 / length_scale ** 2)
    return 0.5 * (K + K.T)


# -------------------------------------------------------------- Lorenz 96

def l96_rhs(V: np.ndarray, F: float) -> np.ndarray:
    """Tendency for states stored along axis 0 (one system per column)."""
    return (np.roll(V, -1, axis=0) - np.roll(V, 2, axis=0)) * np.roll(V, 1, axis=0) - V + F


def l96_integrate(V0: np.ndarray, cfg: L96Config) -> np.ndarray:
    V = np.array(V0, dtype=float)
    h = cfg.h_rk
    for _ in range(cfg.steps):
        k1 = l96_rhs(V, cfg.F)
        k2 = l96_rhs(V + 0.5 * h * k1, cfg.F)
        k3 = l96_rhs(V + 0.5 * h * k2, cfg.F)
        k4 = l96_rhs(V + h * k3, cfg.F)
        V = V + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("L96 blow-up: non-finite state")
    return V


def lorenz96_forward(v0: np.ndarray, cfg: L96Config) -> np.ndarray:
    """Integrate to ``T`` and return the observed components.

    ``v0`` may be a single state or an ``n x N`` matrix of states.
    """
    V0 = np.asarray(v0, dtype=float)
    if V0.shape[0] != cfg.n:
        raise ValueError(f"state length {V0.shape[0]} != n={cfg.n}")
    with np.errstate(over="ignore", invalid="ignore"):
        V = l96_integrate(V0, cfg)
    return V[list(cfg.obs_indices)]


class Lorenz96Operator(ForwardOperator):
    def __init__(self, cfg: L96Config):
        self.cfg = cfg
        self.n = cfg.n
        self.m = cfg.m

    def apply(self, u):
        return lorenz96_forward(u, self.cfg)

    def apply_ensemble(self, U):
        try:
            return lorenz96_forward(U, self.cfg)
        except FloatingPointError:
            # fall back to the per-particle loop to name the offending particle
            return super().apply_ensemble(U)


# ------------------------------------------------------------ heat 2D

def heat2d_matrix(u: np.ndarray, grid: Grid2D, mean: str = "arithmetic") -> sparse.csr_matrix:
    """5-point discretisation of ``-div(exp(u) grad p)`` with ``p = 0`` on the boundary.

    Faces between two interior nodes use the arithmetic (or harmonic) mean of
    the nodal conductivities; boundary faces use the interior node's value.
    """
    s, h = grid.s, grid.h
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.n,):
        raise ValueError(f"u must have length {grid.n}")
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    k = np.exp(u).reshape(s, s)  # k[j, i]: row j is y, column i is x

    def face(a, b):
        if mean == "harmonic":
            return 2.0 * a * b / (a + b)
        return 0.5 * (a + b)

    kx = np.empty((s, s + 1))  # face between columns i-1 and i
    kx[:, 1:s] = face(k[:, :-1], k[:, 1:])
    kx[:, 0] = k[:, 0]
    kx[:, s] = k[:, -1]
    ky = np.empty((s + 1, s))
    ky[1:s, :] = face(k[:-1, :], k[1:, :])
    ky[0, :] = k[0, :]
    ky[s, :] = k[-1, :]

    diag = (kx[:, :-1] + kx[:, 1:] + ky[:-1, :] + ky[1:, :]).ravel()
    idx = np.arange(grid.n).reshape(s, s)
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [diag]
    east = -kx[:, 1:s]  # coupling (j, i) <-> (j, i+1)
    rows += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals += [east.ravel(), east.ravel()]
    north = -ky[1:s, :]
    rows += [idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols += [idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals += [north.ravel(), north.ravel()]
    M = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(grid.n, grid.n))
    return (M / h ** 2).tocsr()


def heat2d_solve(u: np.ndarray, grid: Grid2D, f: float = 1.0, mean: str = "arithmetic",
                 rtol: float = 1e-10) -> np.ndarray:
    """Solve ``div(exp(u) grad p) = f`` on the interior nodes.

    With the sign convention ``-div(k grad p) = -f`` the system matrix is SPD,
    so we solve ``M p = -f``.
    """
    M = heat2d_matrix(u, grid, mean)
    rhs = -f * np.ones(grid.n)
    p = splinalg.spsolve(M.tocsc(), rhs)
    res = np.linalg.norm(M @ p - rhs) / np.linalg.norm(rhs)
    if not np.isfinite(res) or res > rtol:
        raise RuntimeError(f"heat solver failed: relative residual {res:.3e}")
    return p


def heat2d_forward(u: np.ndarray, grid: Grid2D, f: float = 1.0, obs_indices=None,
                   mean: str = "arithmetic") -> np.ndarray:
    p = heat2d_solve(u, grid, f, mean)
    return p if obs_indices is None else p[np.asarray(obs_indices, dtype=int)]


class Heat2DOperator(ForwardOperator):
    def __init__(self, grid: Grid2D, obs_indices, f: float = 1.0, mean: str = "arithmetic"):
        self.grid = grid
        self.obs_indices = np.asarray(obs_indices, dtype=int)
        self.f = f
        self.mean = mean
        self.n = grid.n
        self.m = len(self.obs_indices)

    def apply(self, u):
        return heat2d_forward(u, self.grid, self.f, self.obs_indices, self.mean)


def dirichlet_laplacian(grid: Grid2D) -> sparse.csr_matrix:
    """Positive-definite ``-Delta`` on the interior nodes, Dirichlet boundary."""
    s = grid.s
    T = sparse.diags([-np.ones(s - 1), 2 * np.ones(s), -np.ones(s - 1)], [-1, 0, 1])
    I = sparse.identity(s)
    return ((sparse.kron(I, T) + sparse.kron(T, I)) / grid.h ** 2).tocsr()


@dataclass(frozen=True)
class LaplacianSqPrior:
    """Gaussian prior with covariance ``(Delta)^-2``; sampled as ``L^-1 w``."""

    grid: Grid2D
    L: sparse.csr_matrix = field(repr=False, default=None)

    def __post_init__(self):
        if self.L is None:
            object.__setattr__(self, "L", dirichlet_laplacian(self.grid))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        W = rng.standard_normal((self.grid.n, size))
        return np.asarray(splinalg.spsolve(self.L.tocsc(), W)).reshape(self.grid.n, size)

    def dense_cov(self) -> np.ndarray:
        Linv = np.linalg.inv(self.L.toarray())
        C = Linv @ Linv.T
        return 0.5 * (C + C.T)


def laplacian_sq_prior(grid: Grid2D) -> LaplacianSqPrior:
    return LaplacianSqPrior(grid)


# --------------------------------------------------------------- noise

def add_noise(d: np.ndarray, percent: float = 0.02, seed=None) -> np.ndarray:
    """``d + e`` with ``e ~ N(0, (percent * rms(d))^2 I)``."""
    if percent < 0:
        raise ValueError("percent must be >= 0")
    d = np.asarray(d, dtype=float)
    if percent == 0:
        return d.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = percent * np.sqrt(np.mean(d ** 2))
    return d + sigma * rng.standard_normal(d.shape)


# ------------------------------------------------------------ bundles

@dataclass
class InverseProblem:
    """Everything a run needs: operator, data, noise model and initial ensemble."""

    name: str
    G: ForwardOperator
    obs: Observation
    noise: NoiseModel
    initial: Ensemble
    prior_mean: np.ndarray
    prior_cov: Optional[np.ndarray] = None
    linear: bool = False
    info: dict = field(default_factory=dict)

    @property
    def d(self) -> np.ndarray:
        return self.obs.d

    @property
    def truth(self) -> Optional[np.ndarray]:
        return self.obs.truth


def _streams(seed: int):
    truth, noise, ens = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(truth), np.random.default_rng(noise),
            np.random.default_rng(ens))


def deconvolution(n: int = 100, N: int = 20, mu: float = 0.01, noise_percent: float = 0.02,
                  a: float = 0.235, beta: float = 1e-4, length_scale: float = 0.5,
                  periodicity: float = 20.0, seed: int = 0) -> InverseProblem:
    grid = Grid1D(n)
    A = deconv_operator(grid, a)
    C = exp_sine_squared_cov(grid.x, length_scale, periodicity, beta)
    Csq = psd_sqrt(C)
    r_truth, r_noise, r_ens = _streams(seed)
    truth = Csq @ r_truth.standard_normal(n)
    d = add_noise(A @ truth, noise_percent, r_noise)
    initial = Ensemble(Csq @ r_ens.standard_normal((n, N)))
    return InverseProblem("deconv", LinearOperator(A), Observation(d, truth), NoiseModel(mu, n),
                          initial, np.zeros(n), C, linear=True,
                          info={"grid": grid, "A": A})


def l96_obs_indices(n: int, m: int) -> tuple:
    """``m`` observation indices: a spread of unique ones, the remainder repeated."""
    n_unique = min(n, max(1, int(round(0.63 * m))))
    uniq = np.unique(np.linspace(0, n - 1, n_unique).round().astype(int))
    reps = [int(uniq[i % len(uniq)]) for i in range(m - len(uniq))]
    return tuple(int(i) for i in uniq) + tuple(reps)


def lorenz96(n: int = 100, m: int = 100, N: int = 100, mu: float = 0.01,
             noise_percent: float = 0.02, F: float = 8.0, T: float = 0.3, h_rk: float = 0.01,
             prior_mean: float = 2.0, prior_var: float = 1.0, length_scale: float = 0.5,
             periodicity: float = 20.0, truth_jitter: float = 0.01, seed: int = 0) -> InverseProblem:
    cfg = L96Config(n=n, F=F, T=T, h_rk=h_rk, obs_indices=l96_obs_indices(n, m))
    grid = Grid1D(n)
    C = exp_sine_squared_cov(grid.x, length_scale, periodicity, prior_var)
    Csq = psd_sqrt(C)
    r_truth, r_noise, r_ens = _streams(seed)
    mean = np.full(n, prior_mean)
    truth = mean + Csq @ r_truth.standard_normal(n) + truth_jitter * r_truth.standard_normal(n)
    G = Lorenz96Operator(cfg)
    d = add_noise(G.apply(truth), noise_percent, r_noise)
    initial = Ensemble(mean[:, None] + Csq @ r_ens.standard_normal((n, N)))
    return InverseProblem("lorenz96", G, Observation(d, truth), NoiseModel(mu, m), initial,
                          mean, C, linear=False, info={"cfg": cfg})


def heat2d(s: int = 24, m: int = 120, N: int = 50, mu: float = 0.01,
           noise_percent: float = 0.02, f: float = 1.0, mean: str = "arithmetic",
           seed: int = 0) -> InverseProblem:
    grid = Grid2D(s)
    prior = laplacian_sq_prior(grid)
    r_truth, r_noise, r_ens = _streams(seed)
    m = min(m, grid.n)
    obs = np.sort(r_noise.choice(grid.n, size=m, replace=False))
    G = Heat2DOperator(grid, obs, f, mean)
    truth = prior.sample(r_truth, 1)[:, 0]
    d = add_noise(G.apply(truth), noise_percent, r_noise)
    initial = Ensemble(prior.sample(r_ens, N))
    return InverseProblem("heat2d", G, Observation(d, truth), NoiseModel(mu, m), initial,
                          np.zeros(grid.n), None, linear=False,
                          info={"grid": grid, "obs_indices": obs})


BUILDERS = {"deconv": deconvolution, "lorenz96": lorenz96, "heat2d": heat2d}

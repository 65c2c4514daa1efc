import numpy as np
import pytest
from scipy import integrate

from enki.problems import (BUILDERS, Grid1D, Grid2D, L96Config, add_noise, deconv_kernel,
                           deconv_operator, deconvolution, dirichlet_laplacian,
                           exp_sine_squared_cov, heat2d, heat2d_forward, heat2d_matrix,
                           heat2d_solve, kernel_constant, l96_integrate, l96_obs_indices, l96_rhs,
                           laplacian_sq_prior, lorenz96, lorenz96_forward)


# ------------------------------------------------------------ deconvolution

def test_kernel_constant_against_quadrature():
    a = 0.235
    val, _ = integrate.quad(lambda x: (x + a) ** 2 * (x - a) ** 2, -a, a, epsabs=1e-15, epsrel=1e-15)
    assert kernel_constant(a) == pytest.approx(1.0 / val, rel=1e-10)
    assert kernel_constant(a) == pytest.approx(1.30807e3, rel=1e-5)


def test_kernel_roots_and_symmetry():
    a = 0.235
    assert deconv_kernel(np.array([a, -a]), a) == pytest.approx([0.0, 0.0], abs=1e-12)
    x = np.linspace(-0.3, 0.3, 31)
    np.testing.assert_allclose(deconv_kernel(x, a), deconv_kernel(-x, a), rtol=0, atol=1e-12)
    assert np.all(deconv_kernel(np.array([0.3, -0.5]), a) == 0.0)


def test_deconv_operator_structure():
    g = Grid1D(401)
    A = deconv_operator(g)
    np.testing.assert_allclose(A, A.T, atol=1e-14)
    band = int(np.floor(0.235 / g.dx))
    i, j = np.nonzero(A)
    assert np.max(np.abs(i - j)) <= band
    interior = A[band:-band].sum(axis=1)
    assert np.all(np.abs(interior - 1.0) <= 2 * g.dx)


def test_exp_sine_squared():
    x = np.linspace(-10, 10, 50)
    K = exp_sine_squared_cov(x, 0.5, 20.0, 1e-4)
    np.testing.assert_allclose(np.diag(K), 1e-4)
    assert np.linalg.eigvalsh(K)[0] >= -1e-10 * 1e-4
    pair = exp_sine_squared_cov(np.array([1.3, 21.3]), 0.5, 20.0, 1e-4)
    assert pair[0, 1] == pytest.approx(1e-4, rel=1e-12)
    ref = 1e-4 * np.exp(-2 * np.sin(np.pi * abs(x[3] - x[7]) / 20) ** 2 / 0.25)
    assert K[3, 7] == pytest.approx(ref, rel=1e-13)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid1D(1)
    with pytest.raises(ValueError):
        Grid2D(1)
    with pytest.raises(ValueError):
        L96Config(n=5, T=0.305, h_rk=0.01)
    with pytest.raises(ValueError):
        L96Config(n=5, obs_indices=(0, 5))


# ---------------------------------------------------------------- Lorenz 96

def test_l96_equilibrium():
    cfg = L96Config(n=40, F=8.0)
    v = np.full(40, 8.0)
    np.testing.assert_allclose(l96_integrate(v, cfg), v, rtol=0, atol=1e-12)
    assert np.all(l96_rhs(v, 8.0) == 0.0)


def test_l96_cyclic_wrap(rng):
    v = rng.standard_normal(5)
    F = 8.0
    f = l96_rhs(v, F)
    # 1-based k=1 equation: v5 (v2 - v4) - v1 + F
    assert f[0] == pytest.approx(v[4] * (v[1] - v[3]) - v[0] + F, rel=1e-14)
    for k in range(5):
        ref = v[(k - 1) % 5] * (v[(k + 1) % 5] - v[(k - 2) % 5]) - v[k] + F
        assert f[k] == pytest.approx(ref, rel=1e-14, abs=1e-14)


def test_l96_rk4_order(rng):
    v0 = 8.0 + rng.standard_normal(20)
    ref = l96_integrate(v0, L96Config(n=20, T=0.3, h_rk=0.0025))
    e1 = np.linalg.norm(l96_integrate(v0, L96Config(n=20, T=0.3, h_rk=0.02)) - ref)
    e2 = np.linalg.norm(l96_integrate(v0, L96Config(n=20, T=0.3, h_rk=0.01)) - ref)
    assert 12 <= e1 / e2 <= 20


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_l96_blowup():
    with pytest.raises(FloatingPointError, match="L96 blow-up"):
        l96_integrate(np.array([1e200, -1e200, 3e200, 0.0, 2e200, -1e200]), L96Config(n=6, T=0.3))


def test_l96_forward_batched_and_indices(rng):
    cfg = L96Config(n=8, obs_indices=(0, 3, 3, 7))
    V = 8.0 + rng.standard_normal((8, 3))
    out = lorenz96_forward(V, cfg)
    assert out.shape == (4, 3)
    for j in range(3):
        np.testing.assert_allclose(out[:, j], lorenz96_forward(V[:, j], cfg), rtol=1e-14)
    assert out[1, 0] == out[2, 0]


def test_l96_obs_indices():
    idx = l96_obs_indices(100, 100)
    assert len(idx) == 100 and min(idx) >= 0 and max(idx) < 100
    assert len(set(idx)) == 63


# ---------------------------------------------------------------- heat 2D

def test_heat_matrix_symmetric_and_dominant(rng):
    g = Grid2D(7)
    u = rng.standard_normal(g.n) * 2
    M = heat2d_matrix(u, g).toarray()
    np.testing.assert_allclose(M, M.T, rtol=1e-14)
    off = np.abs(M).sum(axis=1) - np.abs(np.diag(M))
    assert np.all(np.diag(M) >= off - 1e-12 * np.diag(M))
    # rows touching the boundary are strictly dominant
    s = g.s
    j, i = np.divmod(np.arange(g.n), s)
    edge = (i == 0) | (i == s - 1) | (j == 0) | (j == s - 1)
    assert np.all(np.diag(M)[edge] > off[edge])
    assert np.all(np.linalg.eigvalsh(M) > 0)


def test_heat_constant_shift_scales_solution(rng):
    g = Grid2D(9)
    u = rng.standard_normal(g.n)
    p0 = heat2d_solve(u, g)
    p1 = heat2d_solve(u + 0.7, g)
    np.testing.assert_allclose(p1, np.exp(-0.7) * p0, rtol=1e-12)
    # div(grad p) = 1 with zero boundary gives a negative interior solution
    assert np.all(p0 < 0)


def test_heat_center_against_fine_grid():
    coarse, fine = Grid2D(47), Grid2D(191)
    pc = heat2d_solve(np.zeros(coarse.n), coarse)[coarse.center_index()]
    pf = heat2d_solve(np.zeros(fine.n), fine)[fine.center_index()]
    assert abs(pc - pf) / abs(pf) <= 1e-3


def test_heat_harmonic_equals_arithmetic_for_constant():
    g = Grid2D(5)
    u = np.full(g.n, 0.3)
    np.testing.assert_allclose(heat2d_forward(u, g, mean="harmonic"), heat2d_forward(u, g),
                               rtol=1e-13)


def test_heat_rejects_nonfinite():
    g = Grid2D(3)
    with pytest.raises(ValueError):
        heat2d_matrix(np.full(g.n, np.nan), g)


# ---------------------------------------------------------------- priors

def test_laplacian_prior_symmetry_and_variance():
    g = Grid2D(8)
    prior = laplacian_sq_prior(g)
    C = prior.dense_cov()
    np.testing.assert_allclose(C, C.T, rtol=1e-13)
    L = dirichlet_laplacian(g).toarray()
    np.testing.assert_allclose(L @ L @ C, np.eye(g.n), atol=1e-8)
    draws = prior.sample(np.random.default_rng(3), 20000)
    var = draws.var(axis=1)
    np.testing.assert_allclose(var, np.diag(C), rtol=0.06)


def test_laplacian_prior_smoothness():
    g = Grid2D(30)
    prior = laplacian_sq_prior(g)
    rng = np.random.default_rng(0)
    L = prior.L
    smooth = prior.sample(rng, 100)
    white = rng.standard_normal((g.n, 100))
    rough = np.median(np.linalg.norm(L @ smooth, axis=0)) / np.median(np.linalg.norm(L @ white, axis=0))
    assert rough < 0.05
    # per unit amplitude the gap is smaller but still clear
    ratio = lambda X: np.median(np.linalg.norm(L @ X, axis=0) / np.linalg.norm(X, axis=0))  # noqa: E731
    assert ratio(smooth) < 0.2 * ratio(white)


# ---------------------------------------------------------------- noise

def test_add_noise_properties():
    d = np.linspace(1.0, 3.0, 10000)
    np.testing.assert_array_equal(add_noise(d, 0.0, 1), d)
    a, b = add_noise(d, 0.02, 5), add_noise(d, 0.02, 5)
    np.testing.assert_array_equal(a, b)
    target = 0.02 * np.sqrt(np.mean(d ** 2))
    assert np.std(a - d) == pytest.approx(target, rel=0.02)
    with pytest.raises(ValueError):
        add_noise(d, -0.1)


# ---------------------------------------------------------------- builders

@pytest.mark.parametrize("name,kw", [("deconv", {"n": 40, "N": 6}),
                                     ("lorenz96", {"n": 20, "m": 20, "N": 6}),
                                     ("heat2d", {"s": 6, "m": 10, "N": 5})])
def test_builders_shapes_and_determinism(name, kw):
    p1 = BUILDERS[name](seed=4, **kw)
    p2 = BUILDERS[name](seed=4, **kw)
    assert p1.d.shape == (p1.G.m,)
    assert p1.initial.n == p1.G.n
    assert p1.noise.m == p1.G.m
    np.testing.assert_array_equal(p1.d, p2.d)
    np.testing.assert_array_equal(p1.initial.particles, p2.initial.particles)
    p3 = BUILDERS[name](seed=5, **kw)
    assert not np.array_equal(p1.d, p3.d)


def test_builder_flags():
    assert deconvolution(n=20, N=4).linear
    assert not lorenz96(n=10, m=10, N=4).linear
    assert not heat2d(s=4, m=5, N=3).linear

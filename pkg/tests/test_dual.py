import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import spd
from enki.dual import (LinearProblem, PerturbationDraw, SingularCovarianceError, draw_perturbations,
                       enkf_update, exact_draw, induced_primal_saa, kkt_residuals, map_from_dual,
                       saa_dual_solve, solve_dual_lambda, solve_map_dual, solve_map_primal)


def random_problem(rng, n=6, m=4):
    return LinearProblem(rng.standard_normal((m, n)), rng.standard_normal(n), spd(rng, n),
                         spd(rng, m), rng.standard_normal(m))


def test_scalar_map_hand_value():
    # A=1, C=1, Sigma=1, u0=0, d=2 -> MAP 1, lambda -1
    p = LinearProblem([[1.0]], [0.0], [[1.0]], [[1.0]], [2.0])
    assert solve_map_primal(p) == pytest.approx([1.0])
    assert solve_dual_lambda(p) == pytest.approx([-1.0])
    assert map_from_dual(p, solve_dual_lambda(p)) == pytest.approx([1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_primal_dual_agree(seed):
    p = random_problem(np.random.default_rng(seed))
    up, ud = solve_map_primal(p), solve_map_dual(p)
    assert np.linalg.norm(up - ud) <= 1e-8 * np.linalg.norm(up)


def test_kkt_closure(rng):
    p = random_problem(rng, 8, 5)
    assert max(kkt_residuals(p, solve_dual_lambda(p))) <= 1e-8


def test_singular_prior_routes_to_dual(rng):
    n = 4
    A = rng.standard_normal((3, n))
    v = rng.standard_normal(n)
    C = np.outer(v, v)
    p = LinearProblem(A, np.zeros(n), C, np.eye(3), rng.standard_normal(3))
    with pytest.raises(SingularCovarianceError, match="solve_map_dual"):
        solve_map_primal(p)
    u = solve_map_dual(p)
    # a rank-one prior keeps the update on span(v)
    assert np.linalg.norm(u - (u @ v) / (v @ v) * v) < 1e-12


def test_dimension_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        LinearProblem(np.ones((2, 3)), np.zeros(2), np.eye(3), np.eye(2), np.zeros(2))


def test_exact_draw_reproduces_prior(rng):
    p = random_problem(rng)
    draw = exact_draw(p, 10)
    O = draw.Omega
    assert np.allclose(O @ O.T, p.C, atol=1e-12)
    assert np.allclose(draw.delta_bar, 0, atol=1e-13)


def test_saa_equals_exact_dual_for_exact_draw(rng):
    p = random_problem(rng)
    lam_bar = saa_dual_solve(p, exact_draw(p, 9))
    assert np.allclose(lam_bar, solve_dual_lambda(p), atol=1e-10)
    assert np.allclose(induced_primal_saa(p, lam_bar), solve_map_dual(p), atol=1e-10)


def test_enkf_particle_loop_oracle(rng):
    p = random_problem(rng, 5, 3)
    draw = draw_perturbations(p, 7, rng)
    res = enkf_update(p, draw)
    O = draw.Omega
    K = O @ O.T @ p.A.T @ np.linalg.inv(p.Sigma + p.A @ O @ O.T @ p.A.T)
    for i in range(7):
        prior = p.u0 + draw.deltas[:, i]
        expect = prior + K @ (p.d + draw.sigmas[:, i] - p.A @ prior)
        assert np.allclose(res.particles[:, i], expect, atol=1e-11)


def test_enkf_mean_has_dual_form(rng):
    p = random_problem(rng, 6, 4)
    draw = draw_perturbations(p, 5, rng)
    lam_bar = saa_dual_solve(p, draw)
    O = draw.Omega
    expected = p.u0 + draw.delta_bar - O @ O.T @ p.A.T @ lam_bar
    assert np.allclose(enkf_update(p, draw).mean, expected, atol=1e-12)


def test_zero_omega_leaves_prior_mean(rng):
    p = random_problem(rng, 4, 3)
    draw = PerturbationDraw(np.zeros((4, 3)), np.zeros((3, 3)))
    assert np.allclose(enkf_update(p, draw).mean, p.u0)

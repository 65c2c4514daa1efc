import numpy as np
import pytest

from enki.core import Ensemble, LinearOperator, NoiseModel, NonlinearOperator, forward_stats
from enki.iteration import (DivergenceError, EnkiState, History, Termination, enki_step,
                            history_csv, kalman_update, misfit_loss, relative_change, run, spread,
                            subspace_residual)


def linear_setup(rng, n=12, m=8, N=6, mu=0.05):
    A = rng.standard_normal((m, n))
    G = LinearOperator(A)
    U = rng.standard_normal((n, N))
    d = A @ rng.standard_normal(n)
    return A, G, Ensemble(U), d, NoiseModel(mu, m)


def dense_step(A, U, d, mu, alpha):
    Um = U.mean(axis=1, keepdims=True)
    C = (U - Um) @ (U - Um).T / U.shape[1]
    K = alpha * C @ A.T @ np.linalg.inv(mu * np.eye(A.shape[0]) + alpha * A @ C @ A.T)
    return U + K @ (d[:, None] - A @ U)


@pytest.mark.parametrize("alpha", [1.0, 3.7])
def test_step_matches_dense_formula(rng, alpha):
    A, G, e, d, noise = linear_setup(rng)
    new = enki_step(EnkiState.initial(e), G, noise, d, alpha)
    np.testing.assert_allclose(new.ensemble.particles, dense_step(A, e.particles, d, noise.mu, alpha),
                               rtol=1e-11, atol=1e-11)
    assert new.k == 1


def test_gain_identity_alpha_vs_scaled_noise(rng):
    _, G, e, d, noise = linear_setup(rng)
    a = 6.25
    s0 = EnkiState.initial(e)
    one = enki_step(s0, G, noise, d, a).ensemble.particles
    two = enki_step(s0, G, NoiseModel(noise.mu / a, noise.m), d, 1.0).ensemble.particles
    np.testing.assert_allclose(one, two, rtol=0, atol=1e-12 * np.abs(one).max())


def test_collapsed_ensemble_is_fixed(rng):
    _, G, _, d, noise = linear_setup(rng)
    u = rng.standard_normal(12)
    e = Ensemble(np.tile(u[:, None], (1, 5)))
    new = enki_step(EnkiState.initial(e), G, noise, d)
    np.testing.assert_array_equal(new.ensemble.particles, e.particles)
    assert new.k == 1


def test_per_particle_alpha_equal_values_match_scalar(rng):
    _, G, e, d, noise = linear_setup(rng)
    st = forward_stats(e, G)
    a = kalman_update(e.particles, st, noise, d, 2.5)
    b = kalman_update(e.particles, st, noise, d, np.full(e.N, 2.5))
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    with pytest.raises(ValueError):
        kalman_update(e.particles, st, noise, d, np.ones(e.N + 1))
    with pytest.raises(ValueError):
        kalman_update(e.particles, st, noise, d, 0.0)


def test_per_particle_alpha_uses_own_gain(rng):
    _, G, e, d, noise = linear_setup(rng)
    st = forward_stats(e, G)
    alphas = np.array([1.0, 2.0, 2.0, 5.0, 1.0, 9.0])
    out = kalman_update(e.particles, st, noise, d, alphas)
    for i, a in enumerate(alphas):
        ref = kalman_update(e.particles, st, noise, d, float(a))
        np.testing.assert_allclose(out[:, i], ref[:, i], rtol=1e-12, atol=1e-12)


def test_misfit_loss_values(rng):
    A, G, _, d, noise = linear_setup(rng, mu=0.01)
    u = rng.standard_normal(12)
    r = d - A @ u
    assert misfit_loss(u, G, noise, d) == pytest.approx(0.5 * sum(x * x for x in r) / 0.01, rel=1e-13)
    G1 = LinearOperator(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert misfit_loss(np.array([1.0, 1.0]), G1, NoiseModel(0.01, 2), np.array([2.0, 0.0])) \
        == pytest.approx(100.0)
    assert misfit_loss(u, G, noise, A @ u) == 0.0


def test_subspace_residual_cases(rng):
    U = rng.standard_normal((10, 3))
    e = Ensemble(U)
    assert subspace_residual(U[:, 0], e) <= 1e-12
    Q, _ = np.linalg.qr(np.column_stack([U, rng.standard_normal(10)]))
    assert subspace_residual(Q[:, 3], e) == pytest.approx(1.0, abs=1e-12)


def test_spread_cases(rng):
    u = rng.standard_normal(7)
    assert spread(Ensemble(np.tile(u[:, None], (1, 4)))) == 0.0
    v = rng.standard_normal(7)
    v /= np.linalg.norm(v)
    signs = np.array([1.0, -1.0, 1.0, -1.0])
    e = Ensemble(u[:, None] + v[:, None] * signs)
    # deviations have norm 1 each -> C = v v^T, spectral norm 1
    assert spread(e) == pytest.approx(1.0, rel=1e-12)
    U = rng.standard_normal((7, 5))
    C = np.cov(U, bias=True)
    assert spread(Ensemble(U)) == pytest.approx(np.linalg.eigvalsh(C)[-1], rel=1e-12)


def test_run_single_step_cap(rng):
    _, G, e, d, noise = linear_setup(rng)
    res = run(e, G, noise, d, Termination(1e-30, 1))
    assert res.iterations == 1 and res.stop_reason == "max_iter"
    assert len(res.history) == 1
    assert res.forward_evals == e.N * 2


def test_run_converged_initial_stops_at_one(rng):
    _, G, _, d, noise = linear_setup(rng)
    e = Ensemble(np.tile(rng.standard_normal(12)[:, None], (1, 4)))
    res = run(e, G, noise, d, Termination(1e-5, 100))
    assert res.iterations == 1 and res.stop_reason == "converged"
    assert res.history[0]["rel_change"] == 0.0


def test_run_history_and_subspace(rng):
    A, G, e, d, noise = linear_setup(rng, n=20, m=10, N=5)
    truth = rng.standard_normal(20)
    res = run(e, G, noise, d, Termination(1e-6, 300), truth=truth, track_subspace=True)
    assert len(res.history) == res.iterations == res.state.k
    assert res.subspace_max <= 1e-8
    loss = res.history.column("loss")
    assert loss[-1] < loss[0]
    sp = res.history.column("spread")
    assert sp[-1] < spread(e)
    for col in ("k", "loss", "rel_change", "spread", "alpha", "rel_error_vs_truth"):
        assert col in res.history[0]


def test_history_snapshots_are_immutable(rng):
    _, G, e, d, noise = linear_setup(rng)
    seen = []
    run(e, G, noise, d, Termination(1e-30, 5), observer=lambda s: seen.append(s))
    assert [len(s.history) for s in seen] == [1, 2, 3, 4, 5]
    assert [s.k for s in seen] == [1, 2, 3, 4, 5]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    def bad(u):
        return np.array([np.inf if u[0] > 0 else 0.0, 0.0])
    G = NonlinearOperator(bad, 2, 2)
    e = Ensemble(np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 0.5]]))
    with pytest.raises(DivergenceError, match="divergence detected at iteration 1"):
        run(e, G, NoiseModel(0.1, 2), np.zeros(2), Termination())


def test_termination_validation():
    with pytest.raises(ValueError):
        Termination(0.0)
    with pytest.raises(ValueError):
        Termination(1e-5, 0)


def test_relative_change_and_csv(rng):
    a = Ensemble(rng.standard_normal((4, 3)))
    assert relative_change(a, a) == 0.0
    h = History([{"k": 1, "loss": 0.1, "rel_change": 1 / 3, "spread": 2.0, "alpha": 1.0}])
    text = history_csv(h)
    lines = text.split("\r\n")
    assert lines[0] == "k,loss,rel_change,spread,alpha"
    assert lines[1] == "1,0.10000000000000001,0.33333333333333331,2,1"

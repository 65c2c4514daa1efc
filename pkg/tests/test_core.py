import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from enki.core import (Ensemble, ForwardMapError, GaussianMeasure, LinearOperator, NoiseModel,
                       NonlinearOperator, ensemble_forward_stats, psd_sqrt, sample_covariance,
                       sample_mean)


def test_mean_and_covariance_loop_oracle(rng):
    U = rng.standard_normal((4, 7))
    e = Ensemble(U)
    mean = sum(U[:, i] for i in range(7)) / 7
    cov = sum(np.outer(U[:, i] - mean, U[:, i] - mean) for i in range(7)) / 7
    assert np.allclose(sample_mean(e), mean, atol=1e-14)
    assert np.allclose(sample_covariance(e), cov, atol=1e-14)


def test_deviation_factor_reproduces_covariance(rng):
    e = Ensemble(rng.standard_normal((5, 3)))
    D = e.deviation_factor()
    assert np.allclose(D @ D.T, e.covariance())
    assert np.allclose(D.sum(axis=1), 0, atol=1e-14)


def test_single_particle_has_zero_covariance():
    e = Ensemble(np.array([1.0, 2.0, 3.0]))
    assert e.N == 1
    assert np.all(e.covariance() == 0)


def test_ensemble_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError, match="empty ensemble"):
        Ensemble(np.zeros((3, 0)))
    with pytest.raises(ValueError):
        Ensemble(np.array([[1.0, np.nan]]))


def test_ensemble_is_immutable(rng):
    e = Ensemble(rng.standard_normal((2, 2)))
    with pytest.raises(ValueError):
        e.particles[0, 0] = 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 6), elements=st.floats(-3, 3)))
def test_psd_sqrt_squares_back(X):
    C = X @ X.T
    R = psd_sqrt(C)
    assert np.allclose(R, R.T)
    assert np.allclose(R @ R, C, atol=1e-8 * max(1.0, np.abs(C).max()))


def test_gaussian_measure_validation():
    with pytest.raises(ValueError, match="symmetric"):
        GaussianMeasure(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="semi-definite"):
        GaussianMeasure(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_gaussian_measure_sampling_moments():
    C = np.array([[2.0, 0.6], [0.6, 1.0]])
    g = GaussianMeasure(np.array([1.0, -1.0]), C)
    X = g.sample(np.random.default_rng(0), 200_000)
    assert np.allclose(X.mean(axis=1), [1.0, -1.0], atol=0.02)
    assert np.allclose(np.cov(X), C, atol=0.03)


def test_noise_model_requires_positive_mu():
    with pytest.raises(ValueError):
        NoiseModel(0.0, 3)
    assert np.allclose(NoiseModel(0.5, 2).cov, 0.5 * np.eye(2))


def test_forward_stats_linear_matches_dense(rng):
    A = rng.standard_normal((3, 5))
    e = Ensemble(rng.standard_normal((5, 8)))
    C_up, C_pp, gbar = ensemble_forward_stats(e, LinearOperator(A))
    C = e.covariance()
    assert np.allclose(C_up, C @ A.T)
    assert np.allclose(C_pp, A @ C @ A.T)
    assert np.allclose(gbar, A @ e.mean())


def test_forward_map_error_names_particle():
    def f(u):
        if u[0] > 0.5:
            raise RuntimeError("boom")
        return u * 2
    G = NonlinearOperator(f, 2, 2)
    U = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(ForwardMapError) as exc:
        G.apply_ensemble(U)
    assert exc.value.index == 1

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srmpc.acceptance import kalman_oracle, random_lq
from srmpc.benchmarks import LinearQuadraticModel, MotivatingExample
from srmpc.errors import InputError
from srmpc.estimator import (NoiseSpec, as_covariance, ekf_cov_update, ekf_mean_update,
                             predict_variance_sequence)


def scalar(A=1.0, C=1.0):
    return LinearQuadraticModel([[A]], [[1.0]], [[C]], [[1.0]], [[1.0]])


def noise(W, V):
    return NoiseSpec(np.atleast_2d(W), np.atleast_2d(V), 4.0)


def test_mean_update_scalar_closed_form():
    assert ekf_mean_update(scalar(), None, [0.0], [0.0], [[1.0]], [1.0], noise(0, 1))[0] == pytest.approx(0.5)


def test_mean_update_zero_innovation_and_zero_variance(rng):
    model = MotivatingExample(0.1)
    y, u = rng.normal(size=2), rng.normal(size=2)
    nz = noise(np.zeros((2, 2)), 0.1)
    np.testing.assert_allclose(ekf_mean_update(model, y, u, y, np.eye(2), model.h(y), nz), model.f(y, u))
    np.testing.assert_allclose(ekf_mean_update(model, y, u, y, np.zeros((2, 2)), [5.0], nz), model.f(y, u))


def test_cov_update_scalar_cases():
    assert ekf_cov_update(scalar(2.0, 0.0), [0.0], [0.0], [[1.0]], noise(1, 1))[0, 0] == pytest.approx(5.0)
    assert ekf_cov_update(scalar(), [0.0], [0.0], [[1.0]], noise(0, 1))[0, 0] == pytest.approx(0.5)


def test_matches_kalman_filter_oracle(rng):
    for _ in range(3):
        model = random_lq(rng)
        W = 0.05 * np.eye(model.n_x)
        V = 0.2 * np.eye(model.n_h)
        nz = NoiseSpec.from_covariances(W, V)
        ref = kalman_oracle(model.A, model.C, W, V, np.eye(model.n_x), 100)
        S = np.eye(model.n_x)
        for k in range(100):
            S = ekf_cov_update(model, rng.normal(size=model.n_x), rng.normal(size=model.n_u), S, nz)
            np.testing.assert_allclose(S, ref[k + 1], rtol=0, atol=1e-12 * (1 + np.abs(ref[k + 1]).max()))


def test_variance_sequence_is_composition_of_updates(rng):
    model = random_lq(rng, nx=3, nu=2, ny=1)
    nz = NoiseSpec.from_covariances(0.01 * np.eye(3), np.eye(1))
    x, u = rng.normal(size=(9, 3)), rng.normal(size=(8, 2))
    seq = predict_variance_sequence(model, x, u, np.eye(3), nz)
    S = np.eye(3)
    for k in range(8):
        S = ekf_cov_update(model, x[k], u[k], S, nz)
        np.testing.assert_array_equal(seq[k + 1], S)


def test_empty_plan_returns_initial_variance():
    seq = predict_variance_sequence(scalar(), [[0.0]], np.zeros((0, 1)), [[2.0]], noise(0, 1))
    np.testing.assert_array_equal(seq, [[[2.0]]])
    with pytest.raises(InputError):
        predict_variance_sequence(scalar(), [[0.0]], np.zeros((1, 1)), [[2.0]], noise(0, 1))


def test_unobservable_state_variance_grows_without_excitation():
    model = MotivatingExample(0.05)
    nz = NoiseSpec.from_covariances(1e-4 * np.eye(2), 0.01 * np.eye(1))
    x = np.tile([0.5, 0.5], (51, 1))
    seq = predict_variance_sequence(model, x, np.zeros((50, 2)), 0.1 * np.eye(2), nz)
    assert np.all(np.diff(seq[:, 0, 0]) > 0)


def test_noise_spec_validation():
    with pytest.raises(InputError):
        NoiseSpec(np.eye(2), [[1.0, 2.0], [0.0, 1.0]], 1.0)
    with pytest.raises(InputError):
        NoiseSpec(-np.eye(2), np.eye(1), 1.0)
    with pytest.raises(InputError):
        NoiseSpec(np.eye(2), np.eye(1), 0.0)
    with pytest.warns(UserWarning):
        NoiseSpec(4 * np.eye(2), np.eye(1), 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        nz = NoiseSpec.from_covariances(np.diag([0.01, 0.04]), [[0.5]])
    assert nz.gamma_w == pytest.approx(0.8) and nz.gamma == pytest.approx(4 * np.sqrt(0.5))


def test_scaled_noise():
    nz = NoiseSpec.from_covariances(np.eye(2), [[0.25]]).scaled(0.5)
    np.testing.assert_allclose(nz.W, 0.25 * np.eye(2))
    assert nz.gamma_w == pytest.approx(2.0) and nz.gamma_v == pytest.approx(1.0)


def test_as_covariance_symmetrizes_and_rejects():
    S = as_covariance([[1.0, 0.2], [0.2 + 1e-14, 1.0]])
    np.testing.assert_array_equal(S, S.T)
    with pytest.raises(InputError):
        as_covariance([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(InputError):
        as_covariance(np.eye(3), n=2)


psd_seed = arrays(np.float64, (3, 3), elements=st.floats(-2, 2))


@given(psd_seed, psd_seed, st.floats(0.0, 1.0), st.floats(0.01, 2.0))
def test_cov_update_stays_symmetric_and_above_process_noise(G, H, w, v):
    model = MotivatingExample(0.1)
    Sigma = G @ G.T
    W = w * np.eye(2)
    nz = NoiseSpec(W, [[v]], 4.0)
    out = ekf_cov_update(model, H[0, :2], H[1, :2], Sigma[:2, :2], nz)
    np.testing.assert_array_equal(out, out.T)
    assert np.linalg.eigvalsh(out - W).min() >= -1e-10 * max(1.0, np.abs(out).max())

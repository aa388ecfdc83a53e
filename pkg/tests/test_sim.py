from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srmpc.acceptance import lq_validation_model, motivating_failure_setup, riccati_oracle
from srmpc.benchmarks import MotivatingExample
from srmpc.errors import ConfigError, InputError
from srmpc.estimator import NoiseSpec
from srmpc.sim import (SimConfig, noise_streams, run_cascade_nominal, run_closed_loop, run_self_reflective,
                       sample_bounded_noise)


def test_zero_covariance_gives_zero_samples():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(sample_bounded_noise(np.zeros((2, 2)), 0.0, rng, 5), np.zeros((5, 2)))


def test_truncation_bias_is_small():
    s = sample_bounded_noise([[1.0]], 4.0, np.random.default_rng(1), 100_000)
    assert 0.95 <= s.var() <= 1.05
    assert np.abs(s).max() <= 4.0


def test_samples_stay_in_support_for_case_study_scaling():
    delta = 0.01
    W = delta * np.diag([0.01, 0.01, 0.025])
    nz = NoiseSpec.from_covariances(W, [[1 / delta]])
    s = sample_bounded_noise(nz.W, nz.gamma_w, np.random.default_rng(2), 5000)
    assert np.linalg.norm(s, axis=1).max() <= nz.gamma_w


def test_tiny_support_is_a_configuration_error():
    with pytest.raises(ConfigError):
        sample_bounded_noise(np.eye(3), 0.01, np.random.default_rng(0), 10)


@given(st.floats(0.01, 10.0), st.integers(0, 1000))
def test_scaling_covariance_and_radius_scales_samples(s, seed):
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    a = sample_bounded_noise(cov, 3.0, np.random.default_rng(seed), 20)
    b = sample_bounded_noise(s**2 * cov, 3.0 * s, np.random.default_rng(seed), 20)
    np.testing.assert_allclose(b, s * a, atol=1e-12 * s)


def test_streams_are_independent_per_trial():
    a = [g.standard_normal() for g in noise_streams(5, 0)]
    b = [g.standard_normal() for g in noise_streams(5, 1)]
    assert len(set(a)) == 3 and a != b
    assert a == [g.standard_normal() for g in noise_streams(5, 0)]


def test_noise_free_lq_loop_is_lqr():
    model = lq_validation_model()
    nz = NoiseSpec(np.zeros((2, 2)), [[0.1]], 1.0)
    x0 = np.array([1.0, -0.5])
    N = 12
    cfg = SimConfig(steps=N, x0_star=x0, y0=x0, Sigma0=np.zeros((2, 2)), shrinking=True, plant_noise=False,
                    tol=1e-12)
    trace = run_cascade_nominal(model, nz, cfg)
    _, K = riccati_oracle(model.A, model.B, model.Q, model.R, model.Pf, N)
    x = x0
    for k in range(N):
        u = -K[k] @ x
        np.testing.assert_allclose(trace.u[k], u, atol=1e-8)
        x = model.A @ x + model.B @ u
    np.testing.assert_allclose(trace.z[-1], x, atol=1e-8)


def test_measurements_and_determinism():
    model, nz, base = motivating_failure_setup()
    cfg = replace(base, steps=80, seed=4)
    a, b = run_closed_loop(model, nz, cfg), run_closed_loop(model, nz, cfg)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.eta, model.h(a.z[:-1]) + a.v)


def test_alpha_zero_self_reflective_equals_nominal():
    model, nz, base = motivating_failure_setup()
    cfg = replace(base, steps=40, seed=2)
    nom = run_cascade_nominal(model, nz, cfg)
    sr = run_self_reflective(model, nz, replace(cfg, controller="self_reflective", alpha=0.0))
    np.testing.assert_allclose(sr.u, nom.u, atol=1e-12)


def test_motivating_example_nominal_cascade_diverges():
    model, nz, base = motivating_failure_setup()
    trace = run_cascade_nominal(model, nz, replace(base, seed=0))
    assert trace.diverged and trace.steps < 1000
    assert np.linalg.norm(trace.z[-1]) > base.divergence_bound or trace.divergence_reason


def test_config_validation():
    kw = dict(x0_star=[0, 0], y0=[0, 0], Sigma0=np.eye(2))
    with pytest.raises(InputError):
        SimConfig(steps=0, **kw)
    with pytest.raises(InputError):
        SimConfig(steps=5, controller="pid", **kw)
    with pytest.raises(InputError):
        SimConfig(steps=5, alpha=-1.0, **kw)
    with pytest.raises(InputError):
        run_self_reflective(MotivatingExample(0.1), NoiseSpec.from_covariances(np.eye(2), [[1.0]]),
                            SimConfig(steps=5, **kw))
    with pytest.raises(InputError):
        run_closed_loop(MotivatingExample(0.1), NoiseSpec.from_covariances(np.eye(2), [[1.0]]),
                        SimConfig(steps=5, x0_star=[0, 0, 0], y0=[0, 0, 0], Sigma0=np.eye(3)))

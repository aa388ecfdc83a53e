from dataclasses import replace

import numpy as np
import pytest

from srmpc import loss
from srmpc.acceptance import (LQ_SIGMA0, LQ_STEPS, LQ_Y0, MV_SIGMA0, MV_STEPS, MV_Y0, lq_validation_model,
                              lq_validation_noise, motivating_variant, motivating_variant_noise)
from srmpc.benchmarks import LinearQuadraticModel, MotivatingExample
from srmpc.errors import InputError
from srmpc.estimator import NoiseSpec
from srmpc.riccati import sweep_arrays
from srmpc.sim import SimConfig, run_closed_loop
from test_ocp import condensed_qp


def loss_cfg(y0, Sigma0, steps, seed=0, **kw):
    return SimConfig(steps=steps, x0_star=y0, y0=y0, Sigma0=Sigma0, shrinking=True, sample_initial_error=True,
                     tol=1e-10, max_iter=100, seed=seed, **kw)


@pytest.fixture(scope="module")
def lq_trace():
    model = lq_validation_model()
    return model, run_closed_loop(model, lq_validation_noise(0.01), loss_cfg(LQ_Y0, LQ_SIGMA0, LQ_STEPS, seed=3))


def test_utopian_cost_trivial_and_affine_oracle(rng):
    model = lq_validation_model()
    assert loss.utopian_cost(model, [0.0, 0.0], np.zeros((5, 2))) == 0.0
    x0, w = rng.normal(size=2), 0.2 * rng.normal(size=(8, 2))
    u = condensed_qp(model, x0, w)
    x = [x0]
    for k in range(8):
        x.append(model.f(x[-1], u[k]) + w[k])
    ref = float(sum(model.l(x[k], u[k]) for k in range(8)) + model.m(x[-1]))
    assert loss.utopian_cost(model, x0, w) == pytest.approx(ref, rel=1e-10)


def test_utopia_dominates_closed_loop(lq_trace):
    model, trace = lq_trace
    assert loss.utopian_cost(model, trace.z[0], trace.w) <= loss.closed_loop_cost(model, trace) + 1e-10


def test_lq_stage_loss_is_exact_quadratic():
    # exact only without process noise: the clairvoyant tail also knows future disturbances
    model = lq_validation_model()
    trace = run_closed_loop(model, lq_validation_noise(0.0), loss_cfg(LQ_Y0, LQ_SIGMA0, LQ_STEPS, seed=3))
    Phi = sweep_arrays(model, trace.z, trace.u).Phi
    for k in (0, 4, 9):
        e = trace.y[k] - trace.z[k]
        assert loss.stage_loss(model, trace, k) == pytest.approx(0.5 * e @ Phi[k] @ e, rel=1e-6, abs=1e-10)


def test_perfect_information_has_no_loss():
    model = MotivatingExample(0.1)
    nz = NoiseSpec(np.zeros((2, 2)), [[0.05]], 1.0)
    cfg = SimConfig(steps=12, x0_star=[0.5, 0.5], y0=[0.5, 0.5], Sigma0=np.zeros((2, 2)), shrinking=True,
                    plant_noise=False, tol=1e-10, initial_control=0.1)
    trace = run_closed_loop(model, nz, cfg)
    rep = loss.loss_decomposition(model, trace)
    assert abs(rep.delta_total) <= 1e-8
    assert np.abs(rep.delta_stages).max() <= 1e-8
    assert loss.stage_loss(model, trace, 0) == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("which", ["lq", "nonlinear"])
def test_telescoping_and_non_negativity(which):
    if which == "lq":
        model, nz = lq_validation_model(), lq_validation_noise(0.01)
        base = loss_cfg(LQ_Y0, LQ_SIGMA0, LQ_STEPS)
    else:
        model, nz = MotivatingExample(0.1), NoiseSpec.from_covariances(1e-3 * np.eye(2), 0.05 * np.eye(1))
        base = loss_cfg(MV_Y0, 0.1 * np.eye(2), MV_STEPS, initial_control=0.1)
    for seed in range(5):
        rep = loss.loss_decomposition(model, run_closed_loop(model, nz, replace(base, seed=seed)))
        assert rep.telescoping_gap <= 1e-6 * (1 + abs(rep.delta_total))
        assert rep.delta_stages.min() >= -1e-6 and rep.delta_total >= -1e-6
    assert set(rep.to_dict()) >= {"J_star", "J_cl", "delta_total", "delta_stages", "telescoping_gap"}


def test_second_order_estimate_scalar_closed_form():
    a, b, q, r, c, v, s0, N = 1.2, 1.0, 1.0, 2.0, 1.0, 0.5, 0.3, 6
    model = LinearQuadraticModel([[a]], [[b]], [[c]], [[q]], [[r]], Pf=[[q]])
    nz = NoiseSpec(np.zeros((1, 1)), [[v]], 4.0)
    plan = loss.nominal_plan(model, [1.0], N)
    total, stages = loss.second_order_estimate(model, plan, [[s0]], nz)
    P, sig, ref = q, s0, []
    phis = []
    for _ in range(N):
        phis.append((b * P * a) ** 2 / (r + b * P * b))
        P = q + a * P * a - phis[-1]
    phis.reverse()
    for k in range(N):
        ref.append(0.5 * phis[k] * sig)
        sig = a * (sig - sig * c * c * sig / (c * sig * c + v)) * a
    np.testing.assert_allclose(stages, ref, rtol=1e-12)
    assert total == pytest.approx(sum(ref))
    zero = NoiseSpec(np.zeros((1, 1)), [[v]], 4.0)
    assert loss.second_order_estimate(model, plan, [[0.0]], zero)[0] == 0.0


def test_monte_carlo_vanishes_with_noise_and_is_non_negative():
    model, nz = motivating_variant(), motivating_variant_noise()
    base = loss_cfg(MV_Y0, MV_SIGMA0, MV_STEPS)
    big = loss.monte_carlo_loss(model, "nominal", nz, 20, 1, base)
    tiny = loss.monte_carlo_loss(model, "nominal", nz.scaled(1e-3), 20, 1, replace(base, Sigma0=1e-6 * MV_SIGMA0))
    assert tiny.mean < 1e-4 * big.mean
    assert np.all(big.samples >= -1e-6) and big.failures == 0
    with pytest.raises(InputError):
        loss.monte_carlo_loss(model, "nominal", nz, 1, 0, base)


def test_lq_monte_carlo_agrees_with_estimate():
    model, nz = lq_validation_model(), lq_validation_noise()
    base = loss_cfg(LQ_Y0, LQ_SIGMA0, LQ_STEPS)
    mc = loss.monte_carlo_loss(model, "nominal", nz, 400, 9, base)
    est = loss.second_order_estimate(model, loss.nominal_plan(model, LQ_Y0, LQ_STEPS), LQ_SIGMA0, nz)[0]
    assert abs(mc.mean - est) <= 3 * mc.stderr


def test_lq_gap_is_statistically_zero_at_all_levels():
    model, nz = lq_validation_model(), lq_validation_noise()
    study = loss.gamma_scaling_study(model, "nominal", nz, [1.0, 0.5, 0.25], 200, 4,
                                     loss_cfg(LQ_Y0, LQ_SIGMA0, LQ_STEPS))
    assert study.below_noise_floor
    assert all(r.gap <= 3 * r.mc_stderr for r in study.rows)
    # common random numbers: the same draws scaled, so the loss scales exactly as s^2
    ratios = [r.mc_mean / s**2 for r, s in zip(study.rows, (1.0, 0.5, 0.25))]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-6)


def test_scaling_study_validates_levels():
    model, nz = lq_validation_model(), lq_validation_noise()
    base = loss_cfg(LQ_Y0, LQ_SIGMA0, LQ_STEPS)
    for levels in ([1.0, 0.5], [1.0, 0.5, 0.5], [1.0, 0.5, -0.1]):
        with pytest.raises(InputError):
            loss.gamma_scaling_study(model, "nominal", nz, levels, 10, 0, base)


def test_hessian_gap_lq_and_flat_stage(lq_trace):
    model, trace = lq_trace
    gap, Gamma, Phi = loss.hessian_gap_check(model, trace, 2)
    assert gap <= 1e-4
    flat = LinearQuadraticModel([[1.0, 0.0], [0.0, 0.5]], np.zeros((2, 1)), [[1.0, 0.0]], np.eye(2), np.eye(1))
    nz = NoiseSpec.from_covariances(0.01 * np.eye(2), [[0.1]])
    t2 = run_closed_loop(flat, nz, loss_cfg(LQ_Y0, LQ_SIGMA0, 5))
    gap, Gamma, Phi = loss.hessian_gap_check(flat, t2, 1)
    assert not Phi.any() and np.abs(Gamma).max() <= 1e-6


def test_hessian_gap_shrinks_with_noise():
    model, nz = motivating_variant(), motivating_variant_noise()
    base = loss_cfg(MV_Y0, MV_SIGMA0, MV_STEPS, seed=1)
    gaps = []
    for s in (0.5, 0.25):
        trace = run_closed_loop(model, nz.scaled(s), replace(base, Sigma0=s**2 * MV_SIGMA0))
        gaps.append(loss.hessian_gap_check(model, trace, 3)[0])
    assert 0.3 <= gaps[1] / gaps[0] <= 0.8


def test_stage_loss_independent_of_early_measurement_sign():
    """To second order the expected decision loss does not depend on earlier measurement outcomes."""
    model, nz = motivating_variant(), motivating_variant_noise()
    s = 0.25
    base = replace(loss_cfg(MV_Y0, s**2 * MV_SIGMA0, MV_STEPS), controller="nominal")
    lcfg = loss.LossConfig()
    k = 3
    pos, neg = [], []
    for trial in range(300):
        _, trace = loss.loss_sample(model, nz.scaled(s), base, 21, trial, lcfg)
        (pos if trace.v[0, 0] > 0 else neg).append(loss.stage_loss(model, trace, k, lcfg))
    pos, neg = np.array(pos), np.array(neg)
    se = np.sqrt(pos.var(ddof=1) / len(pos) + neg.var(ddof=1) / len(neg))
    assert abs(pos.mean() - neg.mean()) <= 5 * se


def test_trace_with_failure_is_rejected():
    model, nz = lq_validation_model(), lq_validation_noise()
    trace = run_closed_loop(model, nz, loss_cfg(LQ_Y0, LQ_SIGMA0, 4))
    trace.diverged = True
    with pytest.raises(InputError):
        loss.loss_decomposition(model, trace)
    with pytest.raises(InputError):
        loss.stage_loss(model, run_closed_loop(model, nz, loss_cfg(LQ_Y0, LQ_SIGMA0, 4)), 4)


def test_alpha_sweep_rows():
    from srmpc.benchmarks import PredatorPrey

    model = PredatorPrey(0.1)
    nz = NoiseSpec.from_covariances(0.1 * np.diag([.01, .01, .025]), [[10.0]])
    rows = loss.alpha_sweep(model, model.z_s, 0.1 * np.eye(3), nz, [0.5, 1.0, 2.0], 100)
    vals = [r.expected_loss for r in rows]
    assert vals[0] > vals[1] > vals[2] and all(r.converged for r in rows)

"""Closed-loop simulation of MPC with an extended Kalman filter in the loop.

Timing at step ``k``: the controller sees the predicted estimate ``y_k`` and
its variance ``Sigma_k``, the control ``u_k`` is applied, the measurement
``eta_k = h(z_k) + v_k`` arrives and the filter produces ``y_{k+1}`` and
``Sigma_{k+1}`` from ``(y_k, u_k, Sigma_k, eta_k)``.

Every trial draws from its own streams spawned from ``(seed, trial)``, so a
trace depends only on its configuration, never on execution order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, InputError, NumericDomainError, RegularityError
from .estimator import NoiseSpec, as_covariance, ekf_cov_update, ekf_mean_update
from .model import Model
from .ocp import SolverOptions, SrConfig, shift_warm_start, solve_nominal, solve_self_reflective

CONTROLLERS = ("nominal", "self_reflective")


@dataclass
class SimConfig:
    steps: int
    x0_star: np.ndarray
    y0: np.ndarray
    Sigma0: np.ndarray
    controller: str = "nominal"
    alpha: float = 0.0
    horizon: int = 20
    seed: int = 0
    trial: int = 0
    divergence_bound: float = 1e3
    # tail problems of length steps - k instead of a receding horizon
    shrinking: bool = False
    plant_noise: bool = True
    # draw x0_star = y0 + e with e ~ bounded N(0, Sigma0)
    sample_initial_error: bool = False
    tol: float = 1e-6
    max_iter: int = 200
    initial_control: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise InputError("steps must be at least 1")
        if not self.divergence_bound > 0:
            raise InputError("divergence bound must be positive")
        if self.controller not in CONTROLLERS:
            raise InputError(f"controller must be one of {CONTROLLERS}")
        if self.horizon < 1 or self.alpha < 0:
            raise InputError("horizon must be >= 1 and alpha >= 0")
        self.x0_star = np.asarray(self.x0_star, float)
        self.y0 = np.asarray(self.y0, float)
        self.Sigma0 = as_covariance(self.Sigma0, name="Sigma0")


@dataclass
class ClosedLoopTrace:
    z: np.ndarray
    y: np.ndarray
    Sigma: np.ndarray
    u: np.ndarray
    w: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    stage_cost: np.ndarray
    seed: int
    trial: int = 0
    diverged: bool = False
    failure: str | None = None
    predicted_loss: np.ndarray = field(default=None, repr=False)
    divergence_reason: str | None = None
    wall_time: float = 0.0

    @property
    def steps(self):
        return len(self.u)

    @property
    def closed_loop_cost(self):
        """Realized ``sum_k l(z_k, u_k)`` (terminal cost added by the loss analysis)."""
        return float(np.sum(self.stage_cost))


def noise_streams(seed, trial=0):
    """Independent generators for process noise, measurement noise and initial error."""
    ss = np.random.SeedSequence(seed, spawn_key=(trial,))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def _sqrt_factor(cov):
    w, E = np.linalg.eigh(cov)
    return E * np.sqrt(np.clip(w, 0.0, None))


def sample_bounded_noise(cov, gamma, stream, size=None):
    """Zero-mean Gaussian with covariance ``cov`` conditioned on ``|sample|_2 <= gamma``.

    Scaling ``cov`` by ``s**2`` and ``gamma`` by ``s`` scales the samples of a
    given stream by ``s``, which gives common random numbers across noise levels.
    """
    cov = np.atleast_2d(np.asarray(cov, float))
    n = cov.shape[0]
    count = 1 if size is None else int(size)
    if not np.any(cov):
        out = np.zeros((count, n))
        return out[0] if size is None else out
    if not gamma > 0:
        raise ConfigError("support radius must be positive for a non-zero covariance")
    F = _sqrt_factor(cov)
    out = np.empty((count, n))
    filled = drawn = 0
    while filled < count:
        batch = max(8, 2 * (count - filled))
        cand = stream.standard_normal((batch, n)) @ F.T
        ok = cand[np.linalg.norm(cand, axis=1) <= gamma]
        drawn += batch
        take = min(len(ok), count - filled)
        out[filled:filled + take] = ok[:take]
        filled += take
        if drawn >= 1000 and filled < 0.01 * drawn:
            raise ConfigError(f"rejection sampling acceptance below 1% (gamma={gamma:g} too small)")
    return out[0] if size is None else out


def _draw_noise(model, noise, cfg):
    rw, rv, r0 = noise_streams(cfg.seed, cfg.trial)
    if cfg.plant_noise:
        w = sample_bounded_noise(noise.W, noise.gamma_w, rw, cfg.steps)
        v = sample_bounded_noise(noise.V, noise.gamma_v, rv, cfg.steps)
    else:
        w, v = np.zeros((cfg.steps, model.n_x)), np.zeros((cfg.steps, model.n_h))
    x0 = cfg.x0_star
    if cfg.sample_initial_error:
        radius = 4.0 * np.sqrt(np.linalg.norm(cfg.Sigma0, 2))
        x0 = cfg.y0 + sample_bounded_noise(cfg.Sigma0, radius, r0)
    return w, v, x0


class _Controller:
    def __init__(self, model, noise, cfg):
        self.model, self.noise, self.cfg = model, noise, cfg
        self.u_prev = None

    def __call__(self, k, y, Sigma):
        cfg, model = self.cfg, self.model
        N = cfg.steps - k if cfg.shrinking else cfg.horizon
        warm = None
        if self.u_prev is not None:
            warm = self.u_prev[1:] if cfg.shrinking else shift_warm_start(self.u_prev)
        if cfg.controller == "nominal":
            sol = solve_nominal(model, y, np.zeros((N, model.n_x)),
                                SolverOptions(tol=cfg.tol, max_iter=cfg.max_iter), u0=warm)
        else:
            sol = solve_self_reflective(model, y, Sigma, SrConfig(
                alpha=cfg.alpha, N=N, tol=cfg.tol, max_iter=cfg.max_iter, warm_start=warm,
                initial_control=cfg.initial_control), self.noise)
        self.u_prev = sol.u
        return sol


def run_closed_loop(model: Model, noise: NoiseSpec, cfg: SimConfig, controller=None) -> ClosedLoopTrace:
    """Simulate the EKF + MPC loop; ``controller(k, y, Sigma)`` overrides the configured MPC."""
    n_x = model.n_x
    if cfg.x0_star.shape != (n_x,) or cfg.y0.shape != (n_x,) or cfg.Sigma0.shape != (n_x, n_x):
        raise InputError("initial data do not match the model state dimension")
    t0 = time.perf_counter()
    w, v, x0 = _draw_noise(model, noise, cfg)
    T = cfg.steps
    z = np.full((T + 1, n_x), np.nan)
    y = np.full((T + 1, n_x), np.nan)
    Sig = np.full((T + 1, n_x, n_x), np.nan)
    u = np.full((T, model.n_u), np.nan)
    eta = np.full((T, model.n_h), np.nan)
    cost = np.full(T, np.nan)
    pred = np.full(T, np.nan)
    z[0], y[0], Sig[0] = x0, cfg.y0, cfg.Sigma0
    ctrl = controller or _Controller(model, noise, cfg)
    diverged, failure, reason, done = False, None, None, T
    for k in range(T):
        try:
            sol = ctrl(k, y[k], Sig[k])
            u[k] = sol.first_control
            pred[k] = sol.total_loss if len(sol.stage_losses) else np.nan
            eta[k] = model.h(z[k]) + v[k]
            cost[k] = model.l(z[k], u[k])
            with np.errstate(all="ignore"):
                z[k + 1] = model.f(z[k], u[k]) + w[k]
            y[k + 1] = ekf_mean_update(model, y[k], u[k], y[k], Sig[k], eta[k], noise)
            Sig[k + 1] = ekf_cov_update(model, y[k], u[k], Sig[k], noise)
        except DivergenceError as exc:
            # the prediction from the current estimate overflows: the loop cannot continue
            diverged, reason, done = True, f"step {k}: controller prediction diverged ({exc})", k
            break
        except (RegularityError, NumericDomainError) as exc:
            failure, done = f"step {k}: {exc}", k
            break
        if not np.all(np.isfinite(z[k + 1])) or np.linalg.norm(z[k + 1]) > cfg.divergence_bound:
            diverged, reason, done = True, f"step {k + 1}: |z| exceeds {cfg.divergence_bound:g}", k + 1
            break
    n = done
    return ClosedLoopTrace(
        z=z[:n + 1], y=y[:n + 1], Sigma=Sig[:n + 1], u=u[:n], w=w[:n], v=v[:n], eta=eta[:n],
        stage_cost=cost[:n], seed=cfg.seed, trial=cfg.trial, diverged=diverged, failure=failure,
        predicted_loss=pred[:n], divergence_reason=reason, wall_time=time.perf_counter() - t0,
    )


def run_cascade_nominal(model: Model, noise: NoiseSpec, cfg: SimConfig) -> ClosedLoopTrace:
    if cfg.controller != "nominal":
        raise InputError("run_cascade_nominal needs controller='nominal'")
    return run_closed_loop(model, noise, cfg)


def run_self_reflective(model: Model, noise: NoiseSpec, cfg: SimConfig) -> ClosedLoopTrace:
    if cfg.controller != "self_reflective":
        raise InputError("run_self_reflective needs controller='self_reflective'")
    return run_closed_loop(model, noise, cfg)

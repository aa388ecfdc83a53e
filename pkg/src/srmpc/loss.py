"""Loss of optimality of certainty-equivalent MPC relative to the utopian controller.

The utopian controller knows the true initial state and the whole
disturbance realization; its cost ``J*`` is the optimal value of the
nominal problem with the realized disturbances. The closed-loop cost
``J_cl`` minus ``J*`` splits into per-decision losses::

    Delta_k = l(xi_k, u_k) + J_{k+1}(xi_{k+1}, w_[k+1]) - J_k(xi_k, w_[k])

which telescope to ``J_cl - J*`` and are non-negative because ``J_k`` is the
minimum over the ``k``-th control. To second order the expected loss is
``1/2 sum_k Tr(Phi_k Sigma_k)``.

Loss traces use a shrinking horizon: decision ``k`` solves the tail problem
on stages ``k..N-1`` from the current estimate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InputError, SrmpcError
from .estimator import NoiseSpec, predict_variance_sequence
from .model import Model, Trajectory
from .ocp import SolverOptions, SrConfig, rollout, solve_nominal, solve_self_reflective
from .riccati import sweep_arrays
from .sim import ClosedLoopTrace, SimConfig, run_closed_loop


@dataclass
class LossConfig:
    tol: float = 1e-10
    max_iter: int = 100

    @property
    def options(self):
        return SolverOptions(tol=self.tol, max_iter=self.max_iter)


@dataclass
class LossReport:
    J_star: float
    J_cl: float
    delta_total: float
    delta_stages: np.ndarray
    telescoping_gap: float
    estimate: float = float("nan")
    mc_mean: float = float("nan")
    mc_stderr: float = float("nan")

    def to_dict(self):
        d = asdict(self)
        d["delta_stages"] = [float(v) for v in self.delta_stages]
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}


def cost_to_go(model: Model, x, w_tail, cfg: LossConfig | None = None, u0=None):
    """``J_k(x, w_[k])``; returns ``(value, solution or None)``."""
    cfg = cfg or LossConfig()
    w_tail = np.asarray(w_tail, float).reshape(-1, model.n_x)
    if len(w_tail) == 0:
        return float(model.m(np.asarray(x, float))), None
    sol = solve_nominal(model, x, w_tail, cfg.options, u0=u0)
    if not sol.converged:
        warnings.warn(f"tail problem did not converge (|g| = {sol.gradient_norm:.2e})")
    return sol.objective, sol


def utopian_cost(model: Model, x0_star, w_star, cfg: LossConfig | None = None):
    """Optimal cost with full knowledge of ``x0*`` and the disturbance sequence."""
    return cost_to_go(model, x0_star, w_star, cfg)[0]


def closed_loop_cost(model: Model, trace: ClosedLoopTrace):
    return float(np.sum(trace.stage_cost) + model.m(trace.z[-1]))


def _check_trace(trace):
    if trace.diverged or trace.failure:
        raise InputError("loss analysis needs a complete trace")


def stage_loss(model: Model, trace: ClosedLoopTrace, k, cfg: LossConfig | None = None):
    """``Delta_k``: realized stage cost plus optimal tail from ``xi_{k+1}`` minus optimal tail from ``xi_k``."""
    _check_trace(trace)
    N = trace.steps
    if not 0 <= k < N:
        raise InputError(f"stage index must lie in [0, {N})")
    z, u, w = trace.z, trace.u, trace.w
    after, _ = cost_to_go(model, z[k + 1], w[k + 1:], cfg, u0=u[k + 1:] if k + 1 < N else None)
    before, _ = cost_to_go(model, z[k], w[k:], cfg, u0=u[k:])
    return float(model.l(z[k], u[k])) + after - before


def loss_decomposition(model: Model, trace: ClosedLoopTrace, cfg: LossConfig | None = None):
    """``J*``, ``J_cl``, their difference and the per-decision losses of one trace."""
    _check_trace(trace)
    N = trace.steps
    z, u, w = trace.z, trace.u, trace.w
    tails = np.empty(N + 1)
    tails[N] = float(model.m(z[N]))
    for k in range(N - 1, -1, -1):
        tails[k] = cost_to_go(model, z[k], w[k:], cfg, u0=u[k:])[0]
    stages = np.asarray(trace.stage_cost, float) + tails[1:] - tails[:-1]
    J_star = utopian_cost(model, z[0], w, cfg)
    J_cl = closed_loop_cost(model, trace)
    delta = J_cl - J_star
    return LossReport(J_star, J_cl, delta, stages, abs(delta - math.fsum(stages)))


def nominal_plan(model: Model, y0, N, cfg: LossConfig | None = None) -> Trajectory:
    """Certainty-equivalent prediction from ``y0``: the linearization trajectory of the estimate."""
    cfg = cfg or LossConfig()
    return solve_nominal(model, y0, np.zeros((N, model.n_x)), cfg.options).trajectory


def second_order_estimate(model: Model, plan: Trajectory, Sigma0, noise: NoiseSpec):
    """``1/2 sum_k Tr(Phi_k Sigma_k)`` along ``plan``; returns ``(total, per-stage array)``."""
    sweep = sweep_arrays(model, plan.x, plan.u)
    Sig = predict_variance_sequence(model, plan.x, plan.u, Sigma0, noise)
    stages = 0.5 * np.einsum("kij,kji->k", sweep.Phi, Sig[:-1])
    return float(math.fsum(stages)), stages


@dataclass
class MonteCarloResult:
    mean: float
    stderr: float
    samples: np.ndarray
    failures: int
    failure_trials: list = field(default_factory=list)


def _loss_sim_config(base: SimConfig, seed, trial):
    return replace(base, seed=seed, trial=trial, shrinking=True, sample_initial_error=True,
                   plant_noise=True)


def loss_sample(model: Model, noise: NoiseSpec, base: SimConfig, seed, trial, cfg: LossConfig | None = None):
    """``J_cl - J*`` for one trial (NaN when the trace fails)."""
    trace = run_closed_loop(model, noise, _loss_sim_config(base, seed, trial))
    if trace.diverged or trace.failure:
        return float("nan"), trace
    return closed_loop_cost(model, trace) - utopian_cost(model, trace.z[0], trace.w, cfg), trace


def monte_carlo_loss(model: Model, controller, noise: NoiseSpec, trials, seed, base: SimConfig,
                     cfg: LossConfig | None = None) -> MonteCarloResult:
    """Sample mean and standard error of ``J_cl - J*`` over independent trials.

    ``base`` supplies ``y0``, ``Sigma0`` and the horizon (``steps``); the true
    initial state of every trial is drawn around ``y0``.
    """
    if trials < 2:
        raise InputError("at least two trials are required")
    base = replace(base, controller=controller)
    samples = np.empty(trials)
    for i in range(trials):
        try:
            samples[i] = loss_sample(model, noise, base, seed, i, cfg)[0]
        except SrmpcError:
            samples[i] = np.nan
    bad = np.flatnonzero(~np.isfinite(samples))
    good = samples[np.isfinite(samples)]
    if len(good) < 2:
        raise SrmpcError("fewer than two successful Monte-Carlo trials")
    return MonteCarloResult(float(np.mean(good)), float(np.std(good, ddof=1) / np.sqrt(len(good))),
                            samples, len(bad), bad.tolist())


@dataclass
class ScalingRow:
    scale: float
    gamma: float
    mc_mean: float
    mc_stderr: float
    estimate: float

    @property
    def gap(self):
        return abs(self.mc_mean - self.estimate)

    @property
    def resolved(self):
        """Whether the gap stands above twice the Monte-Carlo standard error."""
        return self.gap > 2 * self.mc_stderr


@dataclass
class ScalingStudy:
    rows: list
    slope: float

    @property
    def below_noise_floor(self):
        return not all(r.resolved for r in self.rows)


def gamma_scaling_study(model: Model, controller, base_noise: NoiseSpec, levels, trials, seed,
                        base: SimConfig, cfg: LossConfig | None = None) -> ScalingStudy:
    """Gap between Monte-Carlo loss and its second-order estimate as the noise shrinks.

    Each level scales covariances (noise and initial variance) by ``s**2``
    and radii by ``s``; all levels share their random streams.
    """
    levels = [float(s) for s in levels]
    if len(levels) < 3:
        raise InputError("at least three levels are required")
    if any(b >= a for a, b in zip(levels, levels[1:])) or levels[-1] <= 0:
        raise InputError("levels must be positive and strictly decreasing")
    plan = nominal_plan(model, base.y0, base.steps, cfg)
    rows = []
    for s in levels:
        noise = base_noise.scaled(s)
        cfg_s = replace(base, Sigma0=s**2 * base.Sigma0)
        mc = monte_carlo_loss(model, controller, noise, trials, seed, cfg_s, cfg)
        est, _ = second_order_estimate(model, plan, cfg_s.Sigma0, noise)
        rows.append(ScalingRow(s, noise.gamma, mc.mean, mc.stderr, est))
    g = np.array([r.gamma for r in rows])
    gaps = np.array([r.gap for r in rows])
    slope = float(np.polyfit(np.log(g), np.log(np.maximum(gaps, 1e-300)), 1)[0])
    return ScalingStudy(rows, slope)


def certainty_equivalent_control(model: Model, y, N, cfg: LossConfig | None = None):
    """First control of the nominal problem of length ``N`` from the estimate ``y``."""
    return solve_nominal(model, y, np.zeros((N, model.n_x)), (cfg or LossConfig()).options).u[0]


def decision_loss(model: Model, xi, y, w_tail, cfg: LossConfig | None = None):
    """Loss of deciding from estimate ``y`` while the true state is ``xi``."""
    w_tail = np.asarray(w_tail, float).reshape(-1, model.n_x)
    u = certainty_equivalent_control(model, y, len(w_tail), cfg)
    x_next = rollout(model, xi, u[None], w_tail[:1]).x[1]
    after = cost_to_go(model, x_next, w_tail[1:], cfg)[0]
    return float(model.l(xi, u)) + after - cost_to_go(model, xi, w_tail, cfg)[0]


def hessian_gap_check(model: Model, trace: ClosedLoopTrace, k, fd_step=None, cfg: LossConfig | None = None,
                      plan: Trajectory | None = None):
    """Spectral-norm gap between the estimate-error Hessian of ``Delta_k`` and ``Phi_k``.

    ``Phi_k`` is taken from the sweep along ``plan`` (default: the nominal
    prediction from the trace's first estimate); the Hessian is a central
    second difference of the decision loss around ``y_k = xi_k``.
    Returns ``(gap, Gamma, Phi)``.
    """
    cfg = cfg or LossConfig()
    N = trace.steps
    if not 0 <= k < N:
        raise InputError(f"stage index must lie in [0, {N})")
    h = max(1e-4, 10 * math.sqrt(cfg.tol)) if fd_step is None else float(fd_step)
    if h < 10 * math.sqrt(cfg.tol):
        warnings.warn("finite-difference step is small relative to the solver tolerance")
    plan = plan or nominal_plan(model, trace.y[0], N, cfg)
    Phi = sweep_arrays(model, plan.x, plan.u).Phi[k]
    xi, w_tail = trace.z[k], trace.w[k:]
    n = model.n_x
    cache = {}

    def loss_at(i, si, j, sj):
        key = tuple(sorted(((i, si), (j, sj))))
        if key not in cache:
            y = xi.copy()
            for idx, sgn in key:
                if idx >= 0:
                    y[idx] += sgn * h
            cache[key] = decision_loss(model, xi, y, w_tail, cfg)
        return cache[key]

    Gamma = np.empty((n, n))
    for i in range(n):
        Gamma[i, i] = (loss_at(i, 2, -1, 0) - 2 * loss_at(-1, 0, -1, 0) + loss_at(i, -2, -1, 0)) / (4 * h * h)
        for j in range(i):
            Gamma[i, j] = Gamma[j, i] = (loss_at(i, 1, j, 1) - loss_at(i, 1, j, -1)
                                         - loss_at(i, -1, j, 1) + loss_at(i, -1, j, -1)) / (4 * h * h)
    return float(np.linalg.norm(Gamma - Phi, 2)), Gamma, Phi


@dataclass
class SweepRow:
    alpha: float
    expected_loss: float
    nominal_cost: float
    excitation: float
    converged: bool
    iterations: int


def alpha_sweep(model: Model, x0, Sigma0, noise: NoiseSpec, alphas, N, tol=1e-8, max_iter=2000,
                initial_control=0.0):
    """Predicted ``sum_k L_k`` of the self-reflective plan from ``x0`` for each ``alpha``.

    ``excitation`` is the RMS deviation of the planned controls from zero.
    """
    rows = []
    for a in alphas:
        sol = solve_self_reflective(model, x0, Sigma0, SrConfig(
            alpha=float(a), N=int(N), tol=tol, max_iter=max_iter, initial_control=initial_control), noise)
        losses = sol.stage_losses
        nominal = float(np.sum(model.l(sol.trajectory.x[:-1], sol.u)) + model.m(sol.trajectory.x[-1]))
        rows.append(SweepRow(float(a), float(math.fsum(losses)), nominal,
                             float(np.sqrt(np.mean(sol.u**2))), bool(sol.converged), sol.iterations))
    return rows

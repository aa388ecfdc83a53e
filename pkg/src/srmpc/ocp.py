"""Certainty-equivalent and self-reflective optimal control in reduced (control-only) form.

The nominal problem minimizes ``sum_k l(x_k, u_k) + m(x_N)`` subject to
``x_{k+1} = f(x_k, u_k) + w_k``. The self-reflective problem adds
``alpha * sum_k 1/2 Tr(Phi_k Sigma_k)``, where ``Sigma`` runs forward through
the EKF variance recursion and ``Phi`` comes out of the backward Riccati
sweep, so the objective couples a forward and a backward recursion.

Gradients are computed by adjoints: the state and variance adjoints run
backward, the adjoint of the Riccati recursion runs forward. Every sweep is
O(N).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import DivergenceError, InputError, RegularityError
from .estimator import NoiseSpec, as_covariance
from .model import Model, Trajectory, contract, eval_bundle
from .riccati import RiccatiState

_FD_REL = 6e-6


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 200
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60

    def __post_init__(self):
        if not self.tol > 0 or self.max_iter < 1 or not 0 < self.shrink < 1:
            raise InputError("invalid solver options")


@dataclass
class SrConfig:
    alpha: float = 1.0
    N: int = 20
    tol: float = 1e-6
    max_iter: int = 500
    warm_start: np.ndarray | None = None
    memory: int = 30
    # constant initial guess without warm start; breaks symmetric saddles at u = 0
    initial_control: float = 0.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InputError("alpha must be non-negative")
        if self.N < 1:
            raise InputError("horizon N must be at least 1")
        if not self.tol > 0 or self.max_iter < 1:
            raise InputError("tol must be positive and max_iter at least 1")

    def solver_options(self):
        return SolverOptions(tol=self.tol, max_iter=self.max_iter)


@dataclass
class OcpSolution:
    trajectory: Trajectory
    objective: float
    stage_losses: np.ndarray
    iterations: int
    converged: bool
    gradient_norm: float
    history: list = field(default_factory=list, repr=False)

    @property
    def u(self):
        return self.trajectory.u

    @property
    def first_control(self):
        return self.trajectory.u[0]

    @property
    def total_loss(self):
        """``sum_k 1/2 Tr(Phi_k Sigma_k)`` at the solution (NaN when not evaluated)."""
        return float(np.sum(self.stage_losses)) if len(self.stage_losses) else float("nan")


class SrObjective(NamedTuple):
    objective: float
    parts: tuple
    Sigma: np.ndarray
    Omega: RiccatiState
    Phi: np.ndarray


def _controls(model, u_seq):
    u = np.asarray(u_seq, float)
    if u.ndim == 1 and model.n_u == 1:
        u = u[:, None]
    if u.ndim != 2 or u.shape[1] != model.n_u:
        raise InputError(f"control sequence must have shape (N, {model.n_u})")
    return u


def _rollout_array(model, x0, u, w=None):
    N = len(u)
    x = np.empty((N + 1, model.n_x))
    x[0] = x0
    with np.errstate(all="ignore"):
        for k in range(N):
            x[k + 1] = model.f(x[k], u[k])
            if w is not None:
                x[k + 1] += w[k]
    if not np.all(np.isfinite(x)):
        bad = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
        raise DivergenceError(bad)
    return x


def rollout(model: Model, x_i, u_seq, w_seq=None) -> Trajectory:
    """Simulate ``x_{k+1} = f(x_k, u_k) + w_k``; ``w_seq=None`` means zero disturbances."""
    u = _controls(model, u_seq)
    x0 = np.asarray(x_i, float).reshape(model.n_x)
    w = np.zeros((len(u), model.n_x)) if w_seq is None else np.asarray(w_seq, float).reshape(len(u), model.n_x)
    return Trajectory(_rollout_array(model, x0, u, w), u, w)


class _Linearization:
    """Derivative bundle along a trajectory, arranged for the compiled kernels."""

    def __init__(self, model, x, u):
        b = eval_bundle(model, x[:-1], u)
        c = np.ascontiguousarray
        self.A, self.B, self.C = c(b.A), c(b.B), c(b.C)
        self.q, self.r = c(b.q), c(b.r)
        self.K, self.L, self.M = c(b.K), c(b.L), c(b.M)
        self.Q, self.R, self.S = c(b.Q), c(b.R), c(b.S)
        gN, HN = model.terminal_derivatives(x[-1])
        self.gN, self.HN = np.asarray(gN, float), c(0.5 * (HN + np.swapaxes(HN, -1, -2)))

    @property
    def riccati_args(self):
        return (self.A, self.B, self.q, self.K, self.L, self.M, self.Q, self.R, self.S)


def _nominal_cost(model, x, u):
    return float(np.sum(model.l(x[:-1], u)) + model.m(x[-1]))


def _newton_step(lin, lam, mu0):
    """Regularized Newton direction; ``mu`` grows until every stage curvature is positive."""
    mu = mu0
    scale = max(1.0, float(np.max(np.abs(lin.R))))
    for _ in range(60):
        du, status = _kernels.newton_direction(lin.A, lin.B, lin.q, lin.r, lin.K, lin.L, lin.M,
                                               lin.Q, lin.R, lin.S, lam, lin.gN, lin.HN, mu)
        if status < 0:
            return du, mu
        mu = max(10.0 * mu, 1e-8 * scale)
    return None, mu


def _precondition(lin, lam, g):
    """Apply the inverse of the (regularized) nominal reduced Hessian to ``g``."""
    zero_q = np.zeros_like(lin.q)
    mu = 0.0
    scale = max(1.0, float(np.max(np.abs(lin.R))))
    for _ in range(60):
        d, status = _kernels.newton_direction(lin.A, lin.B, zero_q, g, lin.K, lin.L, lin.M,
                                              lin.Q, lin.R, lin.S, lam, np.zeros_like(lin.gN), lin.HN, mu)
        if status < 0:
            return -d
        mu = max(10.0 * mu, 1e-8 * scale)
    return g


def _armijo(fun, u, J, g, d, opts):
    slope = float(np.sum(g * d))
    if -slope <= 1e-15 * (1 + abs(J)):
        # decrease below roundoff: Armijo cannot discriminate, take the step
        J_new = fun(u + d)
        return (u + d, J_new) if J_new <= J + 1e-14 * (1 + abs(J)) else (None, J)
    t = 1.0
    for _ in range(opts.max_backtracks):
        u_new = u + t * d
        J_new = fun(u_new)
        if J_new <= J + opts.armijo * t * slope:
            return u_new, J_new
        t *= opts.shrink
    return None, J


def solve_nominal(model: Model, x_i, w_seq, cfg: SolverOptions | None = None, u0=None) -> OcpSolution:
    """Minimize ``sum l + m`` over the controls for a known disturbance sequence.

    Newton's method on the reduced objective: the step comes from a Riccati
    sweep with the exact Lagrangian Hessian (dynamics curvature weighted by
    the costate), regularized when a stage curvature is not positive definite.
    """
    cfg = cfg or SolverOptions()
    w = np.atleast_2d(np.asarray(w_seq, float))
    if w.shape[1] != model.n_x or len(w) < 1:
        raise InputError(f"disturbances must have shape (N, {model.n_x}) with N >= 1")
    N = len(w)
    x0 = np.asarray(x_i, float).reshape(model.n_x)
    u = np.zeros((N, model.n_u)) if u0 is None else _controls(model, u0).copy()
    if len(u) != N:
        raise InputError("warm start length must match the horizon")

    def cost(v):
        try:
            return _nominal_cost(model, _rollout_array(model, x0, v, w), v)
        except DivergenceError:
            return np.inf

    try:
        x = _rollout_array(model, x0, u, w)
    except DivergenceError:
        if u0 is None:
            raise
        # unusable warm start
        u = np.zeros_like(u)
        x = _rollout_array(model, x0, u, w)
    J = _nominal_cost(model, x, u)
    history = [J]
    mu = 0.0
    converged = False
    it = 0
    gnorm = np.inf
    while True:
        lin = _Linearization(model, x, u)
        lam, g = _kernels.costate_backward(lin.A, lin.B, lin.q, lin.r, np.zeros_like(lin.q),
                                           np.zeros_like(lin.r), lin.gN)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.tol * (1 + abs(J)):
            converged = True
            break
        if it >= cfg.max_iter:
            break
        d, mu = _newton_step(lin, lam, mu)
        if d is None or np.sum(g * d) >= 0:
            d = -g
        u_new, J_new = _armijo(cost, u, J, g, d, cfg)
        if u_new is None:
            break
        it += 1
        mu = 0.0 if mu < 1e-6 else mu / 10
        u, J = u_new, J_new
        x = _rollout_array(model, x0, u, w)
        history.append(J)
    return OcpSolution(Trajectory(x, u, w), J, np.empty(0), it, converged, gnorm, history)


class SelfReflectiveProblem:
    """Reduced objective ``sum_k [l + alpha/2 Tr(Phi_k Sigma_k)] + m`` and its adjoint gradient."""

    def __init__(self, model: Model, x_i, Sigma_i, alpha, noise: NoiseSpec):
        if not alpha >= 0:
            raise InputError("alpha must be non-negative")
        self.model = model
        self.x0 = np.asarray(x_i, float).reshape(model.n_x)
        self.Sigma0 = as_covariance(Sigma_i, model.n_x, "Sigma_i")
        self.alpha = float(alpha)
        self.noise = noise
        if noise.W.shape != (model.n_x, model.n_x) or noise.V.shape != (model.n_h, model.n_h):
            raise InputError("noise covariances do not match the model dimensions")

    def evaluate(self, u):
        """Forward/backward sweeps at ``u``; returns a dict of intermediate arrays."""
        model = self.model
        x = _rollout_array(model, self.x0, u)
        lin = _Linearization(model, x, u)
        p, P, Phi, Gxx, Gux, Guu, Z, status, min_eig = _kernels.riccati_sweep(
            *lin.riccati_args, lin.gN, lin.HN)
        if status >= 0:
            raise RegularityError(int(status), min_eig)
        Sig, Jt = _kernels.cov_sweep(lin.A, lin.C, self.Sigma0, self.noise.W, self.noise.V)
        losses = 0.5 * np.einsum("kij,kji->k", Phi, Sig[:-1])
        nominal = _nominal_cost(model, x, u)
        loss = self.alpha * float(np.sum(losses))
        return dict(x=x, u=u, lin=lin, p=p, P=P, Phi=Phi, Z=Z, Sig=Sig, Jt=Jt, losses=losses,
                    nominal=nominal, loss=loss, objective=nominal + loss)

    def objective(self, u):
        try:
            return self.evaluate(u)["objective"]
        except (DivergenceError, RegularityError):
            return np.inf

    def gradient(self, ev):
        lin = ev["lin"]
        extra_x = np.zeros_like(lin.q)
        extra_u = np.zeros_like(lin.r)
        lamN = lin.gN.copy()
        if self.alpha > 0:
            pi, Pi, Gbxx, Gbux, Gbuu = _kernels.omega_adjoint_forward(
                lin.A, lin.B, lin.K, lin.L, lin.M, ev["Sig"], ev["Z"], self.alpha)
            Sadj = _kernels.sigma_adjoint_backward(ev["Jt"], ev["Phi"], self.alpha)
            weights = dict(pn=ev["p"][1:], Pn=ev["P"][1:], Sig=ev["Sig"][:-1], Sn=Sadj[1:],
                           pi=pi[:-1], Gbxx=Gbxx, Gbux=Gbux, Gbuu=Gbuu)
            extra_x, extra_u = self._psi_gradient(ev["x"][:-1], ev["u"], weights)
            lamN = lamN + lin.HN @ pi[-1] + self._terminal_gradient(ev["x"][-1], Pi[-1])
        lam, g = _kernels.costate_backward(lin.A, lin.B, lin.q, lin.r, extra_x, extra_u, lamN)
        return g, lam

    def _psi(self, x, u, wt):
        """Per-stage value of the derivative-dependent part of the Lagrangian."""
        b = eval_bundle(self.model, x, u)
        pn, Pn = wt["pn"], wt["Pn"]
        PA = Pn @ b.A
        Gxx = b.Q + np.swapaxes(b.A, 1, 2) @ PA + contract(b.K, pn)
        Gux = b.S + np.swapaxes(b.B, 1, 2) @ PA + contract(b.L, pn)
        Guu = b.R + np.swapaxes(b.B, 1, 2) @ Pn @ b.B + contract(b.M, pn)
        val = (np.einsum("kij,kij->k", wt["Gbxx"], Gxx) + np.einsum("kij,kij->k", wt["Gbux"], Gux)
               + np.einsum("kij,kij->k", wt["Gbuu"], Guu))
        val += np.einsum("ki,kji,kj->k", wt["pi"], b.A, pn) + np.einsum("ki,ki->k", wt["pi"], b.q)
        Sig = wt["Sig"]
        SCt = Sig @ np.swapaxes(b.C, 1, 2)
        D = b.C @ SCt + self.noise.V
        ev, E = np.linalg.eigh(0.5 * (D + np.swapaxes(D, 1, 2)))
        thr = 1e-12 * np.maximum(1.0, np.max(np.abs(ev), axis=1, keepdims=True))
        inv = np.where(np.abs(ev) > thr, 1.0 / np.where(ev == 0, 1.0, ev), 0.0)
        post = Sig - SCt @ ((E * inv[:, None, :]) @ np.swapaxes(E, 1, 2)) @ np.swapaxes(SCt, 1, 2)
        val += np.einsum("kij,kij->k", wt["Sn"], b.A @ post @ np.swapaxes(b.A, 1, 2))
        return val

    def _psi_gradient(self, x, u, wt):
        nx, nu = self.model.n_x, self.model.n_u
        gx = np.empty_like(x)
        gu = np.empty_like(u)
        for j in range(nx + nu):
            base, col = (x, j) if j < nx else (u, j - nx)
            h = _FD_REL * (1.0 + np.abs(base[:, col]))
            plus, minus = base.copy(), base.copy()
            plus[:, col] += h
            minus[:, col] -= h
            if j < nx:
                diff = self._psi(plus, u, wt) - self._psi(minus, u, wt)
                gx[:, col] = diff / (2 * h)
            else:
                diff = self._psi(x, plus, wt) - self._psi(x, minus, wt)
                gu[:, col] = diff / (2 * h)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gu)

    def _terminal_gradient(self, xN, PiN):
        out = np.empty(self.model.n_x)
        for j in range(self.model.n_x):
            h = _FD_REL * (1.0 + abs(xN[j]))
            e = np.zeros_like(xN)
            e[j] = h
            Hp = self.model.terminal_derivatives(xN + e)[1]
            Hm = self.model.terminal_derivatives(xN - e)[1]
            out[j] = np.sum(PiN * (Hp - Hm)) / (2 * h)
        return out


def sr_objective(model: Model, x_i, Sigma_i, u_seq, alpha, noise: NoiseSpec) -> SrObjective:
    prob = SelfReflectiveProblem(model, x_i, Sigma_i, alpha, noise)
    ev = prob.evaluate(_controls(model, u_seq))
    return SrObjective(ev["objective"], (ev["nominal"], ev["loss"]), ev["Sig"],
                       RiccatiState(ev["p"], ev["P"]), ev["Phi"])


def sr_gradient(model: Model, x_i, Sigma_i, u_seq, alpha, noise: NoiseSpec):
    """Gradient of :func:`sr_objective` with respect to every control, shape ``(N, n_u)``."""
    prob = SelfReflectiveProblem(model, x_i, Sigma_i, alpha, noise)
    return prob.gradient(prob.evaluate(_controls(model, u_seq)))[0]


def shift_warm_start(u):
    """Receding-horizon warm start: drop the applied control and repeat the last one."""
    u = np.asarray(u, float)
    return np.concatenate([u[1:], u[-1:]], axis=0)


def _stage_losses(model, x_i, Sigma_i, u, noise):
    try:
        return SelfReflectiveProblem(model, x_i, Sigma_i, 0.0, noise).evaluate(u)["losses"]
    except RegularityError:
        return np.full(len(u), np.nan)


def solve_self_reflective(model: Model, x_i, Sigma_i, cfg: SrConfig, noise: NoiseSpec) -> OcpSolution:
    """Minimize the self-reflective objective with limited-memory BFGS.

    The inverse-Hessian seed of the two-loop recursion is the nominal Newton
    solve at the current iterate, so the quasi-Newton pairs only need to
    capture the curvature of the loss term.
    """
    N = cfg.N
    zero_w = np.zeros((N, model.n_x))
    if cfg.warm_start is None:
        u = np.full((N, model.n_u), float(cfg.initial_control))
    else:
        u = _controls(model, cfg.warm_start).copy()
        if len(u) != N:
            raise InputError("warm start length must match the horizon")
    if cfg.alpha == 0:
        sol = solve_nominal(model, x_i, zero_w, cfg.solver_options(), u0=u)
        sol.stage_losses = _stage_losses(model, x_i, Sigma_i, sol.u, noise)
        return sol

    prob = SelfReflectiveProblem(model, x_i, Sigma_i, cfg.alpha, noise)
    opts = cfg.solver_options()
    ev = None
    # an irregular or divergent guess falls back to the nominal optimum, then to a constant
    for guess in _initial_guesses(model, x_i, u, cfg, zero_w):
        try:
            u = guess()
            ev = prob.evaluate(u)
            break
        except (DivergenceError, RegularityError) as exc:
            err = exc
    if ev is None:
        raise err
    J = ev["objective"]
    g, _ = prob.gradient(ev)
    history = [J]
    pairs = []
    converged = False
    it = 0
    while True:
        lin = ev["lin"]
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.tol * (1 + abs(J)):
            converged = True
            break
        if it >= cfg.max_iter:
            break
        lam_nom, _ = _kernels.costate_backward(lin.A, lin.B, lin.q, lin.r, np.zeros_like(lin.q),
                                               np.zeros_like(lin.r), lin.gN)
        d = -_two_loop(g, pairs, lambda v: _precondition(lin, lam_nom, v))
        if np.sum(g * d) >= -1e-12 * gnorm * np.linalg.norm(d):
            pairs.clear()
            d = -_precondition(lin, lam_nom, g)
            if np.sum(g * d) >= 0:
                d = -g
        u_new, J_new = _armijo(prob.objective, u, J, g, d, opts)
        if u_new is None:
            if pairs:
                pairs.clear()
                continue
            break
        ev_new = prob.evaluate(u_new)
        g_new, _ = prob.gradient(ev_new)
        s, y = (u_new - u).ravel(), (g_new - g).ravel()
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / (s @ y)))
            if len(pairs) > cfg.memory:
                pairs.pop(0)
        u, J, ev, g = u_new, J_new, ev_new, g_new
        it += 1
        history.append(J)
    x = ev["x"]
    return OcpSolution(Trajectory(x, u, zero_w), J, ev["losses"], it, converged, gnorm, history)


def _initial_guesses(model, x_i, u, cfg, zero_w):
    const = np.full_like(u, float(cfg.initial_control))
    yield lambda: u
    yield lambda: solve_nominal(model, x_i, zero_w, cfg.solver_options(), u0=u).u
    if cfg.warm_start is not None:
        yield lambda: const


def _two_loop(g, pairs, apply_h0):
    q = g.ravel().copy()
    coef = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        q -= a * y
        coef.append(a)
    r = apply_h0(q.reshape(g.shape)).ravel()
    for (s, y, rho), a in zip(pairs, reversed(coef)):
        r += s * (a - rho * (y @ r))
    return r.reshape(g.shape)

"""Backward recursion for the cost-to-go derivatives ``Omega_k = (p_k, P_k)``.

Along a trajectory ``(x, u)`` the derivatives of the cost-to-go satisfy::

    p_k = A' p' + q
    P_k = Gxx - Phi_k,      Phi_k = Gux' Guu^-1 Gux

with ``Gxx = Q + A'P'A + K.p'``, ``Gux = S + B'P'A + L.p'`` and
``Guu = R + B'P'B + M.p'``. ``Phi_k`` weights the estimation error in the
expected loss ``1/2 Tr(Phi_k Sigma_k)`` of the ``k``-th decision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InputError, NumericDomainError, RegularityError
from .model import Model, Trajectory, eval_bundle


@dataclass
class RiccatiState:
    p: np.ndarray
    P: np.ndarray


@dataclass
class GBlocks:
    Gxx: np.ndarray
    Gux: np.ndarray
    Guu: np.ndarray


@dataclass
class SweepResult:
    """Stacked output of :func:`backward_sweep`; ``p, P`` hold ``N+1`` entries, the rest ``N``."""

    p: np.ndarray
    P: np.ndarray
    Phi: np.ndarray
    Gxx: np.ndarray
    Gux: np.ndarray
    Guu: np.ndarray
    Z: np.ndarray

    def omega(self, k):
        return RiccatiState(self.p[k], self.P[k])


def terminal_riccati(model: Model, x_N) -> RiccatiState:
    x_N = np.asarray(x_N, float)
    if x_N.shape != (model.n_x,):
        raise InputError(f"terminal state must have shape ({model.n_x},)")
    p, P = model.terminal_derivatives(x_N)
    p, P = np.asarray(p, float), np.asarray(P, float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(P))):
        raise NumericDomainError("terminal cost derivatives are not finite")
    return RiccatiState(p, 0.5 * (P + P.T))


def _bundle_args(b):
    return [np.ascontiguousarray(a) for a in (b.A, b.B, b.q, b.K, b.L, b.M, b.Q, b.R, b.S)]


def _core(model, x, u, omega_next):
    b = eval_bundle(model, x, u)
    return _kernels.riccati_core(*_bundle_args(b), np.asarray(omega_next.p, float),
                                 np.ascontiguousarray(omega_next.P, float))


def g_blocks(model: Model, x, u, omega_next: RiccatiState) -> GBlocks:
    _, _, _, Gxx, Gux, Guu, _, _ = _core(model, x, u, omega_next)
    return GBlocks(Gxx, Gux, Guu)


def riccati_step(model: Model, x, u, omega_next: RiccatiState, stage=0):
    """One backward step; returns ``(Omega_k, Phi_k)``."""
    p, P, Phi, _, _, _, _, min_eig = _core(model, x, u, omega_next)
    if not min_eig > _kernels.GUU_MIN_EIG:
        raise RegularityError(stage, min_eig)
    return RiccatiState(p, P), Phi


def sweep_arrays(model: Model, x, u) -> SweepResult:
    """Backward sweep over stacked states ``x`` (N+1) and controls ``u`` (N)."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    if len(x) != len(u) + 1 or len(u) < 1:
        raise InputError("sweep needs N >= 1 controls and N + 1 states")
    term = terminal_riccati(model, x[-1])
    b = eval_bundle(model, x[:-1], u)
    p, P, Phi, Gxx, Gux, Guu, Z, status, min_eig = _kernels.riccati_sweep(
        *_bundle_args(b), term.p, np.ascontiguousarray(term.P))
    if status >= 0:
        raise RegularityError(int(status), min_eig)
    return SweepResult(p, P, Phi, Gxx, Gux, Guu, Z)


def backward_sweep(model: Model, trajectory: Trajectory):
    """Return the lists ``[Omega_0..Omega_N]`` and ``[Phi_0..Phi_{N-1}]``."""
    res = sweep_arrays(model, trajectory.x, trajectory.u)
    return [res.omega(k) for k in range(len(res.p))], list(res.Phi)


def stage_expected_loss(Phi, Sigma):
    """``1/2 Tr(Phi Sigma)``."""
    Phi, Sigma = np.asarray(Phi, float), np.asarray(Sigma, float)
    if Phi.shape != Sigma.shape or Phi.ndim != 2 or Phi.shape[0] != Phi.shape[1]:
        raise InputError(f"shape mismatch {Phi.shape} vs {Sigma.shape}")
    return 0.5 * float(np.sum(Phi * Sigma.T))

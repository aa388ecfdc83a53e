"""Extended Kalman filter updates and open-loop variance prediction.

The filter keeps a *predicted* estimate ``y_k`` of the state ``z_k`` (based on
measurements up to ``eta_{k-1}``) and its variance ``Sigma_k``::

    y_{k+1}     = f(y_k + Sigma_k C' (C Sigma_k C' + V)^+ (eta_k - h(y_k)), u_k)
    Sigma_{k+1} = A (Sigma_k - Sigma_k C' (C Sigma_k C' + V)^+ C Sigma_k) A' + W

with ``A, C`` evaluated at a linearization point that defaults to ``y_k``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InputError, NumericDomainError
from .model import Model, eval_bundle


def as_covariance(Sigma, n=None, name="Sigma"):
    """Validate and symmetrize a covariance matrix."""
    S = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1] or (n is not None and S.shape[0] != n):
        raise InputError(f"{name} must be square{f' of size {n}' if n else ''}, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericDomainError(f"{name} is not finite")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-8 * (1.0 + np.max(np.abs(S), initial=0.0)):
        raise InputError(f"{name} is not symmetric")
    S = 0.5 * (S + S.T)
    scale = np.linalg.norm(S, 2)
    if S.size and np.linalg.eigvalsh(S)[0] < -1e-10 * max(scale, 1e-300):
        raise InputError(f"{name} is not positive semidefinite")
    return S


@dataclass
class NoiseSpec:
    """Process/measurement covariances with bounded-support radii.

    ``gamma_w`` and ``gamma_v`` bound the Euclidean norm of individual
    process and measurement noise samples; ``gamma`` is the common radius.
    """

    W: np.ndarray
    V: np.ndarray
    gamma_w: float
    gamma_v: float = None

    def __post_init__(self):
        self.W = as_covariance(self.W, name="W")
        self.V = as_covariance(self.V, name="V")
        if self.gamma_v is None:
            self.gamma_v = self.gamma_w
        self.gamma_w, self.gamma_v = float(self.gamma_w), float(self.gamma_v)
        for name, g, cov in (("gamma_w", self.gamma_w, self.W), ("gamma_v", self.gamma_v, self.V)):
            if g < 0 or (g == 0 and np.any(cov)):
                raise InputError(f"{name} must be positive for a non-zero covariance")
        if np.linalg.norm(self.W, 2) > self.gamma**2 or np.linalg.norm(self.V, 2) > self.gamma**2:
            warnings.warn("noise covariance exceeds gamma^2 (bounded-support assumption violated)")

    @property
    def gamma(self):
        return max(self.gamma_w, self.gamma_v)

    @classmethod
    def from_covariances(cls, W, V, radius_factor=4.0):
        """Radii ``radius_factor * sqrt(|cov|_2)`` per channel."""
        W = as_covariance(W, name="W")
        V = as_covariance(V, name="V")
        return cls(W, V, radius_factor * np.sqrt(np.linalg.norm(W, 2)),
                   radius_factor * np.sqrt(np.linalg.norm(V, 2)))

    def scaled(self, s):
        """Covariances scaled by ``s**2`` and radii by ``s``."""
        return NoiseSpec(s**2 * self.W, s**2 * self.V, s * self.gamma_w, s * self.gamma_v)


def _innovation_gain(C, Sigma, V):
    SCt = Sigma @ C.T
    return SCt @ _kernels.psd_pinv(np.ascontiguousarray(C @ SCt + V))


def ekf_mean_update(model: Model, x_lin, u, y, Sigma, eta, noise: NoiseSpec):
    """Propagate the estimate through ``f`` after the measurement correction."""
    y = np.asarray(y, float)
    x_lin = y if x_lin is None else np.asarray(x_lin, float)
    u = np.asarray(u, float)
    Sigma = as_covariance(Sigma, model.n_x)
    eta = np.asarray(eta, float).reshape(model.n_h)
    C = eval_bundle(model, x_lin, u).C
    corrected = y + _innovation_gain(C, Sigma, noise.V) @ (eta - model.h(y))
    out = model.f(corrected, u)
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("EKF mean update produced a non-finite estimate")
    return out


def ekf_cov_update(model: Model, x_lin, u, Sigma, noise: NoiseSpec):
    """``A (Sigma - Sigma C'(C Sigma C' + V)^+ C Sigma) A' + W`` with ``A, C`` at ``(x_lin, u)``."""
    b = eval_bundle(model, x_lin, u)
    Sigma = as_covariance(Sigma, model.n_x)
    out, _ = _kernels.cov_step(np.ascontiguousarray(b.A), np.ascontiguousarray(b.C), Sigma, noise.W, noise.V)
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("EKF covariance update is not finite")
    return out


def predict_variance_sequence(model: Model, x_plan, u_plan, Sigma0, noise: NoiseSpec):
    """Variance of future estimates along a plan, without measurements: returns ``Sigma_0..Sigma_N``."""
    x_plan = np.atleast_2d(np.asarray(x_plan, float))
    u_plan = np.asarray(u_plan, float).reshape(-1, model.n_u)
    if len(x_plan) != len(u_plan) + 1:
        raise InputError("x_plan must have exactly one more entry than u_plan")
    Sigma0 = as_covariance(Sigma0, model.n_x)
    if len(u_plan) == 0:
        return Sigma0[None].copy()
    b = eval_bundle(model, x_plan[:-1], u_plan)
    Sig, _ = _kernels.cov_sweep(b.A, b.C, Sigma0, noise.W, noise.V)
    if not np.all(np.isfinite(Sig)):
        raise NumericDomainError("variance prediction is not finite")
    return Sig

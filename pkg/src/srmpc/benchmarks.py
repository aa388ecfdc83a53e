"""Built-in benchmark systems.

* ``lq_custom``: affine dynamics with quadratic costs (any dimensions).
* ``motivating_example``: the 2-state bilinear system whose first state is
  observable only when the second control is non-zero.
* ``predator_prey``: Euler-discretized predator-prey model with a feeding
  control and a random success-rate state.

All derivatives are analytic and batched.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .model import DerivativeBundle, Model


def stationary_riccati(A, B, Q, R, S=None, tol=1e-10, max_iter=1_000_000):
    """Fixed point of the discrete Riccati difference equation.

    Iterates ``P <- Q + A'PA - (S + B'PA)'(R + B'PB)^-1 (S + B'PA)`` from
    ``P = Q`` until the max-abs update is below ``tol * (1 + max|P|)``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(a, float)) for a in (A, B, Q, R))
    S = np.zeros((B.shape[1], A.shape[0])) if S is None else np.atleast_2d(np.asarray(S, float))
    P = Q.copy()
    for _ in range(max_iter):
        G = S + B.T @ P @ A
        P_new = Q + A.T @ P @ A - G.T @ np.linalg.solve(R + B.T @ P @ B, G)
        P_new = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(P_new - P)) <= tol * (1.0 + np.max(np.abs(P_new))):
            return P_new
        P = P_new
    raise RuntimeError("stationary Riccati iteration did not converge")


def _zeros(batch, *shape):
    return np.zeros(batch + shape)


class LinearQuadraticModel(Model):
    """``f = A x + B u``, ``h = C x``, ``l = x'Qx/2 + u'Sx + u'Ru/2``, ``m = x'Pf x/2``."""

    name = "lq_custom"

    def __init__(self, A, B, C, Q, R, S=None, Pf=None):
        A, B, C, Q, R = (np.atleast_2d(np.asarray(a, float)) for a in (A, B, C, Q, R))
        super().__init__(A.shape[0], B.shape[1], C.shape[0])
        nx, nu = self.n_x, self.n_u
        S = np.zeros((nu, nx)) if S is None else np.atleast_2d(np.asarray(S, float))
        Pf = Q.copy() if Pf is None else np.atleast_2d(np.asarray(Pf, float))
        shapes = {"A": (A, (nx, nx)), "B": (B, (nx, nu)), "C": (C, (self.n_h, nx)),
                  "Q": (Q, (nx, nx)), "R": (R, (nu, nu)), "S": (S, (nu, nx)), "Pf": (Pf, (nx, nx))}
        for key, (mat, shape) in shapes.items():
            if mat.shape != shape:
                raise InputError(f"{key} has shape {mat.shape}, expected {shape}")
        for key in ("Q", "R", "Pf"):
            mat = shapes[key][0]
            if not np.allclose(mat, mat.T):
                raise InputError(f"{key} must be symmetric")
        self.A, self.B, self.C, self.Q, self.R, self.S, self.Pf = A, B, C, Q, R, S, Pf

    def f(self, x, u):
        return np.asarray(x) @ self.A.T + np.asarray(u) @ self.B.T

    def h(self, x):
        return np.asarray(x) @ self.C.T

    def l(self, x, u):
        x, u = np.asarray(x), np.asarray(u)
        return (0.5 * np.einsum("...i,ij,...j->...", x, self.Q, x)
                + np.einsum("...i,ij,...j->...", u, self.S, x)
                + 0.5 * np.einsum("...i,ij,...j->...", u, self.R, u))

    def m(self, x):
        x = np.asarray(x)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.Pf, x)

    def derivatives(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        nx, nu = self.n_x, self.n_u

        def const(a):
            return np.broadcast_to(a, batch + a.shape).copy()

        return DerivativeBundle(
            A=const(self.A), B=const(self.B), C=const(self.C),
            q=np.broadcast_to(x @ self.Q + u @ self.S, batch + (nx,)).copy(),
            r=np.broadcast_to(x @ self.S.T + u @ self.R, batch + (nu,)).copy(),
            K=_zeros(batch, nx, nx, nx), L=_zeros(batch, nx, nu, nx), M=_zeros(batch, nx, nu, nu),
            Q=const(self.Q), R=const(self.R), S=const(self.S),
        )

    def terminal_derivatives(self, x):
        x = np.asarray(x, float)
        return x @ self.Pf, np.broadcast_to(self.Pf, x.shape[:-1] + self.Pf.shape).copy()


class MotivatingExample(Model):
    """Bilinear system ``f(x, u) = F(u) x + delta u`` with ``F(u) = I + delta [[1, 0], [u_2, -1]]``.

    Only ``x_2`` is measured and ``x_1`` reaches ``x_2`` through ``u_2 x_1``,
    so the unstable first state is unobservable whenever ``u_2 = 0``.
    Stage cost ``delta (x_1^2 + |u|^2)``; terminal cost ``x' P_T x`` with
    ``P_T`` the stationary Riccati solution of the linearization at the origin.
    """

    name = "motivating_example"

    def __init__(self, delta=0.01, P_T=None):
        if not delta > 0:
            raise InputError("delta must be positive")
        super().__init__(2, 2, 1)
        self.delta = float(delta)
        d = self.delta
        if P_T is None:
            P_T = stationary_riccati(
                np.eye(2) + d * np.diag([1.0, -1.0]), d * np.eye(2),
                d * np.diag([1.0, 0.0]), d * np.eye(2),
            )
        self.P_T = np.asarray(P_T, float)
        if self.P_T.shape != (2, 2):
            raise InputError("P_T must be 2 x 2")

    def f(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        d = self.delta
        x1, x2 = x[..., 0], x[..., 1]
        u1, u2 = u[..., 0], u[..., 1]
        return np.stack([x1 + d * (x1 + u1), x2 + d * (u2 * x1 - x2 + u2)], axis=-1)

    def h(self, x):
        return np.asarray(x, float)[..., 1:2]

    def l(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        return self.delta * (x[..., 0] ** 2 + np.sum(u**2, axis=-1))

    def m(self, x):
        x = np.asarray(x, float)
        return np.einsum("...i,ij,...j->...", x, self.P_T, x)

    def derivatives(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        x = np.broadcast_to(x, batch + (2,))
        u = np.broadcast_to(u, batch + (2,))
        d = self.delta
        A = _zeros(batch, 2, 2)
        A[..., 0, 0] = 1 + d
        A[..., 1, 0] = d * u[..., 1]
        A[..., 1, 1] = 1 - d
        B = _zeros(batch, 2, 2)
        B[..., 0, 0] = d
        B[..., 1, 1] = d * (1 + x[..., 0])
        C = _zeros(batch, 1, 2)
        C[..., 0, 1] = 1.0
        L = _zeros(batch, 2, 2, 2)
        L[..., 1, 1, 0] = d
        q = _zeros(batch, 2)
        q[..., 0] = 2 * d * x[..., 0]
        Q = _zeros(batch, 2, 2)
        Q[..., 0, 0] = 2 * d
        return DerivativeBundle(
            A=A, B=B, C=C, q=q, r=2 * d * u.copy(),
            K=_zeros(batch, 2, 2, 2), L=L, M=_zeros(batch, 2, 2, 2),
            Q=Q, R=np.broadcast_to(2 * d * np.eye(2), batch + (2, 2)).copy(), S=_zeros(batch, 2, 2),
        )

    def terminal_derivatives(self, x):
        x = np.asarray(x, float)
        return 2 * x @ self.P_T, np.broadcast_to(2 * self.P_T, x.shape[:-1] + (2, 2)).copy()


class PredatorPrey(Model):
    """One explicit Euler step of the controlled predator-prey dynamics.

    ::

        z1' = z1 - z1 z2
        z2' = -z2 + z1 z2 + u z3 z2
        z3' = -z3 + 0.5

    Measurement ``h(z) = z1``; stage cost ``delta((z1-1)^2 + (z2-1)^2 + u^2)``;
    terminal cost ``(z - z_s)' P_T (z - z_s)`` with ``z_s = (1, 1, 0.5)``.
    """

    name = "predator_prey"
    z_s = np.array([1.0, 1.0, 0.5])

    def __init__(self, delta=0.01, P_T=None):
        if not delta > 0:
            raise InputError("delta must be positive")
        super().__init__(3, 1, 1)
        self.delta = float(delta)
        if P_T is None:
            b = self.derivatives(self.z_s, np.zeros(1))
            P_T = stationary_riccati(b.A, b.B, 0.5 * b.Q, 0.5 * b.R)
        self.P_T = np.asarray(P_T, float)

    def f(self, z, u):
        z, u = np.asarray(z, float), np.asarray(u, float)
        d = self.delta
        z1, z2, z3 = z[..., 0], z[..., 1], z[..., 2]
        uu = u[..., 0]
        return np.stack([
            z1 + d * (z1 - z1 * z2),
            z2 + d * (-z2 + z1 * z2 + uu * z3 * z2),
            z3 + d * (-z3 + 0.5),
        ], axis=-1)

    def h(self, z):
        return np.asarray(z, float)[..., 0:1]

    def l(self, z, u):
        z, u = np.asarray(z, float), np.asarray(u, float)
        return self.delta * ((z[..., 0] - 1) ** 2 + (z[..., 1] - 1) ** 2 + u[..., 0] ** 2)

    def m(self, z):
        e = np.asarray(z, float) - self.z_s
        return np.einsum("...i,ij,...j->...", e, self.P_T, e)

    def derivatives(self, z, u):
        z, u = np.asarray(z, float), np.asarray(u, float)
        batch = np.broadcast_shapes(z.shape[:-1], u.shape[:-1])
        z = np.broadcast_to(z, batch + (3,))
        u = np.broadcast_to(u, batch + (1,))
        d = self.delta
        z1, z2, z3 = z[..., 0], z[..., 1], z[..., 2]
        uu = u[..., 0]
        A = _zeros(batch, 3, 3)
        A[..., 0, 0] = 1 + d * (1 - z2)
        A[..., 0, 1] = -d * z1
        A[..., 1, 0] = d * z2
        A[..., 1, 1] = 1 + d * (-1 + z1 + uu * z3)
        A[..., 1, 2] = d * uu * z2
        A[..., 2, 2] = 1 - d
        B = _zeros(batch, 3, 1)
        B[..., 1, 0] = d * z3 * z2
        C = _zeros(batch, 1, 3)
        C[..., 0, 0] = 1.0
        K = _zeros(batch, 3, 3, 3)
        K[..., 0, 0, 1] = K[..., 0, 1, 0] = -d
        K[..., 1, 0, 1] = K[..., 1, 1, 0] = d
        K[..., 1, 1, 2] = K[..., 1, 2, 1] = d * uu
        L = _zeros(batch, 3, 1, 3)
        L[..., 1, 0, 1] = d * z3
        L[..., 1, 0, 2] = d * z2
        q = _zeros(batch, 3)
        q[..., 0] = 2 * d * (z1 - 1)
        q[..., 1] = 2 * d * (z2 - 1)
        Q = _zeros(batch, 3, 3)
        Q[..., 0, 0] = Q[..., 1, 1] = 2 * d
        return DerivativeBundle(
            A=A, B=B, C=C, q=q, r=2 * d * u.copy(),
            K=K, L=L, M=_zeros(batch, 3, 1, 1),
            Q=Q, R=np.full(batch + (1, 1), 2 * d), S=_zeros(batch, 1, 3),
        )

    def terminal_derivatives(self, z):
        e = np.asarray(z, float) - self.z_s
        return 2 * e @ self.P_T, np.broadcast_to(2 * self.P_T, e.shape[:-1] + (3, 3)).copy()


BENCHMARKS = ("motivating_example", "predator_prey", "lq_custom")


def instantiate_benchmark(name, params=None) -> Model:
    """Build a benchmark model by id.

    ``params`` holds ``delta`` for the nonlinear benchmarks and the matrices
    ``A, B, C, Q, R`` (optionally ``S, Pf``) for ``lq_custom``.
    """
    params = dict(params or {})
    if name == "motivating_example":
        return MotivatingExample(**_take(params, {"delta", "P_T"}))
    if name == "predator_prey":
        return PredatorPrey(**_take(params, {"delta", "P_T"}))
    if name == "lq_custom":
        return LinearQuadraticModel(**_take(params, {"A", "B", "C", "Q", "R", "S", "Pf"}))
    raise InputError(f"unknown benchmark {name!r}; expected one of {BENCHMARKS}")


def _take(params, allowed):
    extra = set(params) - allowed
    if extra:
        raise InputError(f"unexpected benchmark parameters: {sorted(extra)}")
    if "delta" in params and not float(params["delta"]) > 0:
        raise InputError("delta must be positive")
    return params

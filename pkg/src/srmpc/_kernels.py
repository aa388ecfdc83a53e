"""Compiled inner loops for the O(N) forward/backward sweeps.

Every public single-step operation (``ekf_cov_update``, ``riccati_step``)
calls the same step function that the sweeps below loop over, so a sweep is
bit-identical to composing the single steps.

Status convention: ``-1`` means success, otherwise the failing stage index.
"""

import numpy as np
from numba import njit

GUU_MIN_EIG = 1e-10


@njit(cache=True)
def sym(X):
    return 0.5 * (X + X.T)


@njit(cache=True)
def psd_pinv(D):
    """Pseudo-inverse of a symmetric matrix; eigenvalues below 1e-12 * max(1, |D|_2) are dropped."""
    w, V = np.linalg.eigh(D)
    thr = 1e-12 * max(1.0, np.max(np.abs(w)))
    inv = np.zeros_like(w)
    for i in range(w.shape[0]):
        if abs(w[i]) > thr:
            inv[i] = 1.0 / w[i]
    return (V * inv) @ V.T


@njit(cache=True)
def cov_step(A, C, Sigma, W, V):
    """One EKF covariance update; returns the new covariance and the gain ``Sigma C' D^+``."""
    SCt = Sigma @ C.T
    gain = SCt @ psd_pinv(C @ SCt + V)
    post = sym(Sigma - gain @ SCt.T)
    return sym(A @ post @ A.T + W), gain


@njit(cache=True)
def cov_sweep(A, C, Sigma0, W, V):
    """Forward variance prediction; also returns ``A_k (I - gain_k C_k)`` for adjoints."""
    N, nx = A.shape[0], A.shape[1]
    Sig = np.empty((N + 1, nx, nx))
    Jt = np.empty((N, nx, nx))
    Sig[0] = Sigma0
    eye = np.eye(nx)
    for k in range(N):
        Sig[k + 1], gain = cov_step(A[k], C[k], Sig[k], W, V)
        Jt[k] = A[k] @ (eye - gain @ C[k])
    return Sig, Jt


@njit(cache=True)
def contract(T, p):
    """sum_i p[i] T[i]"""
    out = np.zeros((T.shape[1], T.shape[2]))
    for i in range(T.shape[0]):
        out += p[i] * T[i]
    return out


@njit(cache=True)
def dual_contract(T, G):
    """Vector with entries <T[i], G> (Frobenius)."""
    out = np.zeros(T.shape[0])
    for i in range(T.shape[0]):
        out[i] = np.sum(T[i] * G)
    return out


@njit(cache=True)
def riccati_core(A, B, q, K, L, M, Q, R, S, p1, P1):
    """One backward step. Returns p, P, Phi, Gxx, Gux, Guu, Z = Guu^-1 Gux, min eig(Guu)."""
    P1A = P1 @ A
    Gxx = sym(Q + A.T @ P1A + contract(K, p1))
    Gux = S + B.T @ P1A + contract(L, p1)
    Guu = sym(R + B.T @ P1 @ B + contract(M, p1))
    w, V = np.linalg.eigh(Guu)
    min_eig = w[0]
    nu, nx = Gux.shape
    if min_eig <= GUU_MIN_EIG:
        Z = np.full((nu, nx), np.nan)
        Phi = np.full((nx, nx), np.nan)
    else:
        Z = ((V / w) @ V.T) @ Gux
        Phi = sym(Gux.T @ Z)
    p = A.T @ p1 + q
    P = Gxx - Phi
    return p, P, Phi, Gxx, Gux, Guu, Z, min_eig


@njit(cache=True)
def riccati_sweep(A, B, q, K, L, M, Q, R, S, pN, PN):
    N, nx, nu = A.shape[0], A.shape[1], B.shape[2]
    p = np.empty((N + 1, nx))
    P = np.empty((N + 1, nx, nx))
    Phi = np.empty((N, nx, nx))
    Gxx = np.empty((N, nx, nx))
    Gux = np.empty((N, nu, nx))
    Guu = np.empty((N, nu, nu))
    Z = np.empty((N, nu, nx))
    p[N] = pN
    P[N] = PN
    for k in range(N - 1, -1, -1):
        out = riccati_core(A[k], B[k], q[k], K[k], L[k], M[k], Q[k], R[k], S[k], p[k + 1], P[k + 1])
        p[k], P[k], Phi[k], Gxx[k], Gux[k], Guu[k], Z[k], min_eig = out
        if min_eig <= GUU_MIN_EIG:
            return p, P, Phi, Gxx, Gux, Guu, Z, k, min_eig
    return p, P, Phi, Gxx, Gux, Guu, Z, -1, 0.0


@njit(cache=True)
def newton_direction(A, B, q, r, K, L, M, Q, R, S, lam, gN, HN, mu):
    """Minimizer of the second-order model of the reduced objective (exact Lagrangian Hessian).

    ``lam`` is the costate of the current iterate and supplies the curvature
    of the dynamics; ``mu`` adds ``mu * |du|^2`` to the model.
    """
    N, nx, nu = A.shape[0], A.shape[1], B.shape[2]
    kff = np.empty((N, nu))
    Kfb = np.empty((N, nu, nx))
    v = gN.copy()
    V = HN.copy()
    eye_u = np.eye(nu)
    for k in range(N - 1, -1, -1):
        VA = V @ A[k]
        Qx = q[k] + A[k].T @ v
        Qu = r[k] + B[k].T @ v
        Qxx = sym(Q[k] + contract(K[k], lam[k + 1]) + A[k].T @ VA)
        Qux = S[k] + contract(L[k], lam[k + 1]) + B[k].T @ VA
        Quu = sym(R[k] + contract(M[k], lam[k + 1]) + B[k].T @ V @ B[k] + mu * eye_u)
        w, E = np.linalg.eigh(Quu)
        if w[0] <= 1e-14 * max(1.0, w[-1]):
            return np.empty((N, nu)), k
        Qinv = (E / w) @ E.T
        kff[k] = -Qinv @ Qu
        Kfb[k] = -Qinv @ Qux
        v = Qx + Kfb[k].T @ Qu
        V = sym(Qxx + Kfb[k].T @ Qux)
    du = np.empty((N, nu))
    dx = np.zeros(nx)
    for k in range(N):
        du[k] = kff[k] + Kfb[k] @ dx
        dx = A[k] @ dx + B[k] @ du[k]
    return du, -1


@njit(cache=True)
def omega_adjoint_forward(A, B, K, L, M, Sigma, Z, alpha):
    """Forward recursion for the multipliers of the backward Riccati constraints.

    Returns ``pi, Pi`` (multipliers of ``p_k, P_k``) and the weights
    ``Gbxx, Gbux, Gbuu`` with which the G-blocks of each stage enter the
    linearized Lagrangian.
    """
    N, nx, nu = A.shape[0], A.shape[1], B.shape[2]
    pi = np.zeros((N + 1, nx))
    Pi = np.zeros((N + 1, nx, nx))
    Gbxx = np.empty((N, nx, nx))
    Gbux = np.empty((N, nu, nx))
    Gbuu = np.empty((N, nu, nu))
    for k in range(N):
        Y = 0.5 * alpha * Sigma[k] - Pi[k]
        Gbxx[k] = Pi[k]
        ZY = Z[k] @ Y
        Gbux[k] = 2.0 * ZY
        Gbuu[k] = -sym(ZY @ Z[k].T)
        pi[k + 1] = (A[k] @ pi[k] + dual_contract(K[k], Gbxx[k])
                     + dual_contract(L[k], Gbux[k]) + dual_contract(M[k], Gbuu[k]))
        Pi[k + 1] = sym(A[k] @ Gbxx[k] @ A[k].T + B[k] @ Gbux[k] @ A[k].T + B[k] @ Gbuu[k] @ B[k].T)
    return pi, Pi, Gbxx, Gbux, Gbuu


@njit(cache=True)
def sigma_adjoint_backward(Jt, Phi, alpha):
    N, nx = Jt.shape[0], Jt.shape[1]
    Sadj = np.zeros((N + 1, nx, nx))
    for k in range(N - 1, -1, -1):
        Sadj[k] = sym(0.5 * alpha * Phi[k] + Jt[k].T @ Sadj[k + 1] @ Jt[k])
    return Sadj


@njit(cache=True)
def costate_backward(A, B, q, r, extra_x, extra_u, lamN):
    """Costate sweep and reduced gradient: ``lam_k = q_k + A_k' lam_{k+1} + extra_x[k]``."""
    N, nx, nu = A.shape[0], A.shape[1], B.shape[2]
    lam = np.empty((N + 1, nx))
    grad = np.empty((N, nu))
    lam[N] = lamN
    for k in range(N - 1, -1, -1):
        grad[k] = r[k] + B[k].T @ lam[k + 1] + extra_u[k]
        lam[k] = q[k] + A[k].T @ lam[k + 1] + extra_x[k]
    return lam, grad

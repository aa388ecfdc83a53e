"""Discrete-time system abstraction.

A :class:`Model` bundles the dynamics ``f``, measurement ``h``, stage cost
``l`` and terminal cost ``m`` together with their first and second
derivatives. All evaluators accept leading batch dimensions, so a whole
trajectory can be differentiated in one call::

    bundle = model.derivatives(x[:-1], u)   # A has shape (N, n_x, n_x)

Tensor conventions for second derivatives of ``f`` (one slice per output
component ``i``)::

    K[i] = d2 f_i / dx dx     (n_x, n_x, n_x)
    L[i] = d2 f_i / du dx     (n_x, n_u, n_x)
    M[i] = d2 f_i / du du     (n_x, n_u, n_u)

and the contraction ``K . p = sum_i p_i K[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, NamedTuple

import numpy as np

from .errors import InputError, NumericDomainError


def contract(tensor, p):
    """Contract a stacked derivative tensor with a weight vector over its output axis."""
    return np.einsum("...ijk,...i->...jk", tensor, p)


@dataclass
class DerivativeBundle:
    """First and second derivatives of ``f``, ``h`` and ``l`` at a point (or a batch)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    q: np.ndarray
    r: np.ndarray
    K: np.ndarray
    L: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray

    def __getitem__(self, index):
        return DerivativeBundle(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def is_finite(self):
        return all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self))


class Model:
    """Base class for nonlinear discrete-time systems.

    Subclasses implement the batched evaluators. Derivatives must be exact up
    to roundoff; ``check_derivatives`` compares them with finite differences.
    """

    name = "model"

    def __init__(self, n_x, n_u, n_h):
        if min(n_x, n_u, n_h) < 1:
            raise InputError("dimensions must be positive")
        self.n_x, self.n_u, self.n_h = int(n_x), int(n_u), int(n_h)

    def f(self, x, u):
        raise NotImplementedError

    def h(self, x):
        raise NotImplementedError

    def l(self, x, u):
        raise NotImplementedError

    def m(self, x):
        raise NotImplementedError

    def derivatives(self, x, u) -> DerivativeBundle:
        raise NotImplementedError

    def terminal_derivatives(self, x):
        """Return ``(grad m, hess m)`` at ``x``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(n_x={self.n_x}, n_u={self.n_u}, n_h={self.n_h})"


def _check_point(model, x, u=None):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (model.n_x,):
        raise InputError(f"state must have trailing dimension {model.n_x}, got shape {x.shape}")
    if u is None:
        return x
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (model.n_u,):
        raise InputError(f"control must have trailing dimension {model.n_u}, got shape {u.shape}")
    return x, u


def eval_bundle(model: Model, x, u) -> DerivativeBundle:
    """Evaluate all derivative blocks at ``(x, u)`` with shape and finiteness checks."""
    x, u = _check_point(model, x, u)
    bundle = model.derivatives(x, u)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    nx, nu, nh = model.n_x, model.n_u, model.n_h
    expected = {
        "A": (nx, nx), "B": (nx, nu), "C": (nh, nx), "q": (nx,), "r": (nu,),
        "K": (nx, nx, nx), "L": (nx, nu, nx), "M": (nx, nu, nu),
        "Q": (nx, nx), "R": (nu, nu), "S": (nu, nx),
    }
    for name, shape in expected.items():
        got = np.shape(getattr(bundle, name))
        if got != batch + shape:
            raise InputError(f"bundle block {name} has shape {got}, expected {batch + shape}")
    if not bundle.is_finite():
        raise NumericDomainError(f"non-finite derivative evaluated at x={x}, u={u}")
    return bundle


def _central_jacobian(fun, z, step):
    """Central-difference Jacobian of ``fun`` at the 1-D point ``z``; columns index ``z``."""
    z = np.asarray(z, dtype=float)
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((np.asarray(fun(z + e), float) - np.asarray(fun(z - e), float)) / (2 * step))
    return np.stack(cols, axis=-1)


def check_derivatives(model: Model, x, u, step=1e-5):
    """Compare analytic derivatives with central finite differences.

    First derivatives are checked against differences of ``f, h, l, m``;
    second derivatives against differences of the analytic first derivatives.
    Returns ``{block: max relative error}`` where the error of a block is
    ``max|analytic - fd| / max(1, max|fd|)``.
    """
    if step <= 0:
        raise InputError("step must be positive")
    x, u = _check_point(model, x, u)
    nx = model.n_x
    b = model.derivatives(x, u)
    g_m, H_m = model.terminal_derivatives(x)

    def fxu(z):
        return model.f(z[:nx], z[nx:])

    z = np.concatenate([x, u])
    J_f = _central_jacobian(fxu, z, step)
    grad_l = _central_jacobian(lambda zz: np.atleast_1d(model.l(zz[:nx], zz[nx:])), z, step)[0]
    dA = _central_jacobian(lambda zz: model.derivatives(zz[:nx], zz[nx:]).A, z, step)
    dB = _central_jacobian(lambda zz: model.derivatives(zz[:nx], zz[nx:]).B, z, step)
    dr = _central_jacobian(lambda zz: model.derivatives(zz[:nx], zz[nx:]).r, z, step)
    dq = _central_jacobian(lambda xx: model.derivatives(xx, u).q, x, step)

    fd = {
        "A": J_f[:, :nx],
        "B": J_f[:, nx:],
        "C": _central_jacobian(model.h, x, step),
        "q": grad_l[:nx],
        "r": grad_l[nx:],
        # K[i][a, b] = dA[i, a]/dx_b ; L[i][c, a] = dA[i, a]/du_c ; M[i][c, d] = dB[i, c]/du_d
        "K": dA[:, :, :nx],
        "L": np.transpose(dA[:, :, nx:], (0, 2, 1)),
        "M": dB[:, :, nx:],
        "Q": dq,
        "R": dr[:, nx:],
        "S": dr[:, :nx],
        "m_x": _central_jacobian(lambda xx: np.atleast_1d(model.m(xx)), x, step)[0],
        "m_xx": _central_jacobian(lambda xx: model.terminal_derivatives(xx)[0], x, step),
    }
    analytic = {name: getattr(b, name) for name in "ABCqrKLMQRS"}
    analytic["m_x"], analytic["m_xx"] = g_m, H_m
    report = {}
    for name, ref in fd.items():
        ref = np.asarray(ref, float)
        err = np.max(np.abs(np.asarray(analytic[name], float) - ref)) if ref.size else 0.0
        report[name] = float(err / max(1.0, float(np.max(np.abs(ref))) if ref.size else 1.0))
    return report


class TrajectorySlice(NamedTuple):
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray


def upper(seq, k):
    """Columns ``0..k`` of a sequence; ``k = -1`` gives the empty sequence."""
    seq = np.asarray(seq)
    if not -1 <= k < len(seq):
        raise InputError(f"upper index {k} out of range for length {len(seq)}")
    return seq[: k + 1]


def lower(seq, k):
    """Columns ``k..end`` of a sequence; ``k = len(seq)`` gives the empty sequence."""
    seq = np.asarray(seq)
    if not 0 <= k <= len(seq):
        raise InputError(f"lower index {k} out of range for length {len(seq)}")
    return seq[k:]


@dataclass
class Trajectory:
    """State, control and disturbance sequences: ``x`` has one more entry than ``u`` and ``w``."""

    x: np.ndarray
    u: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.asarray(self.u, dtype=float).reshape(len(self.u), -1) if len(self.u) else np.zeros((0, 1))
        self.w = np.asarray(self.w, dtype=float).reshape(len(self.w), -1) if len(self.w) else np.zeros((0, self.x.shape[1]))
        if not len(self.u) == len(self.w) == len(self.x) - 1:
            raise InputError(
                f"inconsistent lengths |x|={len(self.x)}, |u|={len(self.u)}, |w|={len(self.w)}"
            )

    @property
    def N(self):
        return len(self.u)

    def upper(self, k):
        return TrajectorySlice(upper(self.x, k), upper(self.u, k), upper(self.w, k))

    def lower(self, k):
        return TrajectorySlice(lower(self.x, k), lower(self.u, k), lower(self.w, k))


# -- user-defined models -----------------------------------------------------


def _batched(fun, out_shape):
    """Lift a single-point function to leading batch dimensions by looping."""

    def wrapped(*args):
        args = [np.asarray(a, dtype=float) for a in args]
        batch = np.broadcast_shapes(*(a.shape[:-1] for a in args))
        if batch == ():
            return np.asarray(fun(*args), dtype=float).reshape(out_shape)
        args = [np.broadcast_to(a, batch + a.shape[-1:]) for a in args]
        out = np.empty(batch + out_shape)
        for idx in np.ndindex(*batch):
            out[idx] = np.asarray(fun(*(a[idx] for a in args)), dtype=float).reshape(out_shape)
        return out

    return wrapped


class FunctionModel(Model):
    """Model assembled from plain single-point callables.

    Any derivative that is not supplied is filled in by central finite
    differences: first derivatives from the functions themselves, second
    derivatives from the first derivatives, with step ``1e-6 * (1 + |point|)``.

    Optional derivative callables (keyword arguments): ``f_x, f_u, h_x, l_x,
    l_u, l_xx, l_uu, l_ux, f_xx, f_ux, f_uu, m_x, m_xx``.
    """

    name = "custom"
    _fd_rel = 1e-6
    _fd_nested = 1e-4

    def __init__(self, n_x, n_u, n_h, f, h, l, m, **derivs: Callable):
        super().__init__(n_x, n_u, n_h)
        known = {"f_x", "f_u", "h_x", "l_x", "l_u", "l_xx", "l_uu", "l_ux",
                 "f_xx", "f_ux", "f_uu", "m_x", "m_xx"}
        unknown = set(derivs) - known
        if unknown:
            raise InputError(f"unknown derivative callables: {sorted(unknown)}")
        self._f, self._h, self._l, self._m = f, h, l, m
        self._d = derivs

    def _step(self, *pts):
        return self._fd_rel * (1.0 + np.linalg.norm(np.concatenate([np.ravel(p) for p in pts])))

    def _jac(self, fun, x, u, wrt, rel=None):
        """FD derivative of ``fun(x, u)`` w.r.t. ``x`` (wrt=0) or ``u``; new axis last."""
        h = (rel or self._fd_rel) * (1.0 + np.linalg.norm(np.concatenate([np.ravel(x), np.ravel(u)])))
        base = (x, u)
        cols = []
        for j in range(base[wrt].size):
            e = np.zeros_like(base[wrt])
            e[j] = h
            plus = [x, u]
            minus = [x, u]
            plus[wrt] = base[wrt] + e
            minus[wrt] = base[wrt] - e
            cols.append((np.asarray(fun(*plus), float) - np.asarray(fun(*minus), float)) / (2 * h))
        return np.stack(cols, axis=-1)

    def f(self, x, u):
        return _batched(self._f, (self.n_x,))(x, u)

    def h(self, x):
        return _batched(self._h, (self.n_h,))(x)

    def l(self, x, u):
        return _batched(self._l, ())(x, u)

    def m(self, x):
        return _batched(self._m, ())(x)

    def _point_bundle(self, x, u):
        d = self._d
        A = d["f_x"](x, u) if "f_x" in d else self._jac(self._f, x, u, 0)
        B = d["f_u"](x, u) if "f_u" in d else self._jac(self._f, x, u, 1)
        C = d["h_x"](x) if "h_x" in d else self._jac(lambda xx, _: self._h(xx), x, u, 0)
        q = d["l_x"](x, u) if "l_x" in d else self._jac(lambda xx, uu: np.atleast_1d(self._l(xx, uu)), x, u, 0)[0]
        r = d["l_u"](x, u) if "l_u" in d else self._jac(lambda xx, uu: np.atleast_1d(self._l(xx, uu)), x, u, 1)[0]

        def fx(xx, uu):
            return d["f_x"](xx, uu) if "f_x" in d else self._jac(self._f, xx, uu, 0)

        def fu(xx, uu):
            return d["f_u"](xx, uu) if "f_u" in d else self._jac(self._f, xx, uu, 1)

        def lx(xx, uu):
            return d["l_x"](xx, uu) if "l_x" in d else self._jac(lambda a, b: np.atleast_1d(self._l(a, b)), xx, uu, 0)[0]

        def lu(xx, uu):
            return d["l_u"](xx, uu) if "l_u" in d else self._jac(lambda a, b: np.atleast_1d(self._l(a, b)), xx, uu, 1)[0]

        # differencing an already differenced quantity needs a wider step
        rf = self._fd_rel if {"f_x", "f_u"} <= set(d) else self._fd_nested
        rl = self._fd_rel if {"l_x", "l_u"} <= set(d) else self._fd_nested
        K = d["f_xx"](x, u) if "f_xx" in d else self._jac(fx, x, u, 0, rf)
        L = d["f_ux"](x, u) if "f_ux" in d else np.transpose(self._jac(fx, x, u, 1, rf), (0, 2, 1))
        M = d["f_uu"](x, u) if "f_uu" in d else self._jac(fu, x, u, 1, rf)
        Q = d["l_xx"](x, u) if "l_xx" in d else self._jac(lx, x, u, 0, rl)
        R = d["l_uu"](x, u) if "l_uu" in d else self._jac(lu, x, u, 1, rl)
        S = d["l_ux"](x, u) if "l_ux" in d else self._jac(lu, x, u, 0, rl)
        if "f_xx" not in d:
            K = 0.5 * (K + np.transpose(K, (0, 2, 1)))
        if "f_uu" not in d:
            M = 0.5 * (M + np.transpose(M, (0, 2, 1)))
        if "l_xx" not in d:
            Q = 0.5 * (Q + Q.T)
        if "l_uu" not in d:
            R = 0.5 * (R + R.T)
        nx, nu, nh = self.n_x, self.n_u, self.n_h
        return [np.reshape(np.asarray(a, float), s) for a, s in zip(
            (A, B, C, q, r, K, L, M, Q, R, S),
            ((nx, nx), (nx, nu), (nh, nx), (nx,), (nu,), (nx, nx, nx), (nx, nu, nx),
             (nx, nu, nu), (nx, nx), (nu, nu), (nu, nx)),
        )]

    def derivatives(self, x, u):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        if batch == ():
            return DerivativeBundle(*self._point_bundle(x, u))
        xb = np.broadcast_to(x, batch + x.shape[-1:])
        ub = np.broadcast_to(u, batch + u.shape[-1:])
        parts = [self._point_bundle(xb[idx], ub[idx]) for idx in np.ndindex(*batch)]
        stacked = [np.stack([p[i] for p in parts]).reshape(batch + parts[0][i].shape) for i in range(11)]
        return DerivativeBundle(*stacked)

    def _point_terminal(self, x):
        d = self._d
        h = self._step(x)

        def grad(xx):
            if "m_x" in d:
                return np.asarray(d["m_x"](xx), float)
            return _central_jacobian(lambda z: np.atleast_1d(self._m(z)), xx, self._step(xx))[0]

        g = grad(x)
        if "m_x" not in d:
            h = self._fd_nested * (1.0 + np.linalg.norm(x))
        H = np.asarray(d["m_xx"](x), float) if "m_xx" in d else _central_jacobian(grad, x, h)
        if "m_xx" not in d:
            H = 0.5 * (H + H.T)
        return g.reshape(self.n_x), H.reshape(self.n_x, self.n_x)

    def terminal_derivatives(self, x):
        x = np.asarray(x, float)
        if x.ndim == 1:
            return self._point_terminal(x)
        parts = [self._point_terminal(x[idx]) for idx in np.ndindex(*x.shape[:-1])]
        g = np.stack([p[0] for p in parts]).reshape(x.shape)
        H = np.stack([p[1] for p in parts]).reshape(x.shape + (self.n_x,))
        return g, H

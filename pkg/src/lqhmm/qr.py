"""Weighted linear quantile regression by a Frisch-Newton interior point method.

The solver works on the bounded dual LP

    max  y'a   s.t.  X'a = (1 - tau) X'1,  0 <= a <= 1

with Mehrotra predictor-corrector steps.  Observation weights are folded into
the rows, ``w * rho(y - x'b) == rho(w*y - w*x'b)`` for ``w >= 0``.  Each
iteration costs one ``p x p`` solve, which keeps the M-step cheap for the
tall, narrow designs produced by state expansion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from scipy import linalg, sparse
from scipy.optimize import linprog

from .core import IdentifiabilityError, _tau

__all__ = ["QRResult", "weighted_qr", "weighted_quantile", "qr_objective", "check_rank"]

_STEP = 0.99995


@dataclass(frozen=True)
class QRResult:
    coef: np.ndarray
    objective: float
    n_iter: int
    converged: bool
    gap: float


def qr_objective(X, y, coef, tau, weights=None) -> float:
    r = np.asarray(y, dtype=float) - np.asarray(X, dtype=float) @ np.asarray(coef, dtype=float)
    loss = r * (_tau(tau) - (r < 0))
    if weights is not None:
        loss = loss * weights
    return float(loss.sum())


def _max_step(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return min(float(ratio.min()), 1e20)


@numba.njit(cache=True)
def _normal_matrix(A, q):
    p, n = A.shape
    M = np.zeros((p, p))
    for i in range(n):
        qi = q[i]
        for j in range(p):
            aj = A[j, i] * qi
            for k in range(j + 1):
                M[j, k] += aj * A[k, i]
    for j in range(p):
        for k in range(j):
            M[k, j] = M[j, k]
    return M


@numba.njit(cache=True)
def _matvec_t(A, v, out):
    # out = A' v
    p, n = A.shape
    for i in range(n):
        acc = 0.0
        for j in range(p):
            acc += A[j, i] * v[j]
        out[i] = acc


@numba.njit(cache=True)
def _fnb(A, c, b, tau, tol, max_iter, y):
    """Frisch-Newton iterations for ``min c'x, Ax = b, 0 <= x <= 1`` from dual start ``y``."""
    p, n = A.shape
    x = np.full(n, 1.0 - tau)
    s = 1.0 - x
    r = np.empty(n)
    _matvec_t(A, y, r)
    z = np.empty(n)
    w = np.empty(n)
    for i in range(n):
        r[i] = c[i] - r[i]
        if r[i] == 0.0:
            r[i] = 0.001
        z[i] = r[i] if r[i] > 0 else 0.0
        w[i] = z[i] - r[i]
    q = np.empty(n)
    dx = np.empty(n)
    dz = np.empty(n)
    dw = np.empty(n)
    xi = np.empty(n)
    aty = np.empty(n)
    it = 0
    while True:
        cx = 0.0
        gap = 0.0
        for i in range(n):
            cx += c[i] * x[i]
            gap += w[i]
        gap += cx - y @ b
        if not np.isfinite(gap):
            return y, it, False, gap
        if gap <= tol * max(1.0, abs(cx)):
            return y, it, True, gap
        if it >= max_iter:
            return y, it, False, gap
        it += 1
        for i in range(n):
            q[i] = 1.0 / (z[i] / x[i] + w[i] / s[i])
            r[i] = z[i] - w[i]
            xi[i] = q[i] * r[i]
        M = _normal_matrix(A, q)
        dy = np.linalg.solve(M, A @ xi)
        _matvec_t(A, dy, aty)
        fx = 1e20
        fs = 1e20
        fz = 1e20
        fw = 1e20
        for i in range(n):
            dx[i] = q[i] * (aty[i] - r[i])
            dz[i] = -z[i] * (dx[i] / x[i] + 1.0)
            dw[i] = -w[i] * (-dx[i] / s[i] + 1.0)
            if dx[i] < 0.0:
                fx = min(fx, -x[i] / dx[i])
            elif dx[i] > 0.0:
                fs = min(fs, s[i] / dx[i])
            if dz[i] < 0.0:
                fz = min(fz, -z[i] / dz[i])
            if dw[i] < 0.0:
                fw = min(fw, -w[i] / dw[i])
        fp = min(_STEP * min(fx, fs), 1.0)
        fd = min(_STEP * min(fw, fz), 1.0)
        if min(fp, fd) < 1.0:
            mu = 0.0
            g = 0.0
            for i in range(n):
                mu += z[i] * x[i] + w[i] * s[i]
                g += (z[i] + fd * dz[i]) * (x[i] + fp * dx[i]) + (w[i] + fd * dw[i]) * (s[i] - fp * dx[i])
            mu = mu * (g / mu) ** 3 / (2.0 * n)
            for i in range(n):
                dxdz = dx[i] * dz[i]
                dsdw = -dx[i] * dw[i]
                xi[i] = mu * (1.0 / x[i] - 1.0 / s[i]) - dxdz / x[i] + dsdw / s[i]
                dw[i] = dsdw  # stash the second-order terms
                dz[i] = dxdz
                aty[i] = q[i] * (r[i] - xi[i])
            dy = np.linalg.solve(M, A @ aty)
            _matvec_t(A, dy, aty)
            fx = 1e20
            fs = 1e20
            fz = 1e20
            fw = 1e20
            for i in range(n):
                dxdz = dz[i]
                dsdw = dw[i]
                dx[i] = q[i] * (aty[i] + xi[i] - r[i])
                dz[i] = (mu - x[i] * z[i] - dxdz - z[i] * dx[i]) / x[i]
                dw[i] = (mu - s[i] * w[i] - dsdw + w[i] * dx[i]) / s[i]
                if dx[i] < 0.0:
                    fx = min(fx, -x[i] / dx[i])
                elif dx[i] > 0.0:
                    fs = min(fs, s[i] / dx[i])
                if dz[i] < 0.0:
                    fz = min(fz, -z[i] / dz[i])
                if dw[i] < 0.0:
                    fw = min(fw, -w[i] / dw[i])
            fp = min(_STEP * min(fx, fs), 1.0)
            fd = min(_STEP * min(fw, fz), 1.0)
        for i in range(n):
            x[i] += fp * dx[i]
            s[i] -= fp * dx[i]
            w[i] += fd * dw[i]
            z[i] += fd * dz[i]
        y = y + fd * dy


def _linprog_fallback(Xw, yw, tau):
    n, p = Xw.shape
    A = sparse.hstack([sparse.csr_matrix(Xw), sparse.eye(n), -sparse.eye(n)]).tocsc()
    cost = np.r_[np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)]
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = linprog(cost, A_eq=A, b_eq=yw, bounds=bounds, method="highs")
    if res.status != 0:
        raise ArithmeticError(f"weighted quantile regression LP failed: {res.message}")
    return res.x[:p]


def weighted_qr(X, y, tau, weights=None, tol: float = 1e-10, max_iter: int = 100) -> QRResult:
    """Minimise ``sum_i w_i rho_tau(y_i - x_i'b)``.

    Parameters
    ----------
    X : ndarray, shape (n, p)
    y : ndarray, shape (n,)
    tau : float
    weights : ndarray, shape (n,), optional
        Nonnegative observation weights; rows with zero weight are dropped.
    tol : float
        Stop when the duality gap falls below ``tol * max(1, |objective|)``.
    """
    tau = _tau(tau)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if weights is None:
        weights = np.ones(y.size)
    weights = np.asarray(weights, dtype=float).ravel()
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    keep = weights > 0
    Xw = X[keep] * weights[keep, None]
    yw = y[keep] * weights[keep]
    p = X.shape[1]
    if p == 0:
        return QRResult(np.zeros(0), qr_objective(X, y, np.zeros(0), tau, weights), 0, True, 0.0)
    A = np.ascontiguousarray(Xw.T)
    c = -yw
    y0 = linalg.lstsq(Xw, c, lapack_driver="gelsy")[0]
    try:
        dual, n_iter, ok, gap = _fnb(A, c, (1.0 - tau) * Xw.sum(axis=0), tau, tol, max_iter, y0)
    except Exception:  # singular normal matrix
        dual, n_iter, ok, gap = y0, 0, False, np.inf
    coef = -dual
    if not ok or not np.all(np.isfinite(coef)):
        coef = _linprog_fallback(Xw, yw, tau)
        gap = 0.0
    obj = qr_objective(X, y, coef, tau, weights)
    return QRResult(coef=coef, objective=obj, n_iter=n_iter, converged=True, gap=float(gap))


def weighted_quantile(values, tau, weights=None) -> float:
    """Weighted ``tau``-quantile as the minimiser of the weighted check loss.

    Where the minimiser is an interval (only at exact CDF ties), the lower
    end is returned.
    """
    tau = _tau(tau)
    v = np.asarray(values, dtype=float).ravel()
    w = np.ones(v.size) if weights is None else np.asarray(weights, dtype=float).ravel()
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cw = np.cumsum(w)
    return float(v[np.searchsorted(cw, tau * cw[-1] - 1e-12 * cw[-1])])


def check_rank(Z: np.ndarray, names: Sequence[str], tol: float | None = None) -> None:
    """Raise :class:`IdentifiabilityError` naming columns that are linear combinations of others."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[1] == 0:
        return
    scale = np.linalg.norm(Z, axis=0)
    if np.any(scale == 0):
        bad = [names[j] for j in np.flatnonzero(scale == 0)]
        raise IdentifiabilityError(f"design columns identically zero: {bad}", bad)
    _, R, piv = linalg.qr(Z / scale, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = tol if tol is not None else max(Z.shape) * np.finfo(float).eps * d[0] * 1e3
    rank = int(np.sum(d > tol))
    if rank < Z.shape[1]:
        bad = [names[j] for j in sorted(piv[rank:])]
        raise IdentifiabilityError(f"rank-deficient design; collinear columns: {bad}", bad)

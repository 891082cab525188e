"""Weighted proportional-odds fit for the latent drop-out class model.

Cutpoints are optimised as ``(lambda0[0], log(diff(lambda0)))`` so that any
unconstrained step keeps them ordered.  Observations are aggregated by
distinct drop-out time, which makes every evaluation ``O(#distinct T x G)``.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .core import log_ldo_class_probs

__all__ = ["SeparationWarning", "fit_ordered_logit", "ordinal_loglik", "ordinal_gradient", "ordinal_hessian"]

CLIP = 30.0
_MIN_LOG_INCREMENT = -30.0


class SeparationWarning(UserWarning):
    """Weighted ordinal fit diverges; estimates were clipped."""


def _aggregate(weights, T):
    weights = np.asarray(weights, dtype=float)
    T = np.asarray(T, dtype=float).ravel()
    times, inv = np.unique(T, return_inverse=True)
    W = np.zeros((times.size, weights.shape[1]))
    np.add.at(W, inv, weights)
    return W, times


def ordinal_loglik(lambda0, lambda1, W, times) -> float:
    logp = log_ldo_class_probs(times, lambda0, lambda1, W.shape[1])
    with np.errstate(invalid="ignore"):
        terms = np.where(W > 0, W * logp, 0.0)
    return float(terms.sum())


def _pieces(lambda0, lambda1, times):
    c = np.asarray(lambda0)[None, :] + lambda1 * times[:, None]  # (J, G-1)
    F = expit(c)
    f = F * (1.0 - F)
    pi = np.exp(log_ldo_class_probs(times, lambda0, lambda1, len(lambda0) + 1))
    return c, F, f, pi


def ordinal_gradient(lambda0, lambda1, W, times) -> np.ndarray:
    """Gradient of the weighted log-likelihood in ``(lambda0..., lambda1)``."""
    _, _, f, pi = _pieces(lambda0, lambda1, times)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(W > 0, W / pi, 0.0)
    dc = f * (ratio[:, :-1] - ratio[:, 1:])  # (J, G-1)
    return np.r_[dc.sum(axis=0), (dc.sum(axis=1) * times).sum()]


def ordinal_hessian(lambda0, lambda1, W, times) -> np.ndarray:
    """Hessian of the weighted log-likelihood in ``(lambda0..., lambda1)``."""
    _, F, f, pi = _pieces(lambda0, lambda1, times)
    J, K = f.shape
    fp = f * (1.0 - 2.0 * F)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(W > 0, W / pi, 0.0)
        r2 = np.where(W > 0, W / pi**2, 0.0)
    H = np.zeros((K + 1, K + 1))
    for j in range(J):
        Hc = np.zeros((K, K))
        for g in range(K):
            Hc[g, g] = fp[j, g] * (r1[j, g] - r1[j, g + 1]) - f[j, g] ** 2 * (r2[j, g] + r2[j, g + 1])
            if g + 1 < K:
                Hc[g, g + 1] = Hc[g + 1, g] = f[j, g] * f[j, g + 1] * r2[j, g + 1]
        D = np.hstack([np.eye(K), np.full((K, 1), times[j])])
        H += D.T @ Hc @ D
    return H


def _to_natural(eta):
    K = eta.size - 1
    lam0 = eta[0] + np.r_[0.0, np.cumsum(np.exp(eta[1:K]))]
    return lam0, float(eta[K])


def _to_eta(lambda0, lambda1):
    inc = np.maximum(np.diff(lambda0), np.exp(_MIN_LOG_INCREMENT))
    return np.r_[lambda0[0], np.log(inc), lambda1]


def _jacobian(eta):
    K = eta.size - 1
    Jm = np.zeros((K + 1, K + 1))
    Jm[:K, 0] = 1.0
    for g in range(1, K):
        Jm[g, 1 : g + 1] = np.exp(eta[1 : g + 1])
    Jm[K, K] = 1.0
    return Jm


def _polish(lam0, lam1, W, times, tol, slope_fixed, max_steps=25):
    """Damped Newton steps in the natural parametrisation (the objective is concave there)."""
    K = lam0.size
    sel = slice(0, K) if slope_fixed else slice(0, K + 1)
    val = ordinal_loglik(lam0, lam1, W, times)
    grad = ordinal_gradient(lam0, lam1, W, times)[sel]
    for _ in range(max_steps):
        if np.linalg.norm(grad) <= tol:
            break
        H = ordinal_hessian(lam0, lam1, W, times)[sel, sel]
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        full = np.r_[step, 0.0] if slope_fixed else step
        t = 1.0
        while t > 1e-10:
            c0 = lam0 + t * full[:K]
            c1 = lam1 + t * full[K]
            if np.all(np.diff(c0) > 0) or K == 1:
                new_val = ordinal_loglik(c0, c1, W, times)
                if new_val >= val:
                    break
            t *= 0.5
        else:
            break
        lam0, lam1, val = c0, float(c1), new_val
        grad = ordinal_gradient(lam0, lam1, W, times)[sel]
    return lam0, lam1, grad


def fit_ordered_logit(
    weights,
    T,
    start=None,
    tol: float = 1e-8,
    max_iter: int = 200,
    fix_slope: float | None = None,
):
    """Maximise ``sum_i sum_g w_ig log pi_g(T_i; lambda)`` over ordered cutpoints and slope.

    Parameters
    ----------
    weights : ndarray, shape (n, G)
        Class weights (posterior probabilities or one-hot labels).
    T : ndarray, shape (n,)
        Drop-out times.
    start : tuple (lambda0, lambda1), optional
        Starting point; the returned value is never worse than it.
    fix_slope : float, optional
        Hold ``lambda1`` fixed and optimise the cutpoints only.

    Returns
    -------
    lambda0 : ndarray, shape (G - 1,)
    lambda1 : float
    info : dict
        ``gradient`` (natural parametrisation), ``converged`` and ``clipped``.
    """
    W, times = _aggregate(weights, T)
    G = W.shape[1]
    if G == 1:
        return np.zeros(0), 0.0, {"gradient": np.zeros(0), "converged": True, "clipped": False}
    K = G - 1
    mass = W.sum(axis=0)
    if start is None:
        cum = np.cumsum(mass)[:-1] / mass.sum()
        cum = np.clip(cum, 1e-3, 1 - 1e-3)
        lam0 = np.log(cum / (1 - cum))
        lam0 = np.maximum.accumulate(lam0 + 1e-3 * np.arange(K))
        start = (lam0, 0.0 if fix_slope is None else fix_slope)
    lam0_start = np.asarray(start[0], dtype=float).copy()
    lam1_start = float(start[1]) if fix_slope is None else float(fix_slope)
    t_scale = max(1.0, float(np.abs(times).max()))

    free = slice(0, K + 1) if fix_slope is None else slice(0, K)

    def unpack(v):
        eta = np.r_[v, lam1_start] if fix_slope is not None else v
        return eta

    def fun(v):
        lam0, lam1 = _to_natural(unpack(v))
        val = ordinal_loglik(lam0, lam1, W, times)
        return -val if np.isfinite(val) else 1e300

    def jac(v):
        eta = unpack(v)
        lam0, lam1 = _to_natural(eta)
        return -(_jacobian(eta).T @ ordinal_gradient(lam0, lam1, W, times))[free]

    def hess(v):
        eta = unpack(v)
        lam0, lam1 = _to_natural(eta)
        g_nat = ordinal_gradient(lam0, lam1, W, times)
        Jm = _jacobian(eta)
        H = Jm.T @ ordinal_hessian(lam0, lam1, W, times) @ Jm
        for l in range(1, K):
            H[l, l] += np.exp(eta[l]) * g_nat[l:K].sum()
        return -H[free, free]

    n_iter = 0
    lam0, lam1, grad = lam0_start, lam1_start, None
    if np.isfinite(ordinal_loglik(lam0, lam1, W, times)):
        # warm starts are usually within Newton range of the optimum
        lam0, lam1, grad = _polish(lam0, lam1, W, times, tol, fix_slope is not None, max_steps=8)
    if grad is None or np.linalg.norm(grad) > tol:
        v0 = _to_eta(lam0, lam1)[free]
        res = minimize(fun, v0, jac=jac, hess=hess, method="trust-exact", options={"gtol": tol * 1e-2, "maxiter": max_iter})
        v = res.x if res.fun <= fun(v0) else v0
        n_iter = int(res.nit)
        lam0, lam1 = _to_natural(unpack(v))
        lam0, lam1, grad = _polish(lam0, lam1, W, times, tol, fix_slope is not None)
    converged = bool(np.linalg.norm(grad) <= tol)
    clipped = False
    tiny = mass.sum() * 1e-10
    if (
        np.any(np.abs(lam0) > CLIP)
        or abs(lam1) * t_scale > CLIP
        or np.any(mass <= tiny)
        or (not converged and np.linalg.norm(grad) > 1e-4 * max(1.0, mass.sum()))
    ):
        clipped = True
        lam0 = np.clip(lam0, -CLIP, CLIP)
        lam1 = float(np.clip(lam1, -CLIP / t_scale, CLIP / t_scale))
        warnings.warn(
            "drop-out class weights are (quasi-)separated by drop-out time; cutpoints clipped",
            SeparationWarning,
            stacklevel=2,
        )
    return lam0, lam1, {"gradient": grad, "converged": converged, "clipped": clipped, "n_iter": n_iter}

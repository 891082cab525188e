"""Class-conditional forward/backward recursions in log space.

The batched functions work on padded ``(n, T_max, ...)`` arrays; the
per-subject functions are thin wrappers used by tests and callers that want
one sequence at a time.  Emission log-densities are computed once and shared
by both passes since they do not depend on the drop-out class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    InvalidParameterError,
    NumericalFailureError,
    PanelDataset,
    QldoParams,
    _tau,
    log_ldo_class_probs,
    logsumexp,
)

__all__ = [
    "ForwardBackwardTables",
    "log_emissions",
    "log_forward",
    "log_backward",
    "forward",
    "backward",
    "forward_backward",
    "subject_loglik",
    "subject_logliks",
    "total_loglik",
]


@dataclass(frozen=True, eq=False)
class ForwardBackwardTables:
    log_a: np.ndarray  # (T_i, m, G)
    log_b: np.ndarray  # (T_i, m, G)
    log_class_lik: np.ndarray  # (G,)


def _log_Q(params: QldoParams) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(params.Q)


def log_emissions(y: np.ndarray, X: np.ndarray, lengths: np.ndarray, params: QldoParams, tau) -> np.ndarray:
    """ALD log-densities ``log f(y_it | S_it = h)``, shape ``(n, T, m)``; zero past ``T_i``."""
    tau = _tau(tau)
    if X.shape[-1] != params.q:
        raise InvalidParameterError(f"params carry {params.q} fixed effects, data has {X.shape[-1]} covariates")
    mu = params.alpha[None, None, :] + (X @ params.beta)[:, :, None]
    z = (y[:, :, None] - mu) / params.sigma
    out = np.log(tau * (1.0 - tau)) - np.log(params.sigma) - z * (tau - (z < 0))
    mask = np.arange(y.shape[1])[None, :] < np.asarray(lengths)[:, None]
    return np.where(mask[:, :, None], out, 0.0)


def _log_matvec(v: np.ndarray, P: np.ndarray) -> np.ndarray:
    """``log(exp(v) @ P)`` over the last axis with a max shift; ``v`` is ``(n, G, m)``, ``P`` ``(G, m, m)``."""
    vmax = np.max(v, axis=-1, keepdims=True)
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.matmul(np.exp(v - vmax)[:, :, None, :], P[None])[:, :, 0, :]) + vmax


def log_forward(log_emis: np.ndarray, params: QldoParams) -> np.ndarray:
    """Log forward variables ``log a_it(h, g)``, shape ``(n, T, m, G)``.

    Slots past a subject's last occasion are filled by continuing the
    recursion with unit emissions; callers read only ``t < T_i``.
    """
    n, T, m = log_emis.shape
    G = params.G
    with np.errstate(divide="ignore"):
        log_delta = np.log(params.delta)
    la = np.empty((n, T, G, m))
    la[:, 0] = (log_delta[None, :] + log_emis[:, 0])[:, None, :]
    for t in range(1, T):
        la[:, t] = _log_matvec(la[:, t - 1], params.Q) + log_emis[:, t, None, :]
    return la.transpose(0, 1, 3, 2)


def log_backward(log_emis: np.ndarray, lengths: np.ndarray, params: QldoParams) -> np.ndarray:
    """Log backward variables ``log b_it(h, g)``, shape ``(n, T, m, G)``; exactly 0 from ``T_i`` on."""
    n, T, m = log_emis.shape
    G = params.G
    QT = np.ascontiguousarray(params.Q.transpose(0, 2, 1))
    lb = np.zeros((n, T, G, m))
    done = np.arange(T)[None, :] >= (np.asarray(lengths) - 1)[:, None]
    for t in range(T - 2, -1, -1):
        step = _log_matvec(log_emis[:, t + 1, None, :] + lb[:, t + 1], QT)
        lb[:, t] = np.where(done[:, t, None, None], 0.0, step)
    return lb.transpose(0, 1, 3, 2)


def _class_logliks(log_a: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    last = log_a[np.arange(log_a.shape[0]), np.asarray(lengths) - 1]  # (n, m, G)
    return logsumexp(last, axis=1)


def _subject_arrays(y_i, X_i, params: QldoParams):
    y_i = np.asarray(y_i, dtype=float).ravel()
    L = y_i.size
    if L < 1:
        raise InvalidParameterError("a subject needs at least one observation")
    X_i = np.asarray(X_i, dtype=float).reshape(L, -1) if params.q else np.zeros((L, 0))
    return y_i[None], X_i[None], np.array([L])


def _check_class(g: int, params: QldoParams) -> int:
    if int(g) != g or not (1 <= g <= params.G):
        raise InvalidParameterError(f"class index {g} outside 1..{params.G}")
    return int(g) - 1


def forward(y_i, X_i, params: QldoParams, g: int, tau) -> np.ndarray:
    """Log forward table ``(T_i, m)`` for class ``g`` (1-based)."""
    g0 = _check_class(g, params)
    y, X, L = _subject_arrays(y_i, X_i, params)
    return log_forward(log_emissions(y, X, L, params, tau), params)[0, :, :, g0]


def backward(y_i, X_i, params: QldoParams, g: int, tau) -> np.ndarray:
    """Log backward table ``(T_i, m)`` for class ``g`` (1-based)."""
    g0 = _check_class(g, params)
    y, X, L = _subject_arrays(y_i, X_i, params)
    return log_backward(log_emissions(y, X, L, params, tau), L, params)[0, :, :, g0]


def forward_backward(y_i, X_i, params: QldoParams, tau) -> ForwardBackwardTables:
    y, X, L = _subject_arrays(y_i, X_i, params)
    le = log_emissions(y, X, L, params, tau)
    log_a = log_forward(le, params)
    log_b = log_backward(le, L, params)
    return ForwardBackwardTables(log_a[0], log_b[0], _class_logliks(log_a, L)[0])


def subject_loglik(y_i, X_i, T_i, params: QldoParams, tau) -> float:
    """Log of ``f(y_i | T_i) = sum_g pi_g(T_i) f(y_i | class g)``."""
    y, X, L = _subject_arrays(y_i, X_i, params)
    if int(T_i) != L[0]:
        raise InvalidParameterError(f"T_i = {T_i} but {L[0]} responses given")
    tables = forward_backward(y_i, X_i, params, tau)
    log_pi = log_ldo_class_probs([T_i], params.lambda0, params.lambda1, params.G)[0]
    return float(logsumexp(log_pi + tables.log_class_lik))


def subject_logliks(data: PanelDataset, params: QldoParams, tau, log_emis: np.ndarray | None = None) -> np.ndarray:
    """Vector of per-subject conditional log-likelihoods, in storage order."""
    if log_emis is None:
        log_emis = log_emissions(data.y, data.X, data.lengths, params, tau)
    log_a = log_forward(log_emis, params)
    log_pi = log_ldo_class_probs(data.lengths, params.lambda0, params.lambda1, params.G)
    return logsumexp(log_pi + _class_logliks(log_a, data.lengths), axis=1)


def _checked_sum(values: np.ndarray) -> float:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericalFailureError(f"non-finite log-likelihood for subject index {bad[0]}", subject=int(bad[0]))
    # plain left-to-right accumulation: independent of how subjects were batched
    total = 0.0
    for v in values.tolist():
        total += v
    return total


def total_loglik(data: PanelDataset, params: QldoParams, tau) -> float:
    """Sum of subject log-likelihoods, accumulated in storage order."""
    return _checked_sum(subject_logliks(data, params, tau))

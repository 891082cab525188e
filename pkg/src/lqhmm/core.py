"""Domain types and elementary densities for quantile HMMs with latent drop-out classes.

Everything here is a value object or a pure function.  Arrays stored on the
dataclasses are copied and marked read-only at construction, so instances can
be shared freely between threads and worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "LqhmmError",
    "InvalidParameterError",
    "NumericalFailureError",
    "DegenerateFitError",
    "IdentifiabilityError",
    "NonConvergenceError",
    "MonotonicityError",
    "QuantileLevel",
    "ModelSpec",
    "PanelDataset",
    "QldoParams",
    "Posteriors",
    "check_loss",
    "ald_log_density",
    "linear_predictor",
    "ldo_class_probs",
    "log_ldo_class_probs",
    "logsumexp",
    "canonical_order",
]


class LqhmmError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(LqhmmError, ValueError):
    pass


class NumericalFailureError(LqhmmError, ArithmeticError):
    def __init__(self, message: str, subject: int | None = None):
        super().__init__(message)
        self.subject = subject


class DegenerateFitError(LqhmmError):
    pass


class IdentifiabilityError(LqhmmError):
    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = list(columns)


class NonConvergenceError(LqhmmError):
    def __init__(self, message: str, traces: Sequence[np.ndarray] = ()):
        super().__init__(message)
        self.traces = [np.asarray(t) for t in traces]


class MonotonicityError(LqhmmError, ValueError):
    """A subject's occasions are not ``1..T_i`` without gaps."""

    def __init__(self, message: str, subject: object = None):
        super().__init__(message)
        self.subject = subject


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantileLevel:
    tau: float

    def __post_init__(self):
        tau = float(self.tau)
        if not (0.0 < tau < 1.0):
            raise InvalidParameterError(f"quantile level must lie in (0, 1), got {self.tau!r}")
        object.__setattr__(self, "tau", tau)

    def __float__(self) -> float:
        return self.tau


def _tau(tau) -> float:
    if isinstance(tau, QuantileLevel):
        return tau.tau
    return QuantileLevel(tau).tau


@dataclass(frozen=True)
class ModelSpec:
    """Quantile level, number of hidden states ``m`` and of drop-out classes ``G``.

    ``G = 1`` is the plain quantile HMM with ignorable drop-out.
    """

    tau: float
    m: int
    G: int = 1

    def __post_init__(self):
        object.__setattr__(self, "tau", _tau(self.tau))
        for name in ("m", "G"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidParameterError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Long-format longitudinal panel under monotone drop-out.

    Responses and covariates are stored padded to ``T_max``; entries at
    occasions ``t >= T_i`` (0-based) are zero and never read.

    Attributes
    ----------
    ids : tuple
        Subject identifiers, in storage order.
    lengths : ndarray of int, shape (n,)
        Number of observed occasions ``T_i``.
    y : ndarray, shape (n, T_max)
    X : ndarray, shape (n, T_max, q)
    covariates : tuple of str
        Covariate column names (length ``q``).
    """

    ids: tuple
    lengths: np.ndarray
    y: np.ndarray
    X: np.ndarray
    covariates: tuple = ()
    T_max: int = 0

    def __post_init__(self):
        lengths = np.asarray(self.lengths)
        if lengths.ndim != 1 or lengths.size == 0:
            raise InvalidParameterError("a panel needs at least one subject")
        if not np.all(lengths == np.round(lengths)):
            raise InvalidParameterError("T_i must be integers")
        lengths = lengths.astype(np.int64)
        n = lengths.size
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 2:
            X = X.reshape(X.shape[0], X.shape[1], 0) if X.shape[1] == 0 else X[:, :, None]
        T_max = int(self.T_max) if self.T_max else int(y.shape[1])
        if y.shape != (n, T_max) or X.shape[:2] != (n, T_max):
            raise InvalidParameterError("y must be (n, T_max) and X (n, T_max, q)")
        if np.any(lengths < 1) or np.any(lengths > T_max):
            raise InvalidParameterError("every subject needs 1 <= T_i <= T_max")
        if len(self.ids) != n:
            raise InvalidParameterError("one id per subject required")
        covariates = tuple(self.covariates) or tuple(f"x{j + 1}" for j in range(X.shape[2]))
        if len(covariates) != X.shape[2]:
            raise InvalidParameterError("one name per covariate column required")
        mask = np.arange(T_max)[None, :] < lengths[:, None]
        if not np.all(np.isfinite(y[mask])) or not np.all(np.isfinite(X[mask])):
            raise InvalidParameterError("observed rows must be fully observed (finite)")
        y = np.where(mask, y, 0.0)
        X = np.where(mask[:, :, None], X, 0.0)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "lengths", _frozen(lengths, np.int64))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "T_max", T_max)

    @classmethod
    def from_subjects(cls, ys, Xs=None, ids=None, covariates=(), T_max=None) -> "PanelDataset":
        """Build a panel from per-subject response vectors and ``T_i x q`` matrices."""
        ys = [np.asarray(v, dtype=float).ravel() for v in ys]
        n = len(ys)
        lengths = np.array([len(v) for v in ys])
        T = int(T_max or lengths.max())
        if Xs is None:
            q = len(covariates)
            Xs = [np.zeros((L, q)) for L in lengths]
        Xs = [np.asarray(x, dtype=float).reshape(len(v), -1) for x, v in zip(Xs, ys)]
        q = Xs[0].shape[1] if n else 0
        y = np.zeros((n, T))
        X = np.zeros((n, T, q))
        for i, (v, x) in enumerate(zip(ys, Xs)):
            y[i, : len(v)] = v
            X[i, : len(v)] = x
        if ids is None:
            ids = tuple(range(1, n + 1))
        return cls(ids=tuple(ids), lengths=lengths, y=y, X=X, covariates=tuple(covariates), T_max=T)

    @property
    def n(self) -> int:
        return int(self.lengths.size)

    @property
    def q(self) -> int:
        return int(self.X.shape[2])

    @property
    def n_obs(self) -> int:
        return int(self.lengths.sum())

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.T_max)[None, :] < self.lengths[:, None]

    def subject(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Observed ``(y_i, X_i)`` of the i-th stored subject."""
        L = self.lengths[i]
        return self.y[i, :L], self.X[i, :L]

    def take(self, index) -> "PanelDataset":
        """Sub-panel (with repetition allowed) in the order given by ``index``."""
        index = np.asarray(index, dtype=np.int64)
        return PanelDataset(
            ids=tuple(self.ids[i] for i in index),
            lengths=self.lengths[index],
            y=self.y[index],
            X=self.X[index],
            covariates=self.covariates,
            T_max=self.T_max,
        )

    def dropout_counts(self) -> np.ndarray:
        """Number of subjects still observed at each occasion ``1..T_max``."""
        return np.array([(self.lengths >= t).sum() for t in range(1, self.T_max + 1)])

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.covariates == other.covariates
            and self.T_max == other.T_max
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
        )


def _check_stochastic(P: np.ndarray, what: str, atol: float = 1e-8) -> None:
    if np.any(P < -atol) or not np.all(np.isfinite(P)):
        raise InvalidParameterError(f"{what} has negative or non-finite entries")
    if not np.allclose(P.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise InvalidParameterError(f"{what} must sum to one along its last axis")


@dataclass(frozen=True, eq=False)
class QldoParams:
    """Full parameter set for one quantile level.

    Attributes
    ----------
    beta : ndarray, shape (q,)
        Fixed effects.
    alpha : ndarray, shape (m,)
        State-specific intercepts.
    sigma : float
        Scale of the asymmetric Laplace emission.
    delta : ndarray, shape (m,)
        Initial state distribution.
    Q : ndarray, shape (G, m, m)
        Class-specific transition matrices, rows sum to one.
    lambda0 : ndarray, shape (G - 1,)
        Non-decreasing cumulative-logit cutpoints.
    lambda1 : float
        Common slope on drop-out time (ignored when ``G = 1``).
    """

    beta: np.ndarray
    alpha: np.ndarray
    sigma: float
    delta: np.ndarray
    Q: np.ndarray
    lambda0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lambda1: float = 0.0

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).ravel()
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float)).ravel()
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float)).ravel()
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim == 2:
            Q = Q[None]
        lambda0 = np.atleast_1d(np.asarray(self.lambda0, dtype=float)).ravel()
        m = alpha.size
        G = Q.shape[0]
        sigma = float(self.sigma)
        if not (np.isfinite(sigma) and sigma > 0):
            raise InvalidParameterError(f"sigma must be positive, got {sigma}")
        if m < 1 or delta.size != m or Q.shape != (G, m, m):
            raise InvalidParameterError("alpha, delta and Q disagree on the number of states")
        if lambda0.size != G - 1:
            raise InvalidParameterError(f"expected {G - 1} cutpoints, got {lambda0.size}")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(alpha)) and np.all(np.isfinite(lambda0))):
            raise InvalidParameterError("non-finite regression or cutpoint parameters")
        if np.any(np.diff(lambda0) < 0):
            raise InvalidParameterError("cutpoints lambda0 must be non-decreasing")
        _check_stochastic(delta, "delta")
        _check_stochastic(Q, "Q")
        lambda1 = float(self.lambda1)
        if not np.isfinite(lambda1):
            raise InvalidParameterError("lambda1 must be finite")
        object.__setattr__(self, "beta", _frozen(beta))
        object.__setattr__(self, "alpha", _frozen(alpha))
        object.__setattr__(self, "delta", _frozen(np.clip(delta, 0.0, None)))
        object.__setattr__(self, "Q", _frozen(np.clip(Q, 0.0, None)))
        object.__setattr__(self, "lambda0", _frozen(lambda0))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lambda1", lambda1 if G > 1 else 0.0)

    @property
    def m(self) -> int:
        return int(self.alpha.size)

    @property
    def G(self) -> int:
        return int(self.Q.shape[0])

    @property
    def q(self) -> int:
        return int(self.beta.size)

    def replace(self, **changes) -> "QldoParams":
        return replace(self, **changes)

    def vector(self, covariates: Sequence[str] | None = None) -> dict[str, float]:
        """Flatten into an ordered ``name -> value`` mapping (1-based labels)."""
        names = list(covariates) if covariates is not None else [f"x{j + 1}" for j in range(self.q)]
        out: dict[str, float] = {}
        for h, a in enumerate(self.alpha, 1):
            out[f"alpha[{h}]"] = float(a)
        for name, b in zip(names, self.beta):
            out[f"beta[{name}]"] = float(b)
        out["sigma"] = self.sigma
        for h, d in enumerate(self.delta, 1):
            out[f"delta[{h}]"] = float(d)
        for g in range(self.G):
            for k in range(self.m):
                for h in range(self.m):
                    out[f"Q{g + 1}[{k + 1},{h + 1}]"] = float(self.Q[g, k, h])
        for g, lam in enumerate(self.lambda0, 1):
            out[f"lambda0[{g}]"] = float(lam)
        if self.G > 1:
            out["lambda1"] = self.lambda1
        return out

    def allclose(self, other: "QldoParams", atol: float = 0.0, rtol: float = 0.0) -> bool:
        if (self.m, self.G, self.q) != (other.m, other.G, other.q):
            return False
        a, b = self.vector(), other.vector()
        return all(np.isclose(a[k], b[k], atol=atol, rtol=rtol) for k in a)

    def __eq__(self, other):
        if not isinstance(other, QldoParams):
            return NotImplemented
        return self.allclose(other)


@dataclass(frozen=True, eq=False)
class Posteriors:
    """E-step quantities, padded to ``T_max`` like :class:`PanelDataset`.

    ``u_single[i, t]`` is zero for ``t >= T_i`` and ``u_pair[i, t - 1]`` holds
    the transition into occasion ``t``; padded slots are zero.
    """

    u_single: np.ndarray  # (n, T, m)
    u_pair: np.ndarray  # (n, T - 1, m, m, G)
    zeta: np.ndarray  # (n, G)
    loglik: float
    lengths: np.ndarray
    subject_loglik: np.ndarray | None = None

    def __post_init__(self):
        for name in ("u_single", "u_pair", "zeta", "lengths"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64 if name == "lengths" else float))
        if self.subject_loglik is not None:
            object.__setattr__(self, "subject_loglik", _frozen(self.subject_loglik))
        object.__setattr__(self, "loglik", float(self.loglik))

    def for_subject(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(u_single (T_i, m), u_pair (T_i - 1, m, m, G), zeta (G,))`` for subject ``i``."""
        L = int(self.lengths[i])
        return self.u_single[i, :L], self.u_pair[i, : L - 1], self.zeta[i]


# ---------------------------------------------------------------------------
# Elementary functions
# ---------------------------------------------------------------------------


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable ``log(sum(exp(a)))`` that maps all-``-inf`` slices to ``-inf``."""
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def check_loss(u, tau):
    """Quantile check loss ``u * (tau - 1{u < 0})``."""
    tau = _tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return out if out.ndim else float(out)


def ald_log_density(y, mu, sigma, tau):
    """Log density of the asymmetric Laplace distribution ALD(mu, sigma, tau)."""
    tau = _tau(tau)
    sigma_arr = np.asarray(sigma, dtype=float)
    if np.any(~(sigma_arr > 0)):
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    z = (np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)) / sigma_arr
    out = np.log(tau * (1.0 - tau)) - np.log(sigma_arr) - z * (tau - (z < 0))
    return out if np.ndim(out) else float(out)


def linear_predictor(x, h: int, params: QldoParams) -> float:
    """Location ``alpha[h] + x'beta`` for 1-based state index ``h``."""
    if int(h) != h or not (1 <= h <= params.m):
        raise InvalidParameterError(f"state index {h} outside 1..{params.m}")
    x = np.asarray(x, dtype=float).ravel()
    if x.size != params.q:
        raise InvalidParameterError(f"expected {params.q} covariates, got {x.size}")
    return float(params.alpha[int(h) - 1] + x @ params.beta)


def _cumulative_logits(T, lambda0, lambda1):
    T = np.asarray(T, dtype=float)
    lambda0 = np.asarray(lambda0, dtype=float).ravel()
    if np.any(np.diff(lambda0) < 0):
        raise InvalidParameterError("cutpoints lambda0 must be non-decreasing")
    return lambda0[None, :] + float(lambda1) * np.atleast_1d(T)[:, None]


def log_ldo_class_probs(T, lambda0, lambda1, G: int | None = None) -> np.ndarray:
    """Log class probabilities, shape ``(len(T), G)``, under the cumulative logit model.

    Differences of adjacent logistic CDFs are formed on whichever tail keeps
    them accurate, so probabilities near 0 or 1 keep full relative precision.
    """
    lambda0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    G = lambda0.size + 1 if G is None else int(G)
    if lambda0.size != G - 1:
        raise InvalidParameterError(f"G = {G} needs {G - 1} cutpoints, got {lambda0.size}")
    T = np.atleast_1d(np.asarray(T, dtype=float))
    if G == 1:
        return np.zeros((T.size, 1))
    c = _cumulative_logits(T, lambda0, lambda1)
    lo = np.concatenate([np.full((T.size, 1), -np.inf), c], axis=1)
    hi = np.concatenate([c, np.full((T.size, 1), np.inf)], axis=1)
    # F(hi) - F(lo) == S(lo) - S(hi); use the upper tail when both arguments are positive
    upper = lo > 0
    with np.errstate(divide="ignore"):
        diff = np.where(upper, expit(-lo) - expit(-hi), expit(hi) - expit(lo))
        return np.log(np.clip(diff, 0.0, None))


def ldo_class_probs(T_i, lambda0, lambda1, G: int | None = None) -> np.ndarray:
    """Drop-out class probabilities for a drop-out time ``T_i`` (scalar) or array of times."""
    out = np.exp(log_ldo_class_probs(T_i, lambda0, lambda1, G))
    return out[0] if np.ndim(T_i) == 0 else out


def canonical_order(alpha: np.ndarray, first_mass: np.ndarray | None = None, tol: float = 1e-8) -> np.ndarray:
    """Permutation sorting states by intercept.

    Intercepts equal within ``tol`` are ordered by decreasing first-occasion
    posterior mass (then by original index).
    """
    alpha = np.asarray(alpha, dtype=float)
    m = alpha.size
    mass = np.zeros(m) if first_mass is None else np.asarray(first_mass, dtype=float)
    # snap near-ties onto a common key so the secondary key decides
    order = np.argsort(alpha, kind="stable")
    key = alpha.copy()
    for a, b in zip(order[:-1], order[1:]):
        if abs(alpha[b] - key[a]) <= tol:
            key[b] = key[a]
    return np.lexsort((np.arange(m), -mass, key))

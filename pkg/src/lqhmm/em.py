"""EM estimation for linear quantile HMMs with latent drop-out classes."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .core import (
    DegenerateFitError,
    IdentifiabilityError,
    LqhmmError,
    ModelSpec,
    NonConvergenceError,
    NumericalFailureError,
    PanelDataset,
    Posteriors,
    QldoParams,
    _tau,
    canonical_order,
    log_ldo_class_probs,
    logsumexp,
)
from .likelihood import _checked_sum, _class_logliks, log_backward, log_emissions, log_forward
from .ordinal import SeparationWarning, _aggregate, fit_ordered_logit, ordinal_loglik
from .qr import check_rank, qr_objective, weighted_qr

__all__ = [
    "EmConfig",
    "FitResult",
    "StateDesign",
    "e_step",
    "m_step_chain",
    "m_step_sigma",
    "m_step_theta",
    "m_step_lambda",
    "initialize",
    "em_run",
    "fit",
    "n_free_params",
    "permute_states",
    "canonicalize",
]

logger = logging.getLogger(__name__)

# magnitudes of the random perturbations applied to start 0 for starts >= 1
ALPHA_JITTER = 0.5  # x pooled residual sd, additive
BETA_JITTER = 0.1  # relative
SIGMA_JITTER = 0.2  # log scale
PROB_JITTER = 0.5  # log scale, then renormalised
LAMBDA0_JITTER = 0.5  # additive
LAMBDA1_JITTER = 0.1  # relative


@dataclass(frozen=True)
class EmConfig:
    """Tuning constants for EM.

    Attributes
    ----------
    epsilon : float
        Stop once the log-likelihood increase drops below ``epsilon``
        (relative to ``|loglik|`` when ``relative`` is set).
    max_iter : int
        EM iterations per start.
    n_starts : int
        Start 0 is deterministic; the others perturb it.
    s : float
        Diagonal boost of the initial transition matrices.
    xi : float
        Fraction of discretised drop-out labels scrambled for the initial
        ordinal fit.
    rng_seed : int
    inner_tol : float
        Tolerance of the inner M-step solvers.
    relative : bool
    n_jobs : int or None
        Worker processes for independent starts; defaults to ``$LQHMM_NUM_THREADS`` or 1.
    """

    epsilon: float = 1e-6
    max_iter: int = 500
    n_starts: int = 30
    s: float = 4.0
    xi: float = 0.1
    rng_seed: int = 0
    inner_tol: float = 1e-8
    relative: bool = False
    n_jobs: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValueError("n_starts and max_iter must be at least 1")
        if not (0.0 <= self.xi <= 1.0):
            raise ValueError("xi must lie in [0, 1]")
        if not self.s > 0 or not self.inner_tol > 0:
            raise ValueError("s and inner_tol must be positive")


def resolve_jobs(n_jobs: int | None) -> int:
    if n_jobs is None:
        n_jobs = int(os.environ.get("LQHMM_NUM_THREADS", "1") or 1)
    return max(1, int(n_jobs))


def parallel_map(func, items, n_jobs: int | None = None) -> list:
    """Ordered map, optionally over worker processes; output never depends on ``n_jobs``."""
    n_jobs = resolve_jobs(n_jobs)
    items = list(items)
    if n_jobs == 1 or len(items) < 2:
        return [func(it) for it in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(func)(it) for it in items)


@dataclass(frozen=True, eq=False)
class FitResult:
    params: QldoParams
    posteriors: Posteriors
    loglik_trace: np.ndarray
    converged: bool
    n_params: int
    aic: float
    bic: float
    start_index: int
    spec: ModelSpec | None = None
    n_subjects: int = 0
    start_logliks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    start_converged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    traces: tuple = ()

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


def n_free_params(m: int, G: int, q: int) -> int:
    """Free parameters: beta, alpha, sigma, delta, transition rows, cutpoints and slope."""
    return q + m + 1 + (m - 1) + G * m * (m - 1) + (G - 1) + (1 if G >= 2 else 0)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def e_step(data: PanelDataset, params: QldoParams, tau) -> Posteriors:
    """Posterior state, transition and class probabilities at ``params``."""
    n, T = data.n, data.T_max
    m, G = params.m, params.G
    lengths = data.lengths
    mask = data.mask
    log_emis = log_emissions(data.y, data.X, lengths, params, tau)
    log_a = log_forward(log_emis, params)
    log_b = log_backward(log_emis, lengths, params)
    class_ll = _class_logliks(log_a, lengths)  # (n, G)
    log_pi = log_ldo_class_probs(lengths, params.lambda0, params.lambda1, G)
    joint = log_pi + class_ll
    subj_ll = logsumexp(joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(subj_ll))
    if bad.size:
        raise NumericalFailureError(f"zero likelihood for subject index {bad[0]}", subject=int(bad[0]))
    loglik = _checked_sum(subj_ll)
    zeta = np.exp(joint - subj_ll[:, None])
    zeta /= zeta.sum(axis=1, keepdims=True)

    lg = log_a + log_b + (log_pi - subj_ll[:, None])[:, None, None, :]
    u_single = np.exp(logsumexp(lg, axis=3))
    u_single = np.where(mask[:, :, None], u_single, 0.0)
    u_single[mask] /= u_single[mask].sum(axis=1, keepdims=True)

    u_pair = np.zeros((n, max(T - 1, 0), m, m, G))
    if T > 1:
        with np.errstate(divide="ignore"):
            logQ = np.log(params.Q).transpose(1, 2, 0)  # (k, h, g)
        finite = np.isfinite(class_ll)
        safe_ll = np.where(finite, class_ll, 0.0)
        lx = (
            log_a[:, :-1, :, None, :]
            + logQ[None, None]
            + (log_emis[:, 1:, None, :, None] + log_b[:, 1:, None, :, :])
            - safe_ll[:, None, None, None, :]
        )
        with np.errstate(invalid="ignore"):
            u_pair = np.exp(lx)
        u_pair = np.where(finite[:, None, None, None, :], u_pair, 1.0 / (m * m))
        u_pair = np.where(mask[:, 1:, None, None, None], u_pair, 0.0)
        tot = u_pair.sum(axis=(2, 3), keepdims=True)
        u_pair = np.divide(u_pair, tot, out=np.zeros_like(u_pair), where=tot > 0)
    return Posteriors(u_single=u_single, u_pair=u_pair, zeta=zeta, loglik=loglik, lengths=lengths, subject_loglik=subj_ll)


# ---------------------------------------------------------------------------
# M-steps
# ---------------------------------------------------------------------------


def m_step_chain(posteriors: Posteriors) -> tuple[np.ndarray, np.ndarray]:
    """Initial distribution and class-specific transition matrices.

    Transition counts are weighted by the class posteriors; a row with no
    posterior mass becomes uniform.
    """
    u1 = posteriors.u_single[:, 0, :]
    delta = u1.sum(axis=0) / u1.shape[0]
    delta = delta / delta.sum()
    m = u1.shape[1]
    G = posteriors.zeta.shape[1]
    if posteriors.u_pair.shape[1] == 0:
        return delta, np.full((G, m, m), 1.0 / m)
    counts = np.einsum("ig,itkhg->gkh", posteriors.zeta, posteriors.u_pair)
    rows = counts.sum(axis=2, keepdims=True)
    Q = np.where(rows > np.finfo(float).tiny, counts / np.where(rows > 0, rows, 1.0), 1.0 / m)
    return delta, Q


@dataclass(frozen=True, eq=False)
class StateDesign:
    """State-expanded regression design: one row per observed ``(i, t)`` and state ``h``."""

    Z: np.ndarray  # (N * m, m + q); alpha columns first
    y: np.ndarray  # (N * m,)
    m: int
    names: tuple

    @classmethod
    def build(cls, data: PanelDataset, m: int, check: bool = True) -> "StateDesign":
        mask = data.mask
        Xo = data.X[mask]  # (N, q)
        yo = data.y[mask]
        N = yo.size
        names = tuple(f"alpha[{h + 1}]" for h in range(m)) + tuple(data.covariates)
        if check:
            check_rank(np.hstack([np.ones((N, 1)), Xo]), ("(state intercepts)",) + tuple(data.covariates))
            if N < m + data.q:
                raise IdentifiabilityError("fewer observations than regression parameters", names)
        Z = np.hstack([np.tile(np.eye(m), (N, 1)), np.repeat(Xo, m, axis=0)])
        return cls(Z=Z, y=np.repeat(yo, m), m=m, names=names)


def _state_weights(posteriors: Posteriors) -> np.ndarray:
    mask = np.arange(posteriors.u_single.shape[1])[None, :] < posteriors.lengths[:, None]
    return posteriors.u_single[mask].ravel()


def m_step_theta(
    posteriors: Posteriors,
    data: PanelDataset,
    tau,
    previous: tuple[np.ndarray, np.ndarray] | None = None,
    tol: float = 1e-8,
    design: StateDesign | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed effects and state intercepts minimising the posterior-weighted check loss.

    Returns ``(beta, alpha)``.  When ``previous = (beta, alpha)`` is given
    the result never has a larger weighted objective than it, and states
    without posterior mass keep their previous intercept.
    """
    tau = _tau(tau)
    m = posteriors.u_single.shape[2]
    q = data.q
    if design is None:
        design = StateDesign.build(data, m)
    w = _state_weights(posteriors)
    state_mass = w.reshape(-1, m).sum(axis=0)
    live = state_mass > 1e-10 * max(1.0, state_mass.sum())
    if not np.all(live) and previous is None:
        raise IdentifiabilityError(
            "states without posterior mass and no previous intercepts", [design.names[h] for h in np.flatnonzero(~live)]
        )
    # rows of a dead state carry (almost) no weight, so its column can simply be dropped
    cols = np.r_[np.flatnonzero(live), m + np.arange(q)]
    res = weighted_qr(design.Z[:, cols], design.y, tau, w, tol=min(tol, 1e-10))
    coef = np.zeros(m + q)
    if previous is not None:
        coef[:m] = previous[1]
    coef[cols] = res.coef
    if previous is not None:
        prev = np.r_[previous[1], previous[0]]
        if qr_objective(design.Z, design.y, coef, tau, w) > qr_objective(design.Z, design.y, prev, tau, w):
            coef = prev
    return coef[m:], coef[:m]


def m_step_sigma(posteriors: Posteriors, data: PanelDataset, tau, beta, alpha) -> float:
    """Closed-form ALD scale: total posterior-weighted check loss over the number of observations."""
    tau = _tau(tau)
    mask = data.mask
    mu = np.asarray(alpha)[None, :] + (data.X[mask] @ np.asarray(beta))[:, None]
    r = data.y[mask][:, None] - mu
    loss = (posteriors.u_single[mask] * r * (tau - (r < 0))).sum()
    sigma = loss / data.n_obs
    if not sigma > 0:
        raise DegenerateFitError("all weighted residuals are zero; the ALD scale collapses")
    return float(sigma)


def m_step_lambda(zeta_hat, T, G: int, start=None, tol: float = 1e-8) -> tuple[np.ndarray, float]:
    """Cutpoints and slope of the ordinal class model, weighted by class posteriors.

    With ``start`` given, the weighted log-likelihood of the result is at
    least that of ``start``.
    """
    if G == 1:
        return np.zeros(0), 0.0
    lam0, lam1, info = fit_ordered_logit(zeta_hat, T, start=start, tol=tol)
    if start is not None and info["clipped"]:
        W, times = _aggregate(zeta_hat, T)
        if ordinal_loglik(lam0, lam1, W, times) < ordinal_loglik(np.asarray(start[0]), float(start[1]), W, times):
            return np.asarray(start[0], dtype=float), float(start[1])
    return lam0, lam1


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def _pooled_fit(data: PanelDataset, tau: float):
    mask = data.mask
    Xo = data.X[mask]
    yo = data.y[mask]
    D = np.hstack([np.ones((yo.size, 1)), Xo])
    check_rank(D, ("(state intercepts)",) + tuple(data.covariates))
    coef = weighted_qr(D, yo, tau).coef
    resid = yo - D @ coef
    return coef[0], coef[1:], resid


def _discretize_dropout(T: np.ndarray, G: int) -> np.ndarray:
    cuts = np.quantile(T, np.arange(1, G) / G)
    return np.searchsorted(cuts, T, side="left")


def initialize(data: PanelDataset, spec: ModelSpec, start_index: int = 0, config: EmConfig = EmConfig()) -> QldoParams:
    """Starting values; start 0 is deterministic, later starts perturb it.

    Start 0 uses a pooled quantile regression for ``beta``, Gauss-Hermite
    offsets (scaled by the pooled residual sd) around the pooled intercept
    for ``alpha``, uniform ``delta``, diagonally boosted transitions and an
    ordinal fit to tercile-style bins of the drop-out times.
    """
    tau, m, G = spec.tau, spec.m, spec.G
    b0, beta, resid = _pooled_fit(data, tau)
    spread = float(np.std(resid)) or 1.0
    nodes = np.sort(hermegauss(m)[0]) if m > 1 else np.zeros(1)
    alpha = b0 + spread * nodes
    sigma = float(np.mean(resid * (tau - (resid < 0)))) or spread
    delta = np.full(m, 1.0 / m)
    Q1 = (1.0 + config.s * np.eye(m)) / (m + config.s)
    Q = np.tile(Q1, (G, 1, 1))
    rng = np.random.default_rng([int(config.rng_seed), int(start_index)])
    lambda0, lambda1 = np.zeros(0), 0.0
    if G > 1:
        T = data.lengths.astype(float)
        labels = _discretize_dropout(T, G)
        n_flip = int(np.floor(config.xi * data.n))
        if n_flip:
            lab_rng = np.random.default_rng([int(config.rng_seed), 0, 1])
            idx = lab_rng.choice(data.n, size=n_flip, replace=False)
            labels = labels.copy()
            labels[idx] = lab_rng.integers(0, G, size=n_flip)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SeparationWarning)
            lambda0, lambda1, _ = fit_ordered_logit(np.eye(G)[labels], T, tol=config.inner_tol)
    if start_index > 0:
        alpha = np.sort(alpha + ALPHA_JITTER * spread * rng.normal(size=m))
        beta = beta * (1.0 + BETA_JITTER * rng.normal(size=beta.size))
        sigma = sigma * float(np.exp(SIGMA_JITTER * rng.normal()))
        delta = delta * np.exp(PROB_JITTER * rng.normal(size=m))
        delta /= delta.sum()
        Q = Q * np.exp(PROB_JITTER * rng.normal(size=Q.shape))
        Q /= Q.sum(axis=2, keepdims=True)
        if G > 1:
            lambda0 = np.sort(lambda0 + LAMBDA0_JITTER * rng.normal(size=lambda0.size))
            lambda1 = lambda1 * (1.0 + LAMBDA1_JITTER * rng.normal())
    return QldoParams(beta=beta, alpha=alpha, sigma=sigma, delta=delta, Q=Q, lambda0=lambda0, lambda1=lambda1)


# ---------------------------------------------------------------------------
# Label switching
# ---------------------------------------------------------------------------


def permute_states(params: QldoParams, perm: Sequence[int]) -> QldoParams:
    perm = np.asarray(perm)
    return params.replace(
        alpha=params.alpha[perm],
        delta=params.delta[perm],
        Q=params.Q[:, perm][:, :, perm],
    )


def canonicalize(params: QldoParams, posteriors: Posteriors | None = None):
    """Order states by increasing intercept, permuting posteriors consistently."""
    first_mass = None if posteriors is None else posteriors.u_single[:, 0, :].sum(axis=0)
    perm = canonical_order(params.alpha, first_mass)
    new_params = permute_states(params, perm)
    if posteriors is None:
        return new_params, None, perm
    new_post = Posteriors(
        u_single=posteriors.u_single[:, :, perm],
        u_pair=posteriors.u_pair[:, :, perm][:, :, :, perm],
        zeta=posteriors.zeta,
        loglik=posteriors.loglik,
        lengths=posteriors.lengths,
        subject_loglik=posteriors.subject_loglik,
    )
    return new_params, new_post, perm


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Run:
    params: QldoParams | None
    posteriors: Posteriors | None
    trace: np.ndarray
    converged: bool
    error: str | None = None


def em_step(
    data: PanelDataset,
    params: QldoParams,
    posteriors: Posteriors,
    tau: float,
    inner_tol: float = 1e-8,
    design: StateDesign | None = None,
) -> QldoParams:
    """One generalized-EM update of every parameter block, given current posteriors."""
    beta, alpha = m_step_theta(posteriors, data, tau, previous=(params.beta, params.alpha), tol=inner_tol, design=design)
    sigma = m_step_sigma(posteriors, data, tau, beta, alpha)
    delta, Q = m_step_chain(posteriors)
    lambda0, lambda1 = m_step_lambda(
        posteriors.zeta, data.lengths, params.G, start=(params.lambda0, params.lambda1), tol=inner_tol
    )
    return QldoParams(beta=beta, alpha=alpha, sigma=sigma, delta=delta, Q=Q, lambda0=lambda0, lambda1=lambda1)


def em_run(
    data: PanelDataset,
    tau,
    params: QldoParams,
    config: EmConfig = EmConfig(),
    callback: Callable[[int, float], None] | None = None,
    design: StateDesign | None = None,
) -> _Run:
    """Alternate E- and M-steps from ``params`` until the increase falls below ``epsilon``."""
    tau = _tau(tau)
    if design is None:
        design = StateDesign.build(data, params.m)
    post = e_step(data, params, tau)
    trace = [post.loglik]
    if callback is not None:
        callback(0, post.loglik)
    converged = False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        for it in range(1, config.max_iter + 1):
            params = em_step(data, params, post, tau, config.inner_tol, design)
            post = e_step(data, params, tau)
            trace.append(post.loglik)
            if callback is not None:
                callback(it, post.loglik)
            gain = trace[-1] - trace[-2]
            if config.relative:
                gain /= max(abs(trace[-2]), 1e-300)
            if gain < config.epsilon:
                converged = True
                break
    return _Run(params=params, posteriors=post, trace=np.asarray(trace), converged=converged)


def _safe_run(args) -> _Run:
    data, tau, params, config, design = args
    try:
        return em_run(data, tau, params, config, design=design)
    except (LqhmmError, FloatingPointError, ArithmeticError) as exc:
        logger.info("EM start failed: %s", exc)
        return _Run(None, None, np.zeros(0), False, error=str(exc))


def fit(
    data: PanelDataset,
    spec: ModelSpec,
    config: EmConfig = EmConfig(),
    callback: Callable[[int, float], None] | None = None,
    starts: Sequence[QldoParams] | None = None,
) -> FitResult:
    """Multi-start EM; keeps the converged start with the highest log-likelihood.

    Parameters
    ----------
    starts : sequence of QldoParams, optional
        Explicit starting values, used instead of the generated starts.
    callback : callable, optional
        Called as ``callback(iteration, loglik)``; forces serial execution.
    """
    tau = spec.tau
    design = StateDesign.build(data, spec.m)
    if starts is None:
        starts = [initialize(data, spec, k, config) for k in range(config.n_starts)]
    starts = list(starts)
    for p in starts:
        if (p.m, p.G, p.q) != (spec.m, spec.G, data.q):
            raise ValueError("starting values do not match the model spec")
    if callback is not None:
        runs = []
        for p in starts:
            try:
                runs.append(em_run(data, tau, p, config, callback=callback, design=design))
            except (LqhmmError, ArithmeticError) as exc:
                runs.append(_Run(None, None, np.zeros(0), False, error=str(exc)))
    else:
        runs = parallel_map(_safe_run, [(data, tau, p, config, design) for p in starts], config.n_jobs)
    logliks = np.array([r.trace[-1] if r.trace.size else -np.inf for r in runs])
    ok = np.array([r.converged for r in runs])
    if not ok.any():
        raise NonConvergenceError(
            f"no EM start converged for m={spec.m}, G={spec.G}", traces=[r.trace for r in runs]
        )
    best = int(np.flatnonzero(ok)[np.argmax(logliks[ok])])
    run = runs[best]
    params, post, _ = canonicalize(run.params, run.posteriors)
    k = n_free_params(spec.m, spec.G, data.q)
    ll = float(run.trace[-1])
    return FitResult(
        params=params,
        posteriors=post,
        loglik_trace=run.trace,
        converged=True,
        n_params=k,
        aic=-2.0 * ll + 2.0 * k,
        bic=-2.0 * ll + k * np.log(data.n),
        start_index=best,
        spec=spec,
        n_subjects=data.n,
        start_logliks=logliks,
        start_converged=ok,
        traces=tuple(r.trace for r in runs),
    )

"""Synthetic panels from an HMM with drop-out-class dependent transitions.

The default scenario mirrors a CD4-style cohort: 369 subjects, up to 12
half-yearly visits, six covariates and a four-state chain whose transition
matrix depends on one of two drop-out classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import (
    InvalidParameterError,
    ModelSpec,
    NonConvergenceError,
    PanelDataset,
    QldoParams,
    ldo_class_probs,
)
from .em import EmConfig, fit, initialize, parallel_map

__all__ = [
    "CD4_COVARIATES",
    "CD4_AT_RISK",
    "SimScenario",
    "SimulatedPanel",
    "cd4_like_covariates",
    "default_scenario",
    "generate",
    "quantile_shifted_truth",
    "ReplicationResult",
    "replicate_study",
]

CD4_COVARIATES = ("timeSero", "age", "drugs", "packs", "partners", "cesd")
# subjects still in the study at visits 1..12
CD4_AT_RISK = (369, 364, 340, 315, 268, 225, 173, 133, 92, 54, 33, 10)


def _dropout_from_at_risk(at_risk: Sequence[int]) -> np.ndarray:
    at_risk = np.asarray(at_risk, dtype=float)
    counts = at_risk - np.r_[at_risk[1:], 0.0]
    return counts / at_risk[0]


def cd4_like_covariates(rng: np.random.Generator, n: int, T_max: int) -> np.ndarray:
    """Covariates shaped like the CD4 cohort, array ``(n, T_max, 6)``.

    Columns follow :data:`CD4_COVARIATES`:

    - ``timeSero``: years since seroconversion, ``U(-3, 0.5)`` at the first
      visit then +0.5 per visit;
    - ``age``: centred age at seroconversion, ``N(0, 6^2)``, constant;
    - ``drugs``: visit-level Bernoulli with subject propensity ``Beta(2, 1)``;
    - ``packs``: packs per day, subject level ``Poisson(0.8)`` capped at 4,
      shifted by +-1 at 10% of visits (floored at 0);
    - ``partners``: visit-level ``Poisson`` with subject mean ``Gamma(2, 1.5)``;
    - ``cesd``: rounded ``N(mu_i, 3^2)`` floored at 0 with ``mu_i ~ Gamma(2, 4)``.
    """
    t = np.arange(T_max)[None, :]
    time_sero = rng.uniform(-3.0, 0.5, size=(n, 1)) + 0.5 * t
    age = np.repeat(rng.normal(0.0, 6.0, size=(n, 1)), T_max, axis=1)
    drugs = (rng.uniform(size=(n, T_max)) < rng.beta(2.0, 1.0, size=(n, 1))).astype(float)
    base = np.minimum(rng.poisson(0.8, size=(n, 1)), 4)
    shift = (rng.uniform(size=(n, T_max)) < 0.1) * rng.choice([-1, 1], size=(n, T_max))
    packs = np.maximum(base + shift, 0).astype(float)
    partners = rng.poisson(rng.gamma(2.0, 1.5, size=(n, 1)) * np.ones((1, T_max))).astype(float)
    cesd = np.maximum(np.round(rng.gamma(2.0, 4.0, size=(n, 1)) + rng.normal(0.0, 3.0, size=(n, T_max))), 0.0)
    return np.stack([time_sero, age, drugs, packs, partners, cesd], axis=2)


@dataclass(frozen=True, eq=False)
class SimScenario:
    """Generator settings.

    Attributes
    ----------
    truth : QldoParams
        Generating parameters.  ``truth.sigma`` is only used for ALD responses.
    dropout_dist : ndarray
        ``P(T_i = t)`` for ``t = 1..T_max``.
    response_family : {"gaussian", "ald"}
    noise_variance : float
        Gaussian response variance.
    ald_tau : float
        Skewness of ALD responses.
    covariate_source : PanelDataset, optional
        Donor panel; each simulated subject copies the first ``T_i`` rows of a
        random donor observed at least as long.  Defaults to the parametric
        CD4-like generator.
    """

    n: int
    T_max: int
    dropout_dist: np.ndarray
    truth: QldoParams
    covariates: tuple = CD4_COVARIATES
    response_family: str = "gaussian"
    noise_variance: float = 0.23
    ald_tau: float = 0.5
    covariate_source: PanelDataset | None = None
    covariate_gen: Callable | None = None
    seed: int = 0

    def __post_init__(self):
        d = np.asarray(self.dropout_dist, dtype=float)
        if d.shape != (self.T_max,) or np.any(d < 0) or not np.isclose(d.sum(), 1.0, atol=1e-12):
            raise InvalidParameterError("dropout_dist must be a probability vector over 1..T_max")
        if self.response_family not in ("gaussian", "ald"):
            raise InvalidParameterError(f"unknown response family {self.response_family!r}")
        if not self.noise_variance >= 0:
            raise InvalidParameterError("noise variance must be nonnegative")
        if len(self.covariates) != self.truth.q:
            raise InvalidParameterError("one covariate name per fixed effect required")
        object.__setattr__(self, "dropout_dist", d)

    def replace(self, **changes) -> "SimScenario":
        return replace(self, **changes)

    @property
    def spec_dims(self) -> tuple[int, int]:
        return self.truth.m, self.truth.G


def default_scenario(seed: int = 0) -> SimScenario:
    """Four states, two drop-out classes, CD4-like covariates and visit counts."""
    truth = QldoParams(
        beta=[-0.088, 0.006, 0.148, 0.055, 0.009, -0.004],
        alpha=[5.861, 6.306, 6.650, 7.039],
        sigma=float(np.sqrt(0.23)),
        delta=[0.05, 0.39, 0.48, 0.08],
        Q=[
            [
                [1.00, 0.00, 0.00, 0.00],
                [0.27, 0.73, 0.00, 0.00],
                [0.00, 0.23, 0.71, 0.06],
                [0.05, 0.06, 0.00, 0.89],
            ],
            [
                [0.91, 0.09, 0.00, 0.00],
                [0.05, 0.92, 0.03, 0.00],
                [0.02, 0.03, 0.94, 0.01],
                [0.00, 0.00, 0.01, 0.99],
            ],
        ],
        lambda0=[4.41],
        lambda1=-0.63,
    )
    return SimScenario(
        n=CD4_AT_RISK[0],
        T_max=len(CD4_AT_RISK),
        dropout_dist=_dropout_from_at_risk(CD4_AT_RISK),
        truth=truth,
        noise_variance=0.23,
        seed=seed,
    )


@dataclass(frozen=True, eq=False)
class SimulatedPanel:
    data: PanelDataset
    classes: np.ndarray  # (n,), 1-based
    states: np.ndarray  # (n, T_max), 1-based, 0 after drop-out


def _categorical(rng: np.random.Generator, P: np.ndarray) -> np.ndarray:
    """One draw per row of the probability matrix ``P``."""
    u = rng.uniform(size=P.shape[0])
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = np.inf
    return (u[:, None] >= cdf).sum(axis=1)


def _donor_covariates(rng, source: PanelDataset, lengths: np.ndarray, T_max: int) -> np.ndarray:
    X = np.zeros((lengths.size, T_max, source.q))
    order = np.argsort(source.lengths, kind="stable")
    for i, L in enumerate(lengths):
        pool = np.flatnonzero(source.lengths >= L)
        if pool.size == 0:
            pool = order[-1:]
        j = int(pool[rng.integers(pool.size)])
        k = min(L, int(source.lengths[j]))
        X[i, :k] = source.X[j, :k]
        if k < L:  # donor shorter than needed: repeat its last row
            X[i, k:L] = source.X[j, k - 1]
    return X


def generate(scenario: SimScenario) -> SimulatedPanel:
    """Draw ``T -> class -> state path -> responses`` for every subject."""
    sc = scenario
    rng = np.random.default_rng(sc.seed)
    truth = sc.truth
    n, T = sc.n, sc.T_max
    lengths = _categorical(rng, np.tile(sc.dropout_dist, (n, 1))) + 1
    if sc.covariate_source is not None:
        X = _donor_covariates(rng, sc.covariate_source, lengths, T)
    elif sc.covariate_gen is not None:
        X = np.asarray(sc.covariate_gen(rng, n, T), dtype=float)
    else:
        X = cd4_like_covariates(rng, n, T)
    classes = _categorical(rng, ldo_class_probs(lengths.astype(float), truth.lambda0, truth.lambda1, truth.G).reshape(n, -1))
    states = np.zeros((n, T), dtype=np.int64)
    states[:, 0] = _categorical(rng, np.tile(truth.delta, (n, 1)))
    for t in range(1, T):
        states[:, t] = _categorical(rng, truth.Q[classes, states[:, t - 1]])
    mu = truth.alpha[states] + X @ truth.beta
    if sc.response_family == "gaussian":
        y = mu + np.sqrt(sc.noise_variance) * rng.standard_normal((n, T))
    else:
        tau = sc.ald_tau
        y = mu + truth.sigma * (rng.exponential(size=(n, T)) / tau - rng.exponential(size=(n, T)) / (1.0 - tau))
    observed = np.arange(T)[None, :] < lengths[:, None]
    data = PanelDataset(
        ids=tuple(str(i + 1) for i in range(n)),
        lengths=lengths,
        y=np.where(observed, y, 0.0),
        X=np.where(observed[:, :, None], X, 0.0),
        covariates=tuple(sc.covariates),
        T_max=T,
    )
    return SimulatedPanel(data=data, classes=classes + 1, states=np.where(observed, states + 1, 0))


def quantile_shifted_truth(scenario: SimScenario, tau: float) -> np.ndarray:
    """State intercepts of the population ``tau``-quantile under the generating law."""
    from scipy.stats import norm

    if scenario.response_family == "gaussian":
        return scenario.truth.alpha + np.sqrt(scenario.noise_variance) * norm.ppf(tau)
    a = scenario.ald_tau
    # ALD(mu, sigma, a) quantile at level tau
    s = scenario.truth.sigma
    if tau <= a:
        off = s / (1.0 - a) * np.log(tau / a)
    else:
        off = -s / a * np.log((1.0 - tau) / (1.0 - a))
    return scenario.truth.alpha + off


# ---------------------------------------------------------------------------
# Replication study
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReplicationResult:
    """Per-replicate fits and their summaries.

    ``records`` holds one dict per (replicate, tau, m, G) with keys
    ``replicate, tau, m, G, converged, loglik, n_params, aic, bic`` and
    ``params`` (name -> value, or None when the cell failed).
    """

    records: list
    truth: dict
    truth_dims: tuple
    taus: tuple
    specs: tuple
    B: int

    def bias_table(self, tau: float, reference: str = "raw", shifted_alpha: np.ndarray | None = None) -> list[dict]:
        """Rows ``parameter, truth, mean, bias, sd, n`` for the truth-shaped spec at ``tau``."""
        m, G = self.truth_dims
        recs = [r for r in self.records if r["tau"] == tau and (r["m"], r["G"]) == (m, G) and r["converged"]]
        rows = []
        for name, true in self.truth.items():
            if reference == "shifted" and name.startswith("alpha[") and shifted_alpha is not None:
                true = float(shifted_alpha[int(name[6:-1]) - 1])
            vals = np.array([r["params"][name] for r in recs])
            if vals.size:
                mean = float(vals.mean())
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            else:
                mean = sd = float("nan")
            rows.append({"parameter": name, "truth": true, "mean": mean, "bias": mean - true, "sd": sd, "n": int(vals.size)})
        return rows

    def n_failed(self, tau: float, m: int, G: int) -> int:
        return sum(
            1 for r in self.records if r["tau"] == tau and (r["m"], r["G"]) == (m, G) and not r["converged"]
        )

    def selection(self, tau: float, criterion: str) -> dict[tuple[int, int], float]:
        """Fraction of replicates in which ``criterion`` ("aic" or "bic") picks each ``(m, G)``."""
        picks = []
        for b in range(self.B):
            cells = [r for r in self.records if r["replicate"] == b and r["tau"] == tau and r["converged"]]
            if not cells:
                continue
            cells.sort(key=lambda r: (r["m"], r["G"]))
            best = min(cells, key=lambda r: r[criterion])
            picks.append((best["m"], best["G"]))
        out = {spec: 0.0 for spec in self.specs}
        for p in picks:
            out[p] += 1.0 / len(picks)
        return out


def _replicate_job(args):
    scenario, b, master_seed, specs, taus, config, truth_start = args
    sim = generate(scenario.replace(seed=int(np.random.SeedSequence([master_seed, b]).generate_state(1)[0])))
    data = sim.data
    out = []
    for tau in taus:
        for m, G in specs:
            cfg = replace(config, rng_seed=int(config.rng_seed) * 1_000_003 + b, n_jobs=1)
            spec = ModelSpec(tau=tau, m=m, G=G)
            starts = None
            if truth_start and (m, G) == scenario.spec_dims:
                starts = [scenario.truth] + [initialize(data, spec, k, cfg) for k in range(1, cfg.n_starts)]
            rec = {"replicate": b, "tau": tau, "m": m, "G": G}
            try:
                res = fit(data, spec, cfg, starts=starts)
                rec.update(
                    converged=True,
                    loglik=res.loglik,
                    n_params=res.n_params,
                    aic=res.aic,
                    bic=res.bic,
                    n_iter=int(res.loglik_trace.size - 1),
                    params=res.params.vector(data.covariates),
                    traces=[t.tolist() for t in res.traces],
                )
            except NonConvergenceError as exc:
                rec.update(converged=False, loglik=np.nan, n_params=0, aic=np.nan, bic=np.nan, n_iter=0, params=None,
                           traces=[t.tolist() for t in exc.traces])
            out.append(rec)
    return out


def replicate_study(
    scenario: SimScenario,
    B: int,
    specs: Sequence[tuple[int, int]],
    tau_list: Sequence[float],
    config: EmConfig | None = None,
    master_seed: int = 0,
    truth_start: bool = False,
    n_jobs: int | None = None,
    progress: Callable[[int], None] | None = None,
) -> ReplicationResult:
    """Simulate ``B`` panels and fit every ``(m, G)`` in ``specs`` at every ``tau``.

    Replicate ``b`` draws its panel from seed ``(master_seed, b)``, so serial
    and parallel runs produce identical records.  Cells where no start
    converges are kept as non-converged records and excluded from summaries.
    """
    if B < 1:
        raise InvalidParameterError("B must be at least 1")
    config = config or EmConfig()
    specs = tuple((int(m), int(G)) for m, G in specs)
    taus = tuple(float(t) for t in tau_list)
    jobs = [(scenario, b, master_seed, specs, taus, config, truth_start) for b in range(B)]
    if progress is not None:
        chunks = []
        for b, job in enumerate(jobs):
            chunks.append(_replicate_job(job))
            progress(b)
    else:
        chunks = parallel_map(_replicate_job, jobs, n_jobs)
    records = [r for chunk in chunks for r in chunk]
    return ReplicationResult(
        records=records,
        truth=scenario.truth.vector(scenario.covariates),
        truth_dims=scenario.spec_dims,
        taus=taus,
        specs=specs,
        B=B,
    )

"""Model choice over ``(m, G)`` grids and subject-level block bootstrap."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import InvalidParameterError, LqhmmError, ModelSpec, PanelDataset
from .em import EmConfig, FitResult, fit, parallel_map

__all__ = ["GridResult", "grid_search", "BootstrapResult", "block_bootstrap", "bootstrap_indices"]


@dataclass(frozen=True, eq=False)
class GridResult:
    """Fit summaries for every ``(m, G)`` cell.

    ``cells`` holds one dict per cell with keys ``m, G, converged, loglik,
    n_params, aic, bic, start_index`` (non-converged cells carry NaN).
    Selections are argmins over converged cells, ties broken toward smaller
    ``m`` and then smaller ``G``; they are None when no cell converged.
    """

    tau: float
    n: int
    cells: list
    selected_by_aic: tuple | None
    selected_by_bic: tuple | None
    fits: dict = field(default_factory=dict, repr=False)

    def cell(self, m: int, G: int) -> dict:
        for c in self.cells:
            if (c["m"], c["G"]) == (m, G):
                return c
        raise KeyError((m, G))

    def to_json(self) -> str:
        doc = {
            "tau": self.tau,
            "n": self.n,
            "selected_by_aic": list(self.selected_by_aic) if self.selected_by_aic else None,
            "selected_by_bic": list(self.selected_by_bic) if self.selected_by_bic else None,
            "cells": self.cells,
        }
        return json.dumps(doc, indent=2, allow_nan=True) + "\n"

    def write_csv(self, path) -> None:
        cols = ["tau", "m", "G", "converged", "loglik", "n_params", "aic", "bic", "start_index"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c in self.cells:
                w.writerow([repr(self.tau)] + [_cell_str(c[k]) for k in cols[1:]])


def _cell_str(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _argmin(cells: list, key: str) -> tuple | None:
    ok = [c for c in cells if c["converged"]]
    if not ok:
        return None
    best = min(ok, key=lambda c: (c[key], c["m"], c["G"]))
    return (best["m"], best["G"])


def _grid_job(args):
    data, spec, config = args
    try:
        return fit(data, spec, config)
    except LqhmmError as exc:
        return exc


def grid_search(
    data: PanelDataset,
    m_range: Sequence[int],
    G_range: Sequence[int],
    tau: float,
    config: EmConfig = EmConfig(),
    n_jobs: int | None = None,
) -> GridResult:
    """Fit every ``(m, G)`` combination and select by AIC and BIC.

    Cells run as independent jobs (each with serial starts); a cell whose
    starts all fail is reported as non-converged.
    """
    m_range = sorted({int(m) for m in m_range})
    G_range = sorted({int(G) for G in G_range})
    if not m_range or not G_range:
        raise InvalidParameterError("m_range and G_range must be non-empty")
    specs = [ModelSpec(tau, m, G) for m in m_range for G in G_range]
    cfg = replace(config, n_jobs=1)
    results = parallel_map(_grid_job, [(data, s, cfg) for s in specs], n_jobs if n_jobs is not None else config.n_jobs)
    cells, fits = [], {}
    for spec, res in zip(specs, results):
        if isinstance(res, FitResult):
            fits[(spec.m, spec.G)] = res
            cells.append(
                {
                    "m": spec.m,
                    "G": spec.G,
                    "converged": True,
                    "loglik": float(res.loglik),
                    "n_params": int(res.n_params),
                    "aic": float(res.aic),
                    "bic": float(res.bic),
                    "start_index": int(res.start_index),
                }
            )
        else:
            cells.append(
                {"m": spec.m, "G": spec.G, "converged": False, "loglik": float("nan"), "n_params": 0,
                 "aic": float("nan"), "bic": float("nan"), "start_index": -1, "error": str(res)}
            )
    return GridResult(
        tau=float(spec.tau),
        n=data.n,
        cells=cells,
        selected_by_aic=_argmin(cells, "aic"),
        selected_by_bic=_argmin(cells, "bic"),
        fits=fits,
    )


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Percentile intervals from subject-level resampling.

    ``samples`` has one row per successful resample and one column per entry
    of ``names``; ``point`` is the original fit.
    """

    B: int
    level: float
    names: tuple
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sd: np.ndarray
    n_failed: int
    samples: np.ndarray

    def rows(self) -> list[dict]:
        return [
            {"parameter": k, "estimate": float(p), "lower": float(lo), "upper": float(hi), "sd": float(s)}
            for k, p, lo, hi, s in zip(self.names, self.point, self.lower, self.upper, self.sd)
        ]

    def to_json(self) -> str:
        doc = {"B": self.B, "level": self.level, "n_failed": self.n_failed, "parameters": self.rows()}
        return json.dumps(doc, indent=2, allow_nan=True) + "\n"

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "estimate", "lower", "upper", "sd"])
            for r in self.rows():
                w.writerow([r["parameter"]] + [repr(r[k]) for k in ("estimate", "lower", "upper", "sd")])


def bootstrap_indices(n: int, B: int, seed: int = 0) -> list[np.ndarray]:
    """Subject indices for each resample; resample ``b`` uses seed ``(seed, b)``."""
    return [np.random.default_rng([seed, b]).integers(0, n, size=n) for b in range(B)]


def _boot_job(args):
    data, index, spec, config, start, names = args
    try:
        res = fit(data.take(index), spec, config, starts=None if start is None else [start])
    except LqhmmError:
        return None
    vec = res.params.vector(data.covariates)
    return np.array([vec[k] for k in names])


def block_bootstrap(
    data: PanelDataset,
    spec: ModelSpec,
    config: EmConfig = EmConfig(),
    B: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    point: FitResult | None = None,
    multistart: bool = False,
    indices: Sequence[np.ndarray] | None = None,
    n_jobs: int | None = None,
) -> BootstrapResult:
    """Resample whole subjects with replacement and refit.

    Parameters
    ----------
    point : FitResult, optional
        Fit on the original data; computed when omitted.
    multistart : bool
        Refit each resample with the full multi-start protocol instead of a
        single start at the point estimate.
    indices : sequence of index arrays, optional
        Explicit resamples, overriding ``B`` and ``seed``.
    """
    if not (0.0 < level < 1.0):
        raise InvalidParameterError("level must lie in (0, 1)")
    if indices is None:
        if B < 1:
            raise InvalidParameterError("B must be at least 1")
        indices = bootstrap_indices(data.n, B, seed)
    indices = [np.asarray(ix, dtype=np.int64) for ix in indices]
    if point is None:
        point = fit(data, spec, config)
    vec = point.params.vector(data.covariates)
    names = tuple(vec)
    cfg = replace(config, n_jobs=1)
    start = None if multistart else point.params
    out = parallel_map(
        _boot_job,
        [(data, ix, spec, cfg, start, names) for ix in indices],
        n_jobs if n_jobs is not None else config.n_jobs,
    )
    ok = [v for v in out if v is not None]
    p = len(names)
    samples = np.vstack(ok) if ok else np.zeros((0, p))
    a = 1.0 - level
    if ok:
        lower = np.quantile(samples, a / 2.0, axis=0)
        upper = np.quantile(samples, 1.0 - a / 2.0, axis=0)
        sd = samples.std(axis=0, ddof=1) if len(ok) > 1 else np.zeros(p)
    else:
        lower = upper = sd = np.full(p, np.nan)
    return BootstrapResult(
        B=len(indices),
        level=float(level),
        names=names,
        point=np.array([vec[k] for k in names]),
        lower=lower,
        upper=upper,
        sd=sd,
        n_failed=len(indices) - len(ok),
        samples=samples,
    )

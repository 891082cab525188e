"""Reading and writing panels, fitted parameters and posterior summaries.

Panels use a long CSV layout with the fixed header prefix
``subject_id,t,y`` followed by covariate columns, one row per observed
occasion.  Floats are written with ``repr`` so that every file round-trips
exactly.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import InvalidParameterError, LqhmmError, MonotonicityError, PanelDataset, QldoParams

__all__ = [
    "PANEL_HEADER",
    "ParseError",
    "ingest_csv",
    "panel_summary",
    "write_panel_csv",
    "params_to_dict",
    "params_from_dict",
    "write_params_json",
    "read_params_json",
    "write_posteriors_csv",
    "write_trace_csv",
    "fmt",
]

PANEL_HEADER = ("subject_id", "t", "y")


class ParseError(LqhmmError, ValueError):
    """Malformed panel file; ``row`` is the 1-based file line, ``column`` the header name."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


def fmt(x) -> str:
    """Shortest string that parses back to the same float."""
    return repr(float(x))


def _number(cell: str, row: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"row {row}, column {column!r}: non-numeric value {cell!r}", row, column) from None
    if not np.isfinite(v):
        raise ParseError(f"row {row}, column {column!r}: non-finite value {cell!r}", row, column)
    return v


def ingest_csv(path, T_max: int | None = None) -> PanelDataset:
    """Load a long-format panel.

    Subjects keep the order of their first appearance; rows of a subject may
    be interleaved with other subjects and in any order of ``t``.

    Raises
    ------
    ParseError
        Bad header, wrong number of cells or a non-numeric value.
    MonotonicityError
        A subject's occasions are not exactly ``1..T_i``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file", 1) from None
        if tuple(header[:3]) != PANEL_HEADER:
            raise ParseError(f"{path}: header must start with {','.join(PANEL_HEADER)}, got {','.join(header[:3])}", 1)
        covariates = tuple(header[3:])
        if len(set(covariates)) != len(covariates):
            raise ParseError(f"{path}: duplicate covariate names", 1)
        width = len(header)
        rows: dict[str, list] = {}
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != width:
                raise ParseError(f"row {lineno}: expected {width} cells, found {len(cells)}", lineno)
            sid = cells[0].strip()
            if not sid:
                raise ParseError(f"row {lineno}: empty subject_id", lineno, "subject_id")
            t = _number(cells[1], lineno, "t")
            if t != round(t):
                raise ParseError(f"row {lineno}, column 't': occasion must be an integer, got {cells[1]!r}", lineno, "t")
            values = [_number(c, lineno, name) for c, name in zip(cells[2:], header[2:])]
            rows.setdefault(sid, []).append((int(t), values))
    if not rows:
        raise ParseError(f"{path}: no data rows", 2)
    n, q = len(rows), len(covariates)
    longest = max(len(obs) for obs in rows.values())
    if T_max is not None and T_max < longest:
        raise InvalidParameterError(f"T_max={T_max} is smaller than the longest subject ({longest})")
    T = T_max or longest
    lengths = np.zeros(n, dtype=np.int64)
    y = np.zeros((n, T))
    X = np.zeros((n, T, q))
    for i, (sid, obs) in enumerate(rows.items()):
        obs.sort(key=lambda r: r[0])
        times = [t for t, _ in obs]
        if times != list(range(1, len(times) + 1)):
            raise MonotonicityError(
                f"subject {sid!r}: occasions {times} are not 1..T_i without gaps or repeats", subject=sid
            )
        vals = np.array([v for _, v in obs], dtype=float).reshape(len(obs), q + 1)
        lengths[i] = len(obs)
        y[i, : len(obs)] = vals[:, 0]
        X[i, : len(obs)] = vals[:, 1:]
    return PanelDataset(ids=tuple(rows), lengths=lengths, y=y, X=X, covariates=covariates, T_max=T)


def panel_summary(data: PanelDataset) -> dict:
    """Number of subjects and observations, drop-out time counts and at-risk counts."""
    counts = Counter(int(L) for L in data.lengths)
    return {
        "n": data.n,
        "n_obs": data.n_obs,
        "T_max": data.T_max,
        "T_counts": {str(t): counts.get(t, 0) for t in range(1, data.T_max + 1)},
        "at_risk": [int(c) for c in data.dropout_counts()],
    }


def write_panel_csv(data: PanelDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_HEADER + tuple(data.covariates))
        for i, sid in enumerate(data.ids):
            y, X = data.subject(i)
            for t in range(y.size):
                w.writerow([sid, t + 1, fmt(y[t])] + [fmt(v) for v in X[t]])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def params_to_dict(params: QldoParams, tau: float, covariates: Sequence[str] | None = None, **extra) -> dict:
    """Self-describing JSON-ready record of a parameter set."""
    covariates = list(covariates) if covariates is not None else [f"x{j + 1}" for j in range(params.q)]
    out = {
        "tau": float(tau),
        "m": params.m,
        "G": params.G,
        "q": params.q,
        "covariates": covariates,
        "beta": [float(v) for v in params.beta],
        "alpha": [float(v) for v in params.alpha],
        "sigma": float(params.sigma),
        "delta": [float(v) for v in params.delta],
        "Q": [[[float(v) for v in row] for row in Qg] for Qg in params.Q],
        "lambda0": [float(v) for v in params.lambda0],
        "lambda1": float(params.lambda1),
    }
    for key, val in extra.items():
        out[key] = _plain(val)
    return out


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, Mapping):
        return {str(k): _plain(x) for k, x in v.items()}
    return v


def params_from_dict(d: Mapping) -> QldoParams:
    """Inverse of :func:`params_to_dict`; dimensions are checked against the metadata."""
    p = QldoParams(
        beta=np.asarray(d["beta"], dtype=float).reshape(-1),
        alpha=d["alpha"],
        sigma=d["sigma"],
        delta=d["delta"],
        Q=np.asarray(d["Q"], dtype=float),
        lambda0=np.asarray(d["lambda0"], dtype=float).reshape(-1),
        lambda1=d["lambda1"],
    )
    if (p.m, p.G, p.q) != (d["m"], d["G"], d["q"]):
        raise InvalidParameterError(
            f"array shapes give (m, G, q) = {(p.m, p.G, p.q)} but metadata says {(d['m'], d['G'], d['q'])}"
        )
    return p


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n"


def write_params_json(path, fits: Iterable[dict]) -> None:
    """Write a list of :func:`params_to_dict` records, one per quantile level."""
    Path(path).write_text(dumps({"fits": list(fits)}))


def read_params_json(path) -> list[tuple[dict, QldoParams]]:
    doc = json.loads(Path(path).read_text())
    return [(rec, params_from_dict(rec)) for rec in doc["fits"]]


# ---------------------------------------------------------------------------
# Posterior summaries and traces
# ---------------------------------------------------------------------------


def write_posteriors_csv(path, entries: Iterable[tuple[float, PanelDataset, object]]) -> None:
    """MAP hidden state per occasion and MAP drop-out class per subject.

    ``entries`` yields ``(tau, data, posteriors)``.  Columns are
    ``subject_id, tau, t, map_state, map_class, zeta_1..zeta_G``; states and
    classes are 1-based, ties go to the lowest index.
    """
    entries = list(entries)
    G = max(post.zeta.shape[1] for _, _, post in entries)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "tau", "t", "map_state", "map_class"] + [f"zeta_{g + 1}" for g in range(G)])
        for tau, data, post in entries:
            for i, sid in enumerate(data.ids):
                u, _, zeta = post.for_subject(i)
                cls = int(np.argmax(zeta)) + 1
                z = [fmt(v) for v in zeta] + [""] * (G - zeta.size)
                for t in range(u.shape[0]):
                    w.writerow([sid, fmt(tau), t + 1, int(np.argmax(u[t])) + 1, cls] + z)


def write_trace_csv(path, traces: Iterable[tuple[float, int, int, np.ndarray]]) -> None:
    """Rows ``tau, m, G, iteration, loglik``; ``traces`` yields ``(tau, m, G, trace)``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "m", "G", "iteration", "loglik"])
        for tau, m, G, trace in traces:
            for it, ll in enumerate(np.asarray(trace)):
                w.writerow([fmt(tau), m, G, it, fmt(ll)])

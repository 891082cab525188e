"""Command-line interface: ``lqhmm {fit,simulate,select,bootstrap,replicate}``.

Every subcommand writes plain CSV/JSON artifacts into ``--out``.  Outputs
depend only on the inputs, flags and ``--seed``; the number of worker
processes (``--threads`` or ``$LQHMM_NUM_THREADS``) never changes them.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import LqhmmError, ModelSpec
from .em import EmConfig, fit
from .io import (
    dumps,
    fmt,
    ingest_csv,
    panel_summary,
    params_to_dict,
    write_panel_csv,
    write_params_json,
    write_posteriors_csv,
    write_trace_csv,
)
from .select import block_bootstrap, grid_search
from .simulate import default_scenario, generate, quantile_shifted_truth, replicate_study

log = logging.getLogger("lqhmm")


class UsageError(Exception):
    pass


def parse_range(text: str) -> list[int]:
    """``"3,4,5"``, ``"3-5"`` or ``"3"`` -> list of ints."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return out


def parse_taus(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad quantile list {text!r}") from None


def _em_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("EM")
    d = EmConfig()
    g.add_argument("--starts", type=int, default=d.n_starts, help="number of EM starts (default %(default)s)")
    g.add_argument("--epsilon", type=float, default=d.epsilon, help="stopping threshold on the loglik gain")
    g.add_argument("--relative", action="store_true", help="use the relative loglik gain")
    g.add_argument("--max-iter", type=int, default=d.max_iter)
    g.add_argument("--inner-tol", type=float, default=d.inner_tol)
    g.add_argument("--seed", type=int, default=0, help="master seed for starts and resampling")
    g.add_argument("--threads", type=int, default=None, help="worker processes (default $LQHMM_NUM_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lqhmm", description="Quantile HMMs for longitudinal data with drop-out.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one (m, G) model at one or more quantile levels")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tau", type=parse_taus, default=[0.5])
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--G", type=int, default=1)
    _em_flags(p)

    p = sub.add_parser("simulate", help="draw a panel from the default scenario")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", type=int, default=None, help="number of subjects (default 369)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-variance", type=float, default=None)

    p = sub.add_parser("select", help="AIC/BIC over a grid of (m, G)")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tau", type=parse_taus, default=[0.5])
    p.add_argument("--m-range", type=parse_range, required=True)
    p.add_argument("--G-range", type=parse_range, default=[1])
    _em_flags(p)

    p = sub.add_parser("bootstrap", help="block-bootstrap percentile intervals")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tau", type=parse_taus, default=[0.5])
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--G", type=int, default=1)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--multistart", action="store_true", help="full multi-start refits instead of warm starts")
    _em_flags(p)

    p = sub.add_parser("replicate", help="simulation study on the default scenario")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tau", type=parse_taus, default=[0.25, 0.5])
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--m-range", type=parse_range, default=None)
    p.add_argument("--G-range", type=parse_range, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--truth-start", action="store_true", help="add the generating parameters as an extra start")
    _em_flags(p)
    return ap


def _config(args) -> EmConfig:
    return EmConfig(
        epsilon=args.epsilon,
        max_iter=args.max_iter,
        n_starts=args.starts,
        rng_seed=args.seed,
        inner_tol=args.inner_tol,
        relative=args.relative,
        n_jobs=args.threads,
    )


def _outdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args):
    data = ingest_csv(args.input)
    s = panel_summary(data)
    log.info("read %d subjects, %d observations; T distribution %s", s["n"], s["n_obs"], s["T_counts"])
    return data, s


def _fit_record(res, data, tau):
    return params_to_dict(
        res.params,
        tau,
        data.covariates,
        loglik=res.loglik,
        n_params=res.n_params,
        aic=res.aic,
        bic=res.bic,
        n_subjects=data.n,
        start_index=res.start_index,
        iterations=int(res.loglik_trace.size - 1),
    )


def _write_fits(out: Path, data, fits) -> None:
    """``fits`` is a list of ``(tau, FitResult)``."""
    write_params_json(out / "params.json", [_fit_record(r, data, tau) for tau, r in fits])
    write_posteriors_csv(out / "posteriors.csv", [(tau, data, r.posteriors) for tau, r in fits])
    write_trace_csv(out / "loglik_trace.csv", [(tau, r.spec.m, r.spec.G, r.loglik_trace) for tau, r in fits])


def cmd_fit(args) -> None:
    data, summary = _load(args)
    out = _outdir(args.out)
    cfg = _config(args)
    fits = []
    for tau in args.tau:
        res = fit(data, ModelSpec(tau, args.m, args.G), cfg)
        log.info("tau=%s: loglik %.4f, AIC %.2f, BIC %.2f", tau, res.loglik, res.aic, res.bic)
        fits.append((tau, res))
    (out / "data_summary.json").write_text(dumps(summary))
    _write_fits(out, data, fits)


def cmd_simulate(args) -> None:
    sc = default_scenario(seed=args.seed)
    if args.n is not None:
        sc = sc.replace(n=args.n)
    if args.noise_variance is not None:
        sc = sc.replace(noise_variance=args.noise_variance)
    sim = generate(sc)
    out = _outdir(args.out)
    write_panel_csv(sim.data, out / "panel.csv")
    write_params_json(out / "truth.json", [params_to_dict(sc.truth, 0.5, sc.covariates, noise_variance=sc.noise_variance)])
    with (out / "latent.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "t", "state", "class"])
        for i, sid in enumerate(sim.data.ids):
            for t in range(sim.data.lengths[i]):
                w.writerow([sid, t + 1, int(sim.states[i, t]), int(sim.classes[i])])
    (out / "data_summary.json").write_text(dumps(panel_summary(sim.data)))


def cmd_select(args) -> None:
    data, summary = _load(args)
    out = _outdir(args.out)
    cfg = _config(args)
    fits, grids = [], []
    for tau in args.tau:
        grid = grid_search(data, args.m_range, args.G_range, tau, cfg)
        grids.append(json.loads(grid.to_json()))
        grid.write_csv(out / f"grid_tau{tau:g}.csv")
        log.info("tau=%s: AIC selects %s, BIC selects %s", tau, grid.selected_by_aic, grid.selected_by_bic)
        if grid.selected_by_aic is not None:
            fits.append((tau, grid.fits[grid.selected_by_aic]))
    (out / "grid.json").write_text(dumps(grids))
    (out / "data_summary.json").write_text(dumps(summary))
    if fits:
        _write_fits(out, data, fits)
    if not fits:
        raise LqhmmError("no grid cell converged")


def cmd_bootstrap(args) -> None:
    if args.B < 1:
        raise UsageError("--B must be at least 1")
    if not 0.0 < args.level < 1.0:
        raise UsageError("--level must lie in (0, 1)")
    data, summary = _load(args)
    out = _outdir(args.out)
    cfg = _config(args)
    fits, docs = [], []
    for tau in args.tau:
        spec = ModelSpec(tau, args.m, args.G)
        point = fit(data, spec, cfg)
        fits.append((tau, point))
        bs = block_bootstrap(data, spec, cfg, B=args.B, level=args.level, seed=args.seed, point=point,
                             multistart=args.multistart)
        bs.write_csv(out / f"bootstrap_tau{tau:g}.csv")
        doc = json.loads(bs.to_json())
        doc["tau"] = tau
        docs.append(doc)
        log.info("tau=%s: %d of %d resamples failed", tau, bs.n_failed, bs.B)
    (out / "bootstrap.json").write_text(dumps(docs))
    (out / "data_summary.json").write_text(dumps(summary))
    _write_fits(out, data, fits)


def cmd_replicate(args) -> None:
    sc = default_scenario()
    if args.n is not None:
        sc = sc.replace(n=args.n)
    m0, G0 = sc.spec_dims
    ms = args.m_range or [m0]
    Gs = args.G_range or [G0]
    specs = [(m, G) for m in ms for G in Gs]
    cfg = _config(args)
    res = replicate_study(sc, args.B, specs, args.tau, replace(cfg, n_jobs=1), master_seed=args.seed,
                          truth_start=args.truth_start, n_jobs=args.threads)
    out = _outdir(args.out)
    summary = []
    for tau in res.taus:
        if (m0, G0) in specs:
            shifted = quantile_shifted_truth(sc, tau)
            for ref in ("raw", "shifted"):
                rows = res.bias_table(tau, reference=ref, shifted_alpha=shifted)
                _write_rows(out / f"bias_tau{tau:g}_{ref}.csv", rows, ["parameter", "truth", "mean", "bias", "sd", "n"])
        for crit in ("aic", "bic"):
            sel = res.selection(tau, crit)
            summary.extend({"tau": tau, "criterion": crit, "m": m, "G": G, "fraction": f} for (m, G), f in sel.items())
        summary.extend(
            {"tau": tau, "criterion": "failed", "m": m, "G": G, "fraction": res.n_failed(tau, m, G) / res.B}
            for m, G in specs
        )
    _write_rows(out / "selection.csv", summary, ["tau", "criterion", "m", "G", "fraction"])
    recs = [{k: v for k, v in r.items() if k != "traces"} for r in res.records]
    (out / "records.json").write_text(dumps(recs))


def _write_rows(path: Path, rows, cols) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "select": cmd_select,
    "bootstrap": cmd_bootstrap,
    "replicate": cmd_replicate,
}


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (LqhmmError, UsageError, ValueError, OSError) as exc:
        print(f"lqhmm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

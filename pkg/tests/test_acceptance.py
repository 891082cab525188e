"""Acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed at the end of
the session (see ``conftest.py``); run with ``python tests/test_acceptance.py``
to get the same lines without pytest.

The replication-based checks read their fits from ``tests/.cache`` (see
``acceptance_experiments.py``) and compute whatever is missing, which takes
a few CPU hours from scratch.  Setting ``LQHMM_FAST_GATE=1`` uses the first
20 replicates with the widened tolerance for the recovery check.
"""

from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from lqhmm import EmConfig, ModelSpec, PanelDataset, QldoParams, e_step, fit, generate, initialize, subject_loglik

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

import acceptance_experiments as experiments  # noqa: E402
from conftest import small_scenario  # noqa: E402
from oracles import enumerate_subject, plain_hmm_em  # noqa: E402

VERDICTS: list[str] = []
FAST = os.environ.get("LQHMM_FAST_GATE", "") not in ("", "0")


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def _rel(a, b, floor=1e-300):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor), initial=0.0))


# ---------------------------------------------------------------------------


def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst_ll = worst_post = 0.0
    n_cases = 120
    for _ in range(n_cases):
        m, G, q = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 3))
        tau = float(rng.uniform(0.05, 0.95))
        p = QldoParams(
            beta=rng.normal(size=q), alpha=np.sort(rng.normal(size=m)), sigma=float(rng.uniform(0.3, 2.0)),
            delta=rng.dirichlet(np.ones(m)), Q=rng.dirichlet(np.ones(m), size=(G, m)),
            lambda0=np.sort(rng.normal(size=G - 1)), lambda1=float(0.5 * rng.normal()),
        )
        n = int(rng.integers(1, 5))
        ys = [rng.normal(scale=2.0, size=rng.integers(1, 6)) for _ in range(n)]
        Xs = [rng.normal(size=(len(v), q)) for v in ys]
        data = PanelDataset.from_subjects(ys, Xs, T_max=5)
        post = e_step(data, p, tau)
        for i in range(n):
            ll, u, pair, zeta = enumerate_subject(ys[i], Xs[i], p, tau)
            worst_ll = max(worst_ll, _rel(subject_loglik(ys[i], Xs[i], len(ys[i]), p, tau), ll),
                           _rel(post.subject_loglik[i], ll))
            u_hat, pair_hat, z_hat = post.for_subject(i)
            worst_post = max(worst_post, _rel(u_hat, u), _rel(z_hat, zeta), _rel(pair_hat, pair))
    verdict(
        "oracle equivalence",
        worst_ll <= 1e-9 and worst_post <= 1e-9,
        f"{n_cases} cases, max rel. error loglik {worst_ll:.1e}, posteriors {worst_post:.1e} (tol 1e-9)",
    )


def _grid(n_rep=experiments.B):
    return experiments.run("grid_tau50", n_rep)


def test_em_ascent():
    res = _grid(20)
    tol = 10 * experiments.CONFIG.inner_tol
    worst, n_traces, n_fits = 0.0, 0, 0
    for r in res.records:
        if (r["m"], r["G"]) != (4, 2) or r["replicate"] >= 20:
            continue
        n_fits += 1
        for tr in r["traces"]:
            if len(tr) > 1:
                n_traces += 1
                worst = max(worst, float(np.max(-np.diff(tr))))
    verdict("EM ascent", n_fits == 20 and worst <= tol,
            f"{n_fits} fits / {n_traces} traces, largest loglik decrease {worst:.2e} (tol {tol:.0e})")


def _bias(res, tau):
    rows = res.bias_table(tau)
    return {r["parameter"]: r for r in rows}


def test_recovery_tau50():
    B, tol_b, tol_a = (20, 0.08, 0.08) if FAST else (50, 0.03, 0.05)
    res = _grid(B)
    rows = _bias(res, 0.5)
    beta = {k: v["bias"] for k, v in rows.items() if k.startswith("beta[")}
    alpha = {k: v["bias"] for k, v in rows.items() if k.startswith("alpha[")}
    wb = max(beta, key=lambda k: abs(beta[k]))
    wa = max(alpha, key=lambda k: abs(alpha[k]))
    n_ok = rows[wa]["n"]
    ok = abs(beta[wb]) <= tol_b and abs(alpha[wa]) <= tol_a
    verdict("recovery tau=0.50", ok,
            f"B={B} ({n_ok} converged), max |bias| beta {abs(beta[wb]):.4f} at {wb} (tol {tol_b}), "
            f"alpha {abs(alpha[wa]):.4f} at {wa} (tol {tol_a})")


def test_transition_recovery():
    details, ok = [], True
    for name, tau in (("truth_tau25", 0.25), ("grid_tau50", 0.5)):
        res = experiments.run(name)
        rows = _bias(res, tau)
        qb = {k: v["bias"] for k, v in rows.items() if k.startswith("Q")}
        worst = max(qb, key=lambda k: abs(qb[k]))
        ok &= abs(qb[worst]) <= 0.10
        details.append(f"tau={tau}: max |bias| {abs(qb[worst]):.3f} at {worst}")
    verdict("transition recovery", ok, "; ".join(details) + " (tol 0.10)")


def test_model_choice():
    res = _grid()
    aic = res.selection(0.5, "aic")
    bic = res.selection(0.5, "bic")
    aic42 = aic[(4, 2)]
    bic_g1 = sum(f for (m, G), f in bic.items() if G == 1)
    top_aic = max(aic, key=aic.get)
    top_bic = max(bic, key=bic.get)
    verdict("model choice", aic42 >= 0.70 and bic_g1 >= 0.80,
            f"AIC picks (4,2) in {aic42:.0%} (need 70%, modal {top_aic} {aic[top_aic]:.0%}); "
            f"BIC picks G=1 in {bic_g1:.0%} (need 80%, modal {top_bic} {bic[top_bic]:.0%})")


def test_mar_reduction():
    worst = 0.0
    for seed in range(10):
        data = generate(small_scenario(seed, n=60)).data
        tau = (0.25, 0.5, 0.75)[seed % 3]
        spec = ModelSpec(tau, 2, 1)
        cfg = EmConfig(n_starts=1, epsilon=1e-11, relative=True, max_iter=5000)
        start = initialize(data, spec, 0, cfg)
        ours = fit(data, spec, cfg, starts=[start]).loglik
        ref, _ = plain_hmm_em(data.y, data.X, data.lengths,
                              (start.beta, start.alpha, start.sigma, start.delta, start.Q[0]), tau)
        worst = max(worst, abs(ours - ref))
    verdict("MAR reduction", worst <= 1e-8, f"10 datasets, max |loglik difference| {worst:.1e} (tol 1e-8)")


def _cli(args, env_threads):
    env = dict(os.environ, LQHMM_NUM_THREADS=str(env_threads))
    return subprocess.run([sys.executable, "-m", "lqhmm.cli"] + args, env=env, capture_output=True, text=True)


def test_determinism(tmp_path):
    sim = tmp_path / "sim"
    assert _cli(["simulate", "--out", str(sim), "--n", "80", "--seed", "11"], 1).returncode == 0
    outputs = []
    for k, threads in enumerate((1, 1, 3)):
        out = tmp_path / f"fit{k}"
        r = _cli(["fit", "--input", str(sim / "panel.csv"), "--out", str(out), "--m", "3", "--G", "2",
                  "--tau", "0.25,0.5", "--starts", "3", "--epsilon", "1e-4", "--seed", "5"], threads)
        assert r.returncode == 0, r.stderr
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    sim2 = tmp_path / "sim2"
    _cli(["simulate", "--out", str(sim2), "--n", "80", "--seed", "11"], 2)
    same_sim = all((sim / f).read_bytes() == (sim2 / f).read_bytes() for f in ("panel.csv", "latent.csv"))
    ok = outputs[0] == outputs[1] == outputs[2] and same_sim
    verdict("determinism", ok, f"{len(outputs[0])} fit artifacts compared over 3 runs (1, 1, 3 workers); "
            f"simulate outputs identical: {same_sim}")


if __name__ == "__main__":
    import tempfile

    for name, func in list(globals().items()):
        if name.startswith("test_"):
            try:
                if name == "test_determinism":
                    with tempfile.TemporaryDirectory() as tmp:
                        func(Path(tmp))
                else:
                    func()
            except AssertionError:
                pass
    print("\n".join(VERDICTS))

import json

import numpy as np
import pytest

from lqhmm.cli import main, parse_range
from lqhmm.io import ingest_csv, read_params_json


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def panel(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--n", "40", "--seed", "2"]) == 0
    return out / "panel.csv"


def test_parse_range():
    assert parse_range("3-5") == [3, 4, 5]
    assert parse_range("1,3") == [1, 3]


def test_simulate_outputs(panel):
    d = ingest_csv(panel)
    assert d.n == 40 and d.q == 6
    truth = json.loads((panel.parent / "truth.json").read_text())
    assert truth["fits"][0]["m"] == 4


def test_fit_writes_reingestable_artifacts(panel, tmp_path):
    rc = main(["fit", "--input", str(panel), "--out", str(tmp_path), "--m", "2", "--G", "2", "--tau", "0.25,0.5",
               "--starts", "2", "--epsilon", "1e-3"])
    assert rc == 0
    fits = read_params_json(tmp_path / "params.json")
    assert [rec["tau"] for rec, _ in fits] == [0.25, 0.5]
    rec, p = fits[0]
    assert p.m == 2 and p.G == 2 and rec["aic"] == -2 * rec["loglik"] + 2 * rec["n_params"]
    post = (tmp_path / "posteriors.csv").read_text().splitlines()
    assert post[0] == "subject_id,tau,t,map_state,map_class,zeta_1,zeta_2"
    assert len(post) == 1 + 2 * ingest_csv(panel).n_obs
    trace = (tmp_path / "loglik_trace.csv").read_text().splitlines()
    assert trace[0] == "tau,m,G,iteration,loglik"


def test_errors_exit_nonzero_with_diagnostic(tmp_path, capsys):
    bad = tmp_path / "gap.csv"
    bad.write_text("subject_id,t,y\n1,1,0.0\n1,3,1.0\n")
    assert main(["fit", "--input", str(bad), "--out", str(tmp_path / "o"), "--m", "1"]) != 0
    err = capsys.readouterr().err
    assert "lqhmm fit: error" in err and "'1'" in err
    assert main(["fit", "--input", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o"), "--m", "1"]) != 0


def test_single_state_fit_is_the_sample_quantile(tmp_path):
    src = tmp_path / "p.csv"
    rng = np.random.default_rng(0)
    y = rng.normal(size=(9, 3))
    src.write_text("subject_id,t,y\n" + "".join(f"{i},{t + 1},{float(y[i, t])!r}\n" for i in range(9) for t in range(3)))
    assert main(["fit", "--input", str(src), "--out", str(tmp_path / "o"), "--m", "1", "--tau", "0.5",
                 "--starts", "1"]) == 0
    (_, p), = read_params_json(tmp_path / "o" / "params.json")
    assert p.alpha[0] == pytest.approx(np.median(y), abs=1e-7)


def test_select_and_bootstrap(panel, tmp_path):
    assert main(["select", "--input", str(panel), "--out", str(tmp_path / "s"), "--m-range", "1-2",
                 "--G-range", "1", "--starts", "1", "--epsilon", "1e-3"]) == 0
    grid = json.loads((tmp_path / "s" / "grid.json").read_text())[0]
    assert len(grid["cells"]) == 2 and grid["selected_by_bic"] is not None
    assert main(["bootstrap", "--input", str(panel), "--out", str(tmp_path / "b"), "--m", "2", "--B", "3",
                 "--starts", "1", "--epsilon", "1e-3"]) == 0
    rows = (tmp_path / "b" / "bootstrap_tau0.5.csv").read_text().splitlines()
    assert rows[0] == "parameter,estimate,lower,upper,sd"


def test_replicate_tables(tmp_path):
    assert main(["replicate", "--out", str(tmp_path), "--B", "1", "--n", "60", "--tau", "0.5", "--m-range", "2",
                 "--G-range", "1", "--starts", "1", "--epsilon", "1e-2"]) == 0
    assert (tmp_path / "selection.csv").exists() and (tmp_path / "records.json").exists()


@pytest.mark.parametrize("sub", ["fit", "select"])
def test_outputs_identical_across_runs_and_threads(panel, tmp_path, sub):
    if sub == "fit":
        args = ["fit", "--input", str(panel), "--m", "2", "--G", "2", "--starts", "3", "--epsilon", "1e-3", "--seed", "5"]
    else:
        args = ["select", "--input", str(panel), "--m-range", "1-2", "--G-range", "1-2", "--starts", "2",
                "--epsilon", "1e-3", "--seed", "5"]
    runs = []
    for k, threads in enumerate(["1", "1", "2"]):
        out = tmp_path / f"run{k}"
        assert main(args + ["--out", str(out), "--threads", threads]) == 0
        runs.append(_files(out))
    assert runs[0] == runs[1] == runs[2]

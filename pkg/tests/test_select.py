import numpy as np
import pytest

from lqhmm import EmConfig, InvalidParameterError, ModelSpec, PanelDataset, fit, generate
from lqhmm.select import block_bootstrap, bootstrap_indices, grid_search

from conftest import small_scenario

CFG = EmConfig(n_starts=2, epsilon=1e-6)


def test_trivial_grid():
    d = generate(small_scenario(0, n=30)).data
    g = grid_search(d, [1], [1], 0.5, CFG)
    assert g.selected_by_aic == (1, 1) == g.selected_by_bic
    with pytest.raises(InvalidParameterError):
        grid_search(d, [], [1], 0.5, CFG)


def test_grid_records_and_selection():
    d = generate(small_scenario(1, n=120)).data
    g = grid_search(d, [1, 2, 3], [1, 2], 0.5, CFG)
    assert len(g.cells) == 6
    for c in g.cells:
        if c["converged"]:
            assert c["aic"] == -2 * c["loglik"] + 2 * c["n_params"]
            assert c["bic"] == -2 * c["loglik"] + c["n_params"] * np.log(d.n)
    ok = [c for c in g.cells if c["converged"]]
    best = min(ok, key=lambda c: (c["bic"], c["m"], c["G"]))
    assert g.selected_by_bic == (best["m"], best["G"])
    assert g.selected_by_bic[0] == 2  # two well-separated states
    # selection ignores the row order of the panel
    perm = np.random.default_rng(0).permutation(d.n)
    g2 = grid_search(d.take(perm), [1, 2, 3], [1, 2], 0.5, CFG)
    assert (g2.selected_by_aic, g2.selected_by_bic) == (g.selected_by_aic, g.selected_by_bic)


def test_ties_prefer_smaller_models():
    from lqhmm.select import _argmin

    cells = [
        {"m": 3, "G": 1, "converged": True, "aic": 1.0},
        {"m": 2, "G": 2, "converged": True, "aic": 1.0},
        {"m": 2, "G": 1, "converged": False, "aic": float("nan")},
    ]
    assert _argmin(cells, "aic") == (2, 2)


def test_bootstrap_single_resample_is_degenerate():
    d = generate(small_scenario(2, n=40)).data
    bs = block_bootstrap(d, ModelSpec(0.5, 2, 1), CFG, B=1, seed=3)
    assert bs.samples.shape[0] == 1 and bs.n_failed == 0
    assert np.array_equal(bs.lower, bs.upper) and np.array_equal(bs.lower, bs.samples[0])


def test_bootstrap_constant_response():
    d = PanelDataset.from_subjects([[2.5, 2.5, 2.5]] * 4 + [[2.5]] * 3)
    # the ALD scale collapses on constant data, so every refit fails
    bs = block_bootstrap(
        d, ModelSpec(0.5, 1, 1), CFG, B=3,
        point=_constant_point(d),
    )
    assert bs.n_failed == 3


def _constant_point(d):
    from lqhmm import QldoParams
    from lqhmm.em import FitResult

    p = QldoParams(beta=[], alpha=[2.5], sigma=1.0, delta=[1.0], Q=np.ones((1, 1, 1)))
    return FitResult(params=p, posteriors=None, loglik_trace=np.zeros(1), converged=True, n_params=2,
                     aic=0.0, bic=0.0, start_index=0)


def test_bootstrap_identity_resamples_reproduce_point_fit():
    d = generate(small_scenario(3, n=60)).data
    spec = ModelSpec(0.5, 2, 1)
    cfg = EmConfig(n_starts=2, epsilon=1e-10)
    point = fit(d, spec, cfg)
    ident = [np.arange(d.n)] * 3
    bs = block_bootstrap(d, spec, cfg, point=point, indices=ident)
    assert bs.n_failed == 0
    assert np.allclose(bs.samples, bs.point, atol=1e-6)
    assert np.allclose(bs.lower, bs.upper, atol=1e-6)


def test_bootstrap_resamples_are_seeded_and_level_widens():
    d = generate(small_scenario(5, n=60)).data
    spec = ModelSpec(0.5, 2, 1)
    a = block_bootstrap(d, spec, CFG, B=12, level=0.5, seed=1)
    b = block_bootstrap(d, spec, CFG, B=12, level=0.95, seed=1)
    assert np.array_equal(a.samples, b.samples)
    assert np.all(b.upper - b.lower >= a.upper - a.lower - 1e-12)
    assert np.all(a.lower <= a.upper)
    ix = bootstrap_indices(10, 2, seed=4)
    assert np.array_equal(ix[0], bootstrap_indices(10, 2, seed=4)[0])

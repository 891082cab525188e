import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqhmm import (
    InvalidParameterError,
    ModelSpec,
    PanelDataset,
    QldoParams,
    QuantileLevel,
    ald_log_density,
    check_loss,
    ldo_class_probs,
    linear_predictor,
)
from scipy.integrate import trapezoid

from lqhmm.core import canonical_order, log_ldo_class_probs, logsumexp

from conftest import random_params


def test_quantile_level_bounds():
    assert QuantileLevel(0.25).tau == 0.25
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(InvalidParameterError):
            QuantileLevel(bad)
    with pytest.raises(InvalidParameterError):
        ModelSpec(0.5, 0)


def test_check_loss_values():
    assert check_loss(2.0, 0.25) == 0.5
    assert check_loss(-2.0, 0.25) == 1.5
    assert check_loss(0.0, 0.7) == 0.0


@given(st.floats(-50, 50), st.floats(0.01, 0.99))
def test_check_loss_nonnegative_and_tilted(u, tau):
    assert check_loss(u, tau) >= 0
    assert check_loss(u, tau) == pytest.approx(check_loss(-u, 1 - tau))


def test_ald_density_at_mode_and_integral():
    tau, sigma = 0.3, 0.7
    assert ald_log_density(1.0, 1.0, sigma, tau) == pytest.approx(np.log(tau * (1 - tau) / sigma))
    grid = np.linspace(-40, 40, 400001)
    dens = np.exp(ald_log_density(grid, 0.0, sigma, tau))
    assert trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)
    # the location is the tau-quantile
    cdf = trapezoid(dens[grid <= 0], grid[grid <= 0])
    assert cdf == pytest.approx(tau, abs=1e-4)


def test_ald_rejects_nonpositive_scale():
    with pytest.raises(InvalidParameterError):
        ald_log_density(0.0, 0.0, 0.0, 0.5)


def test_linear_predictor():
    p = QldoParams(beta=[1.0, -2.0], alpha=[0.5, 3.0], sigma=1.0, delta=[0.5, 0.5], Q=np.eye(2))
    assert linear_predictor([1.0, 1.0], 2, p) == pytest.approx(2.0)
    with pytest.raises(InvalidParameterError):
        linear_predictor([1.0, 1.0], 3, p)


def test_class_probs_single_class_and_symmetry():
    assert np.array_equal(ldo_class_probs(5, [], 0.0, 1), [1.0])
    assert np.allclose(ldo_class_probs(3, [0.0], 0.0, 2), [0.5, 0.5])


@given(
    st.lists(st.floats(-10, 10), min_size=1, max_size=4),
    st.floats(-3, 3),
    st.integers(1, 12),
)
def test_class_probs_form_a_distribution(cuts, slope, T):
    lam = np.sort(cuts)
    p = ldo_class_probs(T, lam, slope)
    assert p.shape == (lam.size + 1,)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_class_probs_tail_precision():
    lp = log_ldo_class_probs([1.0], [40.0, 41.0], 0.0, 3)[0]
    # P(class 3) = 1 - F(41) ~ exp(-41), must not round to zero
    assert lp[2] == pytest.approx(-41.0, abs=1e-9)


def test_cutpoints_must_be_ordered():
    with pytest.raises(InvalidParameterError):
        QldoParams(beta=[], alpha=[0.0, 1.0], sigma=1.0, delta=[0.5, 0.5], Q=np.tile(np.eye(2), (3, 1, 1)),
                   lambda0=[1.0, 0.0], lambda1=0.0)


def test_params_validation(rng):
    p = random_params(rng, 3, 2, 2)
    with pytest.raises(InvalidParameterError):
        p.replace(sigma=-1.0)
    with pytest.raises(InvalidParameterError):
        p.replace(delta=[0.5, 0.5, 0.5])
    with pytest.raises(InvalidParameterError):
        p.replace(Q=np.ones((2, 3, 3)))
    assert p.replace(lambda1=1.0).lambda1 == 1.0
    assert random_params(rng, 2, 1, 0).lambda1 == 0.0


def test_param_vector_names(rng):
    p = random_params(rng, 2, 2, 1)
    v = p.vector(["age"])
    assert list(v)[:4] == ["alpha[1]", "alpha[2]", "beta[age]", "sigma"]
    assert "Q2[1,2]" in v and "lambda1" in v


def test_logsumexp_all_minus_inf():
    assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf
    assert logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000 + np.log(2))


def test_canonical_order_ties():
    assert list(canonical_order([2.0, 1.0, 3.0])) == [1, 0, 2]
    assert list(canonical_order([1.0, 1.0 + 1e-10, 0.0], first_mass=[0.1, 0.6, 0.3])) == [2, 1, 0]


def test_panel_padding_and_take():
    d = PanelDataset.from_subjects([[1.0, 2.0], [3.0]], [[[1.0], [2.0]], [[5.0]]], ids=["a", "b"], covariates=["x"])
    assert d.n == 2 and d.T_max == 2 and d.n_obs == 3
    assert d.y[1, 1] == 0.0 and d.X[1, 1, 0] == 0.0
    assert list(d.dropout_counts()) == [2, 1]
    sub = d.take([1, 1, 0])
    assert sub.ids == ("b", "b", "a") and sub.n_obs == 4
    assert not d.y.flags.writeable


def test_panel_rejects_missing_observed_values():
    with pytest.raises(InvalidParameterError):
        PanelDataset.from_subjects([[1.0, np.nan]])


def test_documented_values():
    assert check_loss(3.0, 0.5) == check_loss(-3.0, 0.5) == 1.5
    assert ald_log_density(2.0, 1.0, 1.0, 0.5) == pytest.approx(np.log(0.25) - 0.5)
    grid = np.linspace(-30, 30, 600001)
    assert trapezoid(np.exp(ald_log_density(grid, 0.0, 0.48, 0.25)), grid) == pytest.approx(1.0, abs=1e-6)
    p = QldoParams(beta=[-0.088, 0.006, 0.148, 0.055, 0.009, -0.004], alpha=[5.861, 6.306, 6.650, 7.039],
                   sigma=1.0, delta=np.full(4, 0.25), Q=np.eye(4))
    assert linear_predictor([1, 0, 0, 0, 0, 0], 1, p) == pytest.approx(5.773)
    assert np.allclose(ldo_class_probs(7, [4.41], -0.63, 2), [0.5, 0.5])
    assert ldo_class_probs(12, [4.41], -0.63, 2)[0] == pytest.approx(1 / (1 + np.exp(3.15)), rel=1e-12)


@given(st.floats(-20, 20), st.floats(0.01, 0.99))
def test_check_loss_identity(u, tau):
    # reflecting u and tau together leaves the loss unchanged; the two tilts add to |u|
    assert check_loss(u, tau) == pytest.approx(check_loss(-u, 1 - tau), abs=1e-12)
    assert check_loss(u, tau) + check_loss(-u, tau) == pytest.approx(abs(u), abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=3), st.floats(-2, -0.01), st.integers(1, 11))
def test_longer_stayers_move_to_higher_classes(cuts, slope, T):
    lam = np.sort(cuts)
    early = np.cumsum(ldo_class_probs(T, lam, slope))[:-1]
    late = np.cumsum(ldo_class_probs(T + 1, lam, slope))[:-1]
    assert np.all(late <= early + 1e-15)


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_predictor_is_affine(x1, x2):
    p = QldoParams(beta=[0.3, -1.0, 2.0], alpha=[0.0, 1.0], sigma=1.0, delta=[0.5, 0.5], Q=np.eye(2))
    s = np.add(x1, x2)
    val = linear_predictor(s, 2, p) - linear_predictor(x1, 2, p) - linear_predictor(x2, 2, p) + linear_predictor(np.zeros(3), 2, p)
    assert abs(val) < 1e-12

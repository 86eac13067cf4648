import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from petel.bench import gen_sigmoid_cauchy, gen_svm
from petel.loss import (
    Dataset,
    check_loss,
    cubic_regression,
    empirical_risk,
    hinge_svm,
    huber_sigmoid,
    smoothed_hinge_svm,
    squared_loss,
)
from petel.optim import minimize_risk, quantile_regression, subgradient_descent


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(-1000, 1000), min_size=1, max_size=25),
    st.floats(0.05, 0.95),
)
def test_quantile_scan_is_lowest_minimizer(y, tau):
    y = np.array(y) / 100.0
    data = Dataset(np.ones((len(y), 1)), response=y)
    t = quantile_regression(data, tau)[0]
    m = check_loss(tau)
    cand = np.unique(y)
    risks = np.array([empirical_risk(m, data, [c]) for c in cand])
    best = risks.min()
    assert empirical_risk(m, data, [t]) <= best + 1e-12
    assert t == cand[np.flatnonzero(risks <= best + 1e-12)[0]]


def test_quantile_lp_matches_generic_minimizer(rng):
    x = np.column_stack([np.ones(80), rng.standard_normal(80)])
    y = x @ [1.0, -2.0] + rng.standard_t(3, 80)
    data = Dataset(x, response=y)
    m = check_loss(0.3)
    th = quantile_regression(data, 0.3)
    ref = scipy.optimize.minimize(lambda t: empirical_risk(m, data, t), th + 0.3, method="Nelder-Mead",
                                  options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    assert empirical_risk(m, data, th) <= ref.fun + 1e-10


def test_smooth_erm_zero_gradient():
    data = gen_svm(400, 2)
    for model in (smoothed_hinge_svm(), huber_sigmoid()):
        d = data if model.name != "huber_sigmoid" else gen_sigmoid_cauchy(400, 2)
        r = minimize_risk(model, d)
        assert r.converged
        assert np.linalg.norm(model.moment(d, r.theta).mean(axis=0)) < 1e-6


def test_hinge_continuation_beats_neighbours(rng):
    data = gen_svm(300, 3)
    m = hinge_svm()
    r = minimize_risk(m, data)
    for _ in range(50):
        assert r.risk <= empirical_risk(m, data, r.theta + 1e-3 * rng.standard_normal(2)) + 1e-9


def test_cubic_grid_finds_global_minimum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(500)
    y = 0.1 * x**3 - 0.2 * x**2 - 0.2 * x + rng.standard_normal(500)
    data = Dataset(x[:, None], response=y)
    m = cubic_regression()
    r = minimize_risk(m, data)
    grid = np.linspace(-5, 5, 20001)
    assert r.risk <= m.loss(data, grid[:, None]).mean(axis=1).min() + 1e-9


def test_subgradient_descent_matches_exact(rng):
    y = 3.0 + rng.standard_normal(200)
    data = Dataset(np.ones((200, 1)), response=y)
    th, ok = subgradient_descent(squared_loss(), data, [[0.0], [10.0]])
    np.testing.assert_allclose(th[:, 0], y.mean(), atol=1e-8)
    assert ok.all()
    med, _ = subgradient_descent(check_loss(0.5), data, [[0.0]], step=1.0, iters=4000)
    assert abs(med[0, 0] - np.median(y)) < 0.05


def test_subgradient_descent_weights_and_box(rng):
    y = rng.standard_normal(50)
    data = Dataset(np.ones((50, 1)), response=y)
    w = np.zeros((1, 50))
    w[0, :10] = 1.0
    th, _ = subgradient_descent(squared_loss(), data, [[0.0]], w)
    assert th[0, 0] == pytest.approx(y[:10].mean(), abs=1e-8)
    boxed, _ = subgradient_descent(squared_loss(), data, [[0.0]], box=(-0.01, 0.01))
    assert abs(boxed[0, 0]) <= 0.01


def test_subgradient_divergence_is_flagged():
    data = Dataset(np.array([[3.0], [-2.0], [1.0]]), response=[1.0, 0.0, 2.0])
    with np.errstate(all="raise"):
        th, ok = subgradient_descent(cubic_regression(), data, [[50.0], [1.0]], iters=50)
    assert not ok[0]

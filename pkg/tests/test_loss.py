import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petel.exceptions import DataError, DimensionError, NonFiniteLoss
from petel.loss import (
    LOSSES,
    Dataset,
    check_loss,
    cubic_regression,
    empirical_risk,
    hinge_svm,
    huber_sigmoid,
    make_loss,
    moment_matrix,
    smoothed_hinge_svm,
    squared_loss,
)

finite = st.floats(-5, 5, allow_nan=False)


# Dataset ------------------------------------------------------------------


def test_dataset_reshapes_vector_to_column():
    d = Dataset([0.0, 2.0])
    assert d.features.shape == (2, 1)
    assert d.n == 2 and d.p == 1


def test_dataset_is_read_only():
    d = Dataset(np.ones((3, 2)), response=np.zeros(3))
    with pytest.raises(ValueError):
        d.features[0, 0] = 5.0
    with pytest.raises(ValueError):
        d.response[0] = 5.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"features": np.empty((0, 2))},
        {"features": [[np.nan]]},
        {"features": [[1.0], [2.0]], "response": [1.0]},
        {"features": [[1.0]], "labels": [0.5]},
        {"features": [[1.0]], "response": [1.0], "labels": [1.0]},
        {"features": [[1.0]], "response": [np.inf]},
    ],
)
def test_dataset_rejects_invalid(kwargs):
    with pytest.raises(DataError):
        Dataset(**kwargs)


def test_dataset_take_and_select():
    d = Dataset(np.arange(6.0).reshape(3, 2), response=[1.0, 2.0, 3.0])
    t = d.take([2, 2, 0])
    np.testing.assert_array_equal(t.response, [3.0, 3.0, 1.0])
    s = d.select([1])
    np.testing.assert_array_equal(s.features[:, 0], [1.0, 3.0, 5.0])
    with pytest.raises(DataError):
        d.select([])


def test_csv_round_trip_is_exact(tmp_path, rng):
    d = Dataset(rng.standard_normal((7, 3)), labels=np.where(rng.random(7) < 0.5, -1.0, 1.0))
    p = tmp_path / "d.csv"
    d.to_csv(p, comment="# hello")
    back = Dataset.from_csv(p)
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.labels, d.labels)
    assert back.response is None
    first = p.read_text().splitlines()[0]
    assert first == "# hello"


def test_csv_response_column(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("x_1,x_2,y\n1,2,3\n4,5,6\n")
    d = Dataset.from_csv(p)
    np.testing.assert_array_equal(d.features, [[1, 2], [4, 5]])
    np.testing.assert_array_equal(d.response, [3, 6])


@pytest.mark.parametrize(
    "text",
    ["", "a,b\n1,2\n", "x_1,y\n1\n", "x_1,y\n1,abc\n", "x_1\n"],
)
def test_csv_errors(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        Dataset.from_csv(p)


def test_csv_missing_file(tmp_path):
    with pytest.raises(DataError):
        Dataset.from_csv(tmp_path / "nope.csv")


# empirical risk and moments: worked examples ---------------------------------


def test_squared_risk_two_point():
    # half squared error: mean of (1/2, 1/2)
    assert empirical_risk(squared_loss(), Dataset([0.0, 2.0]), [1.0]) == 0.5


def test_squared_total_loss_two_point():
    d = Dataset([0.0, 2.0])
    assert float(np.sum(squared_loss().loss(d, np.array([1.0])))) == 1.0


def test_check_risk_zero_residual():
    d = Dataset([[1.0]], response=[1.0])
    assert empirical_risk(check_loss(0.5), d, [1.0]) == 0.0


def test_hinge_risk_regularizer_only():
    d = Dataset([[2.0, 0.0]], labels=[1.0])
    assert empirical_risk(hinge_svm(0.1), d, [1.0, 0.0]) == pytest.approx(0.05, abs=1e-15)


def test_squared_moment_rows():
    G = moment_matrix(squared_loss(), Dataset([0.0, 2.0]), [1.0])
    np.testing.assert_array_equal(G, [[1.0], [-1.0]])


def test_quantile_moment_row():
    G = moment_matrix(check_loss(0.5), Dataset([[1.0]], response=[0.0]), [1.0])
    np.testing.assert_array_equal(G, [[0.5]])


def test_svm_moment_with_margin_satisfied():
    G = moment_matrix(hinge_svm(0.1), Dataset([[2.0, 0.0]], labels=[1.0]), [1.0, 0.0])
    np.testing.assert_allclose(G, [[0.1, 0.0]], atol=1e-15)


def test_hinge_kink_takes_active_branch():
    # margin exactly 1
    d = Dataset([[1.0, 0.0]], labels=[1.0])
    G = moment_matrix(hinge_svm(0.1), d, [1.0, 0.0])
    np.testing.assert_allclose(G, [[0.1 - 1.0, 0.0]])


def test_check_tie_uses_strict_indicator():
    d = Dataset([[1.0]], response=[1.0])
    G = moment_matrix(check_loss(0.3), d, [1.0])
    np.testing.assert_allclose(G, [[-0.3]])


def test_huber_kink_takes_quadratic_branch():
    m = huber_sigmoid(2.0)
    x = np.array([[0.0, 0.0]])
    theta = np.array([1.0, 1.0, 2.0])
    # signal = 2 * S(0) = 1, residual r = y - 1 = 2 = delta
    d = Dataset(x, response=[3.0])
    g = m.moment(d, theta)[0]
    # quadratic branch: d/dtheta3 of r^2/2 = -r * S = -2 * 0.5
    assert g[2] == pytest.approx(-1.0)
    assert m.loss(d, theta)[0] == pytest.approx(2.0)


def test_smoothed_hinge_close_to_hinge_at_kink():
    eps = 0.3
    # u = 1 - y theta^T x = 0
    d = Dataset([[1.0, 0.0]], labels=[1.0])
    a = smoothed_hinge_svm(0.1, eps).loss(d, np.array([1.0, 0.0]))[0]
    b = hinge_svm(0.1).loss(d, np.array([1.0, 0.0]))[0]
    assert abs(a - b) <= eps / 2 + 1e-15
    assert a - b == pytest.approx(eps / 2)


def test_huber_zero_residual():
    m = huber_sigmoid()
    x = np.array([[0.3, -0.2]])
    theta = np.array([1.0, 2.0, 3.0])
    y = 3.0 / (1 + math.exp(-(0.3 - 0.4)))
    d = Dataset(x, response=[y])
    assert m.loss(d, theta)[0] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(m.moment(d, theta)[0], 0.0, atol=1e-15)


@given(st.floats(-20, 20, allow_nan=False))
def test_median_check_loss_is_half_absolute(r):
    d = Dataset([[1.0]], response=[r])
    assert check_loss(0.5).loss(d, np.array([0.0]))[0] == pytest.approx(abs(r) / 2, abs=1e-14)


# errors ----------------------------------------------------------------------


def test_dimension_mismatch():
    d = Dataset(np.ones((3, 2)), response=np.ones(3))
    with pytest.raises(DimensionError):
        empirical_risk(check_loss(), d, [1.0])
    with pytest.raises(DimensionError):
        moment_matrix(check_loss(), d, [1.0, 2.0, 3.0])


def test_non_finite_loss():
    d = Dataset([[1e200]], response=[0.0])
    with pytest.raises(NonFiniteLoss):
        empirical_risk(squared_loss(), d, [1e200])


def test_missing_target_column():
    with pytest.raises(DataError):
        empirical_risk(hinge_svm(), Dataset(np.ones((2, 2))), [0.0, 0.0])
    with pytest.raises(DataError):
        check_loss().validate(Dataset(np.ones((2, 1))))


@pytest.mark.parametrize(
    "ctor,kw",
    [(check_loss, {"tau": 0.0}), (check_loss, {"tau": 1.0}), (hinge_svm, {"lam": -1}),
     (smoothed_hinge_svm, {"lam": 0.1, "eps": 0.0}), (huber_sigmoid, {"delta": 0.0})],
)
def test_hyperparameters_must_be_positive(ctor, kw):
    with pytest.raises(ValueError):
        ctor(**kw)


def test_make_loss_registry():
    assert set(LOSSES) >= {"squared", "check", "hinge", "smoothed_hinge", "huber_sigmoid", "cubic_regression"}
    assert make_loss("check", tau=0.3).tau == 0.3
    with pytest.raises(ValueError):
        make_loss("nope")


# properties ------------------------------------------------------------------


def _random_problem(kind, rng, n=1):
    if kind == "squared":
        return squared_loss(), Dataset(rng.standard_normal((n, 2)), response=rng.standard_normal(n)), 2
    if kind == "smoothed_hinge":
        d = Dataset(rng.standard_normal((n, 2)), labels=np.where(rng.random(n) < 0.5, -1.0, 1.0))
        return smoothed_hinge_svm(0.1, 0.5), d, 2
    if kind == "huber":
        return huber_sigmoid(2.0), Dataset(rng.standard_normal((n, 2)), response=3 * rng.standard_normal(n)), 3
    if kind == "cubic":
        return cubic_regression(), Dataset(rng.standard_normal((n, 1)), response=rng.standard_normal(n)), 1
    raise ValueError(kind)


@pytest.mark.parametrize("kind", ["squared", "smoothed_hinge", "huber", "cubic"])
def test_moment_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    h = 1e-6
    checked = 0
    while checked < 100:
        model, data, d = _random_problem(kind, rng)
        theta = rng.uniform(-2, 2, size=d)
        if kind == "huber":
            r = data.response[0] - theta[2] / (1 + np.exp(-(data.features[0] @ theta[:2])))
            if abs(abs(r) - 2.0) < 1e-3:
                continue
        g = model.moment(data, theta)[0]
        fd = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fd[j] = (model.loss(data, theta + e)[0] - model.loss(data, theta - e)[0]) / (2 * h)
        assert np.max(np.abs(g - fd)) <= 1e-5
        checked += 1


@pytest.mark.parametrize("kind", ["hinge", "check"])
def test_subgradient_inequality_by_directional_probes(kind):
    rng = np.random.default_rng(3)
    for _ in range(100):
        if kind == "hinge":
            model = hinge_svm(0.1)
            data = Dataset(rng.standard_normal((1, 2)), labels=[rng.choice([-1.0, 1.0])])
        else:
            model = check_loss(rng.uniform(0.1, 0.9))
            data = Dataset(rng.standard_normal((1, 2)), response=[rng.standard_normal()])
        theta = rng.standard_normal(2)
        if rng.random() < 0.5:
            # place theta exactly on the kink along the first coordinate
            x, t = data.features[0], data.target[0]
            if kind == "hinge":
                theta[0] = (1.0 / t - x[1] * theta[1]) / x[0]
            else:
                theta[0] = (t - x[1] * theta[1]) / x[0]
        g = model.moment(data, theta)[0]
        l0 = model.loss(data, theta)[0]
        for _ in range(8):
            u = rng.standard_normal(2)
            u /= np.linalg.norm(u)
            for s in (1e-2, 1e-4, 1e-6):
                lt = model.loss(data, theta + s * u)[0]
                # convexity: l(theta') >= l(theta) + g^T (theta' - theta), up to O(s^2) from the ridge
                assert lt >= l0 + s * g @ u - 1e-12 - 0.1 * s * s


def test_nonsmooth_moment_mean_is_risk_gradient():
    # E[g] = grad R checked against FD of a large-sample risk
    rng = np.random.default_rng(11)
    n = 200_000
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = x @ [0.5, 1.0] + rng.standard_normal(n)
    data = Dataset(x, response=y)
    m = check_loss(0.3)
    theta = np.array([0.2, 0.8])
    g = m.moment(data, theta).mean(axis=0)
    h = 1e-2
    fd = [(empirical_risk(m, data, theta + h * e) - empirical_risk(m, data, theta - h * e)) / (2 * h)
          for e in np.eye(2)]
    np.testing.assert_allclose(g, fd, atol=5e-3)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=40), finite)
def test_empirical_risk_is_order_independent_mean(values, theta):
    data = Dataset(np.array(values))
    m = squared_loss()
    r = empirical_risk(m, data, [theta])
    rev = empirical_risk(m, Dataset(np.array(values[::-1])), [theta])
    direct = np.mean(0.5 * (np.array(values) - theta) ** 2)
    assert abs(r - rev) <= 1e-12 * max(1.0, abs(r))
    assert r == pytest.approx(direct, rel=1e-12, abs=1e-14)


def test_batched_evaluation_matches_single(rng):
    model, data, d = _random_problem("huber", rng, n=9)
    thetas = rng.standard_normal((4, d))
    batched_l = model.loss(data, thetas)
    batched_g = model.moment(data, thetas)
    for b in range(4):
        np.testing.assert_allclose(batched_l[b], model.loss(data, thetas[b]))
        np.testing.assert_allclose(batched_g[b], model.moment(data, thetas[b]))


@pytest.mark.parametrize("kind", ["squared", "smoothed_hinge"])
def test_analytic_hessian_matches_finite_differences(kind, rng):
    model, data, d = _random_problem(kind, rng, n=50)
    theta = rng.standard_normal(d)
    H = model.hessian(data, theta)
    h = 1e-5
    fd = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fd[:, j] = (model.moment(data, theta + e).mean(0) - model.moment(data, theta - e).mean(0)) / (2 * h)
    np.testing.assert_allclose(H, fd, atol=1e-6)

import itertools
import math

import numpy as np
import pytest
from scipy import stats

from petel.bench import gen_hd_quantile
from petel.loss import Dataset, check_loss, squared_loss
from petel.posterior import PosteriorSpec, default_alpha, log_density
from petel.sampler import ProposalConfig, run_chain, scale_proposal_default
from petel.sparse import (
    SparsePrior,
    SparseState,
    build_proposal,
    constrained_erm,
    default_sparse_prior,
    hamming_ball,
    log_binom,
    log_model_score,
    run_sparse_chain,
    sandwich,
    sparse_log_target,
    stepwise_search,
)


@pytest.fixture(scope="module")
def hd():
    n, d = 500, 20
    data = gen_hd_quantile(n, d, seed=3)
    return check_loss(0.5), data, default_sparse_prior(n, d), default_alpha(n)


# prior -----------------------------------------------------------------------------


def test_size_prior_normalized():
    p = SparsePrior(s0=5, beta_nd=0.7, d=10)
    q = np.exp([p.log_q(s) for s in range(6)])
    assert q[0] == 0.0 and q.sum() == pytest.approx(1.0, abs=1e-12)
    assert q[2] / q[1] == pytest.approx(math.exp(-0.7))
    pe = SparsePrior(s0=5, beta_nd=0.7, d=10, include_empty=True)
    assert sum(math.exp(pe.log_q(s)) for s in range(6)) == pytest.approx(1.0, abs=1e-12)
    assert p.log_q(6) == -math.inf


def test_sparse_prior_validation():
    with pytest.raises(ValueError):
        SparsePrior(s0=0, beta_nd=1.0, d=3)
    with pytest.raises(ValueError):
        SparsePrior(s0=4, beta_nd=1.0, d=3)
    with pytest.raises(ValueError):
        SparsePrior(s0=2, beta_nd=0.0, d=3)


def test_default_sparse_prior():
    p = default_sparse_prior(500, 1000)
    assert p.beta_nd == pytest.approx(1.2 * math.log(1000)) and p.s0 == 20
    assert default_sparse_prior(100, 5).s0 == 5


def test_sparse_state_validation():
    with pytest.raises(ValueError):
        SparseState((2, 1), [1.0, 2.0])
    with pytest.raises(ValueError):
        SparseState((1,), [1.0, 2.0])
    np.testing.assert_array_equal(SparseState((0, 3), [1.0, 2.0]).full(5), [1, 0, 0, 2, 0])


# ERM and scores -------------------------------------------------------------------------


def test_constrained_least_squares_slope(rng):
    x = rng.standard_normal((100, 3))
    y = 2.0 * x[:, 1] + rng.standard_normal(100)
    data = Dataset(x, response=y)
    th = constrained_erm(squared_loss(), data, (1,)).theta
    slope = x[:, 1] @ y / (x[:, 1] @ x[:, 1])
    assert th[0] == pytest.approx(slope, abs=1e-12)


def test_intercept_only_median_takes_lower():
    y = np.array([5.0, 1.0, 3.0, 2.0])
    data = Dataset(np.ones((4, 1)), response=y)
    assert constrained_erm(check_loss(0.5), data, (0,)).theta[0] == 2.0
    odd = Dataset(np.ones((5, 1)), response=[5.0, 1.0, 3.0, 2.0, 9.0])
    assert constrained_erm(check_loss(0.5), odd, (0,)).theta[0] == 3.0


def test_true_support_erm_close(hd):
    m, data, _, _ = hd
    th = constrained_erm(m, data, (0, 1)).theta
    assert np.linalg.norm(th - [2.0, 3.0]) <= 0.2


def test_log_binom():
    assert log_binom(1000, 2) == pytest.approx(math.log(499500), abs=1e-9)
    assert log_binom(1000, 2) == pytest.approx(13.1214, abs=1e-4)
    assert log_binom(7, 0) == 0.0


def test_scores(hd):
    m, data, prior, alpha = hd
    e = log_model_score(m, data, (), np.zeros(0), alpha, prior)
    assert e == log_model_score(m, data, (), np.zeros(0), alpha, prior)
    # equal risk: the smaller support wins
    th = constrained_erm(m, data, (0,)).theta
    small = log_model_score(m, data, (0,), th, alpha, prior)
    big = log_model_score(m, data, (0, 2), np.r_[th, 0.0], alpha, prior)
    assert small > big


def test_true_model_beats_hamming_neighbours(hd):
    m, data, prior, alpha = hd
    true = log_model_score(m, data, (0, 1), constrained_erm(m, data, (0, 1)).theta, alpha, prior)
    for S in hamming_ball((0, 1), prior.d, 1):
        if S == (0, 1):
            continue
        th = constrained_erm(m, data, S).theta
        assert log_model_score(m, data, S, th, alpha, prior) < true


# search -----------------------------------------------------------------------------------


def test_stepwise_recovers_true_support(hd):
    m, data, prior, alpha = hd
    assert stepwise_search(m, data, prior, alpha) == (0, 1)


def test_stepwise_desk_scale_d200():
    n, d = 500, 200
    data = gen_hd_quantile(n, d, seed=5)
    assert stepwise_search(check_loss(0.5), data, default_sparse_prior(n, d), default_alpha(n)) == (0, 1)


def test_stepwise_pure_noise_selects_empty(rng):
    n, d = 300, 10
    data = Dataset(rng.standard_normal((n, d)), response=rng.standard_normal(n))
    prior = SparsePrior(s0=d, beta_nd=20.0, d=d)
    assert stepwise_search(check_loss(0.5), data, prior, default_alpha(n)) == ()


@pytest.mark.parametrize("seed", range(5))
def test_stepwise_matches_brute_force_d2(seed):
    rng = np.random.default_rng(seed)
    n = 80
    x = rng.standard_normal((n, 2))
    y = x @ rng.choice([0.0, 0.3, 2.0], size=2) + rng.standard_normal(n)
    data = Dataset(x, response=y)
    prior = SparsePrior(s0=2, beta_nd=rng.uniform(0.5, 3.0), d=2)
    alpha = default_alpha(n)
    m = check_loss(0.5)
    best = max(
        (S for k in range(3) for S in itertools.combinations(range(2), k)),
        key=lambda S: log_model_score(m, data, S, constrained_erm(m, data, S).theta, alpha, prior),
    )
    assert stepwise_search(m, data, prior, alpha) == best


def test_stepwise_respects_s0(hd):
    m, data, _, alpha = hd
    prior = SparsePrior(s0=1, beta_nd=0.1, d=20)
    assert len(stepwise_search(m, data, prior, alpha)) <= 1


# proposal ------------------------------------------------------------------------------------


def test_hamming_ball_symmetric_difference():
    ball = hamming_ball((0, 1), 4, 1)
    assert set(ball) == {(0, 1), (0,), (1,), (0, 1, 2), (0, 1, 3)}
    assert hamming_ball((0, 1), 4, 0) == [(0, 1)]
    two = hamming_ball((0,), 3, 2)
    assert (1,) in two and (1, 2) not in two and (0, 1, 2) in two and () in two
    # s0 and the empty-model rule prune the ball
    assert () not in hamming_ball((0,), 3, 1, SparsePrior(1, 1.0, 3))


def test_proposal_normalized(hd):
    m, data, prior, alpha = hd
    comps, logp = build_proposal(m, data, prior, alpha, (0, 1), hamming_radius=1)
    assert abs(np.exp(logp).sum() - 1.0) <= 1e-12
    assert len(comps) == len(hamming_ball((0, 1), prior.d, 1, prior))


def test_smoothed_hessian_converges():
    # large n keeps the kernel noise at small eps below the bias differences
    data = gen_hd_quantile(20000, 2, seed=0)
    m = check_loss(0.5)
    th = constrained_erm(m, data, (0, 1)).theta
    Hs = [sandwich(m, data, th, eps)[0] for eps in (0.5, 0.1, 0.02)]
    d1 = np.linalg.norm(Hs[1] - Hs[0])
    d2 = np.linalg.norm(Hs[2] - Hs[1])
    assert d2 < d1


def test_sandwich_squared_loss_closed_form(rng):
    x = rng.standard_normal((400, 2))
    y = x @ [1.0, -1.0] + rng.standard_normal(400) * (1 + np.abs(x[:, 0]))
    data = Dataset(x, response=y)
    th = np.linalg.lstsq(x, y, rcond=None)[0]
    H, D, V = sandwich(squared_loss(), data, th)
    r = y - x @ th
    np.testing.assert_allclose(H, x.T @ x / 400, atol=1e-12)
    np.testing.assert_allclose(D, (x * r[:, None] ** 2).T @ x / 400, atol=1e-12)
    Hi = np.linalg.inv(H)
    np.testing.assert_allclose(V, Hi @ D @ Hi, atol=1e-10)


# target ----------------------------------------------------------------------------------------


def test_fixed_support_ratio_equals_low_dim_petel(hd, rng):
    m, data, prior, alpha = hd
    S = (0, 1)
    sub = data.select(S)
    spec = PosteriorSpec(m, sub, prior.prior_for(S), mode="petel", alpha_n=alpha)
    th1 = constrained_erm(m, data, S).theta
    th2 = th1 + 0.01 * rng.standard_normal(2)
    a = sparse_log_target(m, data, prior, alpha, SparseState(S, th1))
    b = sparse_log_target(m, data, prior, alpha, SparseState(S, th2))
    ref = log_density(spec, th1).value - log_density(spec, th2).value
    assert abs((a - b) - ref) <= 1e-12 * max(1.0, abs(a))


def test_target_off_size_prior_is_minus_inf(hd):
    m, data, _, alpha = hd
    prior = SparsePrior(s0=1, beta_nd=1.0, d=20)
    assert sparse_log_target(m, data, prior, alpha, SparseState((0, 1), [2.0, 3.0])) == -math.inf
    assert sparse_log_target(m, data, prior, alpha, SparseState((), [])) == -math.inf


def test_empty_support_target(hd):
    m, data, _, alpha = hd
    prior = SparsePrior(s0=2, beta_nd=1.0, d=20, include_empty=True)
    from petel.loss import empirical_risk

    v = sparse_log_target(m, data, prior, alpha, SparseState((), []))
    expect = prior.log_q(0) - data.n * math.log(data.n) - alpha * empirical_risk(m, data, np.zeros(20))
    assert v == pytest.approx(expect, abs=1e-9)


# chain --------------------------------------------------------------------------------------------


def test_sparse_chain_concentrates_on_truth(hd):
    m, data, prior, alpha = hd
    sel = stepwise_search(m, data, prior, alpha)
    ch = run_sparse_chain(m, data, prior, alpha, sel, iters=1500, seed=1)
    probs = ch.model_probabilities(burn_in=300)
    assert probs.get((0, 1), 0.0) >= 0.95
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-12)
    draws = ch.draws_for((0, 1), burn_in=300)
    assert draws.shape == (ch.visit_counts(300)[(0, 1)], 2)


def test_radius_zero_matches_restricted_chain(hd):
    m, data, prior, alpha = hd
    S = (0, 1)
    sub = data.select(S)
    spec = PosteriorSpec(m, sub, prior.prior_for(S), mode="petel", alpha_n=alpha)
    init = constrained_erm(m, data, S).theta
    pvals = []
    for seed in range(3):
        ch = run_sparse_chain(m, data, prior, alpha, S, hamming_radius=0, iters=3000, seed=seed)
        assert set(ch.visit_counts()) == {S}
        a = ch.draws_for(S, burn_in=500)[::5, 0]
        rw = run_chain(spec, init, ProposalConfig(scale_proposal_default(data.n)), 6000, seed=100 + seed)
        b = rw.retained[::10, 0]
        pvals.append(stats.ks_2samp(a, b).pvalue)
    assert min(pvals) > 0.01


def test_sparse_chain_reproducible_and_serializes(hd, tmp_path):
    m, data, prior, alpha = hd
    a = run_sparse_chain(m, data, prior, alpha, (0, 1), iters=200, seed=4)
    b = run_sparse_chain(m, data, prior, alpha, (0, 1), iters=200, seed=4)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "iter,accepted,log_target,support,theta"
    fields = lines[1].split(",")
    assert fields[3] == "1;2" and fields[4].startswith("1:")
    rep = a.report(burn_in=50)
    assert rep["selected_support"] == [1, 2]
    assert abs(sum(rep["model_probabilities"].values()) - 1.0) <= 1e-9
    a.to_json(tmp_path / "a.json", burn_in=50)


def test_true_model_draw_count_bookkeeping(hd):
    m, data, prior, alpha = hd
    ch = run_sparse_chain(m, data, prior, alpha, (0, 1), iters=400, seed=2)
    n_true = sum(1 for st in ch.states if st.support == (0, 1))
    assert ch.draws_for((0, 1)).shape[0] == n_true == ch.visit_counts()[(0, 1)]

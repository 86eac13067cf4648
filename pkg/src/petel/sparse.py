"""Model-averaged PETEL posterior over sparse supports.

A support ``S`` is a sorted tuple of 0-based feature indices. The target
on pairs ``(S, theta_S)`` is

    q(|S|) / C(d, |S|) * pi_S(theta_S) * ETEL_S(theta_S) * exp(-alpha R_n(theta_S, 0)),

with ``q(s)`` proportional to ``exp(-beta s)``. Sampling is an independence
Metropolis-Hastings chain whose proposal puts mass ``exp(score(S))`` on the
supports near a stepwise-search optimum and draws ``theta_S`` from a
Gaussian at the restricted ERM with sandwich covariance.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .etel import log_etel_at
from .exceptions import DualUnbounded, NonFiniteLoss, SingularHessian
from .loss import Dataset, LossModel, empirical_risk
from .optim import ErmResult, minimize_risk
from .posterior import Prior
from .rng import make_rng
from .sampler import mh_kernel


def log_binom(d: int, s: int) -> float:
    """``log C(d, s)`` via log-gamma."""
    return float(gammaln(d + 1) - gammaln(s + 1) - gammaln(d - s + 1))


@dataclass(frozen=True, eq=False)
class SparsePrior:
    """Prior over supports and within-model parameters.

    Parameters
    ----------
    s0 : int
        Largest support size.
    beta_nd : float
        Model-size rate in ``q(s) ~ exp(-beta_nd * s)``.
    d : int
        Number of candidate features.
    include_empty : bool
        Whether ``q`` gives mass to the empty support.
    per_model_prior : callable, optional
        ``S -> Prior`` on ``theta_S``; standard Gaussian by default.
    """

    s0: int
    beta_nd: float
    d: int
    include_empty: bool = False
    per_model_prior: object = None
    _log_q: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if not 1 <= self.s0 <= self.d:
            raise ValueError("need 1 <= s0 <= d")
        if not self.beta_nd > 0:
            raise ValueError("beta_nd must be positive")
        sizes = np.arange(0 if self.include_empty else 1, self.s0 + 1)
        w = -self.beta_nd * sizes
        logq = np.full(self.s0 + 1, -math.inf)
        logq[sizes] = w - logsumexp(w)
        object.__setattr__(self, "_log_q", logq)

    def log_q(self, s: int) -> float:
        if s < 0 or s > self.s0:
            return -math.inf
        return float(self._log_q[s])

    def prior_for(self, support) -> Prior:
        if self.per_model_prior is not None:
            return self.per_model_prior(tuple(support))
        return Prior.standard_gaussian(len(support))

    def allows(self, support) -> bool:
        return self.log_q(len(support)) > -math.inf


def default_sparse_prior(n: int, d: int, s0: int | None = None, beta: float | None = None, **kw) -> SparsePrior:
    """Sparse prior with ``beta = 1.2 log d`` and ``s0 = min(d, 20)`` unless given."""
    return SparsePrior(
        s0=min(d, 20) if s0 is None else s0,
        beta_nd=1.2 * math.log(d) if beta is None else beta,
        d=d,
        **kw,
    )


@dataclass(frozen=True)
class SparseState:
    """A point ``(S, theta_S)``; ``support`` holds sorted 0-based indices."""

    support: tuple
    theta: np.ndarray

    def __post_init__(self):
        s = tuple(int(i) for i in self.support)
        if any(b <= a for a, b in zip(s, s[1:])) or (s and s[0] < 0):
            raise ValueError("support indices must be strictly increasing and non-negative")
        th = np.asarray(self.theta, dtype=float).reshape(-1)
        if th.size != len(s):
            raise ValueError("theta must have one entry per support index")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "theta", th)

    def full(self, d: int) -> np.ndarray:
        out = np.zeros(d)
        out[list(self.support)] = self.theta
        return out


def _restricted(data: Dataset, support) -> Dataset:
    return data.select(support)


def constrained_erm(model: LossModel, data: Dataset, support, tol: float = 1e-10, cache=None) -> ErmResult:
    """Minimize ``R_n(theta_S, 0)`` over coefficients on ``support``.

    The restricted problem is the model applied to the selected feature
    columns. The empty support returns an empty vector and the risk at zero.
    """
    key = tuple(sorted(int(i) for i in support))
    if cache is not None and key in cache:
        return cache[key]
    if not key:
        zero = np.zeros(data.p)
        res = ErmResult(np.zeros(0), empirical_risk(model, data, zero), True, 0, "empty")
    else:
        res = minimize_risk(model, _restricted(data, key), tol=tol)
    if cache is not None:
        cache[key] = res
    return res


def log_model_score(model, data, support, theta_S, alpha: float, sparse_prior: SparsePrior) -> float:
    """``-alpha R_n(theta_S, 0) - beta |S| - log C(d, |S|)``."""
    s = len(support)
    if s:
        risk = empirical_risk(model, _restricted(data, support), theta_S)
    else:
        risk = empirical_risk(model, data, np.zeros(data.p))
    return -alpha * risk - sparse_prior.beta_nd * s - log_binom(sparse_prior.d, s)


class _Scorer:
    def __init__(self, model, data, alpha, prior, cache=None):
        self.model, self.data, self.alpha, self.prior = model, data, alpha, prior
        self.cache = {} if cache is None else cache
        self.scores = {}

    def __call__(self, support):
        key = tuple(sorted(support))
        if key not in self.scores:
            if len(key) > self.prior.s0:
                self.scores[key] = -math.inf
            else:
                erm = constrained_erm(self.model, self.data, key, cache=self.cache)
                s = len(key)
                self.scores[key] = -self.alpha * erm.risk - self.prior.beta_nd * s - log_binom(self.prior.d, s)
        return self.scores[key]


def stepwise_search(model, data, sparse_prior: SparsePrior, alpha: float, start=(), cache=None, max_steps: int = 1000):
    """Greedy forward-backward search maximizing :func:`log_model_score`.

    Each round tries the best single addition, then the best single drop,
    then the best swap, and takes the first that strictly improves the
    score; it stops when none does.

    Returns
    -------
    tuple
        The selected support (0-based, sorted).
    """
    d = sparse_prior.d
    score = _Scorer(model, data, alpha, sparse_prior, cache)
    cur = tuple(sorted(start))
    cur_score = score(cur)
    for _ in range(max_steps):
        inside = set(cur)
        outside = [j for j in range(d) if j not in inside]
        moved = False
        for moves in (
            [tuple(sorted(cur + (j,))) for j in outside],
            [tuple(i for i in cur if i != k) for k in cur],
            [tuple(sorted([i for i in cur if i != k] + [j])) for k in cur for j in outside],
        ):
            if not moves:
                continue
            vals = [score(m) for m in moves]
            b = int(np.argmax(vals))
            if vals[b] > cur_score:
                cur, cur_score = moves[b], vals[b]
                moved = True
                break
        if not moved:
            return cur
    return cur


def hamming_ball(center, d: int, radius: int, sparse_prior: SparsePrior | None = None):
    """Supports whose symmetric difference with ``center`` has size ``<= radius``."""
    center = tuple(sorted(center))
    inside = list(center)
    outside = [j for j in range(d) if j not in set(center)]
    ball = []
    for r_drop in range(min(radius, len(inside)) + 1):
        for r_add in range(min(radius - r_drop, len(outside)) + 1):
            for drop in itertools.combinations(inside, r_drop):
                kept = [i for i in inside if i not in drop]
                for add in itertools.combinations(outside, r_add):
                    S = tuple(sorted(kept + list(add)))
                    if sparse_prior is None or sparse_prior.allows(S):
                        ball.append(S)
    return sorted(set(ball), key=lambda s: (len(s), s))


def sandwich(model: LossModel, data: Dataset, theta, eps: float | None = None):
    """Sandwich pieces ``(H, Delta, H^-1 Delta H^-1)`` at ``theta``.

    ``H`` is the mean Hessian, taken from the smoothed surrogate with
    smoothing ``eps`` (default ``n^(-1/4)``) for non-smooth losses, and
    ``Delta`` the mean outer product of the moments.
    """
    theta = np.asarray(theta, dtype=float)
    if model.smooth:
        H = model.hessian(data, theta)
    else:
        eps = data.n ** -0.25 if eps is None else eps
        H = model.smoothed(eps).hessian(data, theta)
    G = model.moment(data, theta)
    Delta = G.T @ G / data.n
    Hinv = np.linalg.pinv(H)
    V = Hinv @ Delta @ Hinv
    return H, Delta, 0.5 * (V + V.T)


def _floored_cov(V, n):
    w, U = np.linalg.eigh(V / n)
    w = np.maximum(w, 1e-8 / n)
    return (U * w) @ U.T, U * np.sqrt(w), float(np.sum(np.log(w)))


@dataclass(frozen=True, eq=False)
class _ModelProposal:
    support: tuple
    log_weight: float
    mean: np.ndarray
    root: np.ndarray
    logdet: float

    def sample(self, rng):
        return self.mean + self.root @ rng.standard_normal(self.mean.size)

    def log_pdf(self, theta):
        k = self.mean.size
        if k == 0:
            return 0.0
        z = np.linalg.solve(self.root, theta - self.mean)
        return -0.5 * (k * math.log(2 * math.pi) + self.logdet + float(z @ z))


@dataclass(frozen=True, eq=False)
class SparseChain:
    """Draws of the independence sampler.

    ``states[t]`` is the state after transition ``t``.
    """

    states: list
    log_targets: np.ndarray
    accepted: np.ndarray
    proposal_supports: list
    proposal_probs: np.ndarray
    seed: int
    d: int
    selected: tuple = ()
    meta: dict | None = None

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self.accepted) else 0.0

    def visit_counts(self, burn_in: int = 0) -> dict:
        counts = {}
        for st in self.states[burn_in:]:
            counts[st.support] = counts.get(st.support, 0) + 1
        return counts

    def model_probabilities(self, burn_in: int = 0) -> dict:
        counts = self.visit_counts(burn_in)
        total = sum(counts.values())
        return {s: c / total for s, c in counts.items()}

    def draws_for(self, support, burn_in: int = 0) -> np.ndarray:
        """The ``theta_S`` draws whose support equals ``support``, in order."""
        support = tuple(sorted(support))
        rows = [st.theta for st in self.states[burn_in:] if st.support == support]
        return np.array(rows).reshape(len(rows), len(support))

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(comment + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "accepted", "log_target", "support", "theta"])
            for t, st in enumerate(self.states):
                w.writerow([
                    t,
                    int(self.accepted[t]),
                    repr(float(self.log_targets[t])),
                    ";".join(str(i + 1) for i in st.support),
                    ";".join(f"{i + 1}:{float(v)!r}" for i, v in zip(st.support, st.theta)),
                ])

    def report(self, burn_in: int = 0) -> dict:
        """Summary with 1-based supports, visit counts and model probabilities."""
        probs = self.model_probabilities(burn_in)
        counts = self.visit_counts(burn_in)
        key = lambda s: ";".join(str(i + 1) for i in s)  # noqa: E731
        order = sorted(probs, key=lambda s: (-counts[s], s))
        out = {
            "d": self.d,
            "selected_support": [i + 1 for i in self.selected],
            "iters": len(self.states),
            "burn_in": burn_in,
            "seed": int(self.seed),
            "acceptance_rate": self.acceptance_rate,
            "visit_counts": {key(s): counts[s] for s in order},
            "model_probabilities": {key(s): probs[s] for s in order},
            "proposal": {key(s): float(p) for s, p in zip(self.proposal_supports, self.proposal_probs)},
        }
        if self.meta:
            out.update(self.meta)
        return out

    def to_json(self, path, burn_in: int = 0) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.report(burn_in), fh, indent=1, sort_keys=True)
            fh.write("\n")


def sparse_log_target(model, data, sparse_prior: SparsePrior, alpha: float, state: SparseState, tol=1e-8):
    """Log of the model-averaged PETEL target at ``state`` (``-inf`` on failure)."""
    S = state.support
    lq = sparse_prior.log_q(len(S))
    if lq == -math.inf:
        return -math.inf
    lp = sparse_prior.prior_for(S).log_density(state.theta) if S else 0.0
    if lp == -math.inf:
        return -math.inf
    if not S:
        # no free coefficients means no moment constraints: uniform weights
        risk = empirical_risk(model, data, np.zeros(data.p))
        return lq - data.n * math.log(data.n) - alpha * risk
    sub = _restricted(data, S)
    try:
        risk = empirical_risk(model, sub, state.theta)
        sol = log_etel_at(model, sub, state.theta, tol=tol)
    except (DualUnbounded, SingularHessian, NonFiniteLoss):
        return -math.inf
    if not sol.converged:
        return -math.inf
    return lq - log_binom(sparse_prior.d, len(S)) + lp + sol.log_etel - alpha * risk


def build_proposal(model, data, sparse_prior, alpha, center, hamming_radius=1, eps=None, cache=None):
    """Independence proposal over the Hamming ball around ``center``."""
    ball = hamming_ball(center, sparse_prior.d, hamming_radius, sparse_prior)
    if not ball:
        raise ValueError("no admissible support within the Hamming ball")
    cache = {} if cache is None else cache
    comps = []
    for S in ball:
        erm = constrained_erm(model, data, S, cache=cache)
        s = len(S)
        score = -alpha * erm.risk - sparse_prior.beta_nd * s - log_binom(sparse_prior.d, s)
        if s:
            _, _, V = sandwich(model, _restricted(data, S), erm.theta, eps)
            _, root, logdet = _floored_cov(V, data.n)
        else:
            root, logdet = np.zeros((0, 0)), 0.0
        comps.append(_ModelProposal(S, score, erm.theta, root, logdet))
    logw = np.array([c.log_weight for c in comps])
    logp = logw - logsumexp(logw)
    return comps, logp


def run_sparse_chain(
    model: LossModel,
    data: Dataset,
    sparse_prior: SparsePrior,
    alpha: float,
    selected,
    hamming_radius: int = 1,
    iters: int = 3000,
    seed: int = 0,
    eps: float | None = None,
    cache=None,
) -> SparseChain:
    """Independence Metropolis-Hastings over ``(S, theta_S)``.

    Supports are proposed with probability proportional to
    ``exp(log_model_score)`` within ``hamming_radius`` of ``selected``;
    coefficients from ``N(theta_hat_S, V_S / n)`` with ``V_S`` the sandwich
    estimate (eigenvalues floored at ``1e-8 / n``). The Hastings ratio includes
    both proposal factors.
    """
    selected = tuple(sorted(selected))
    comps, logp = build_proposal(model, data, sparse_prior, alpha, selected, hamming_radius, eps, cache)
    index = {c.support: k for k, c in enumerate(comps)}
    probs = np.exp(logp)
    cdf = np.cumsum(probs)

    def log_q(state):
        k = index.get(state.support)
        if k is None:
            return -math.inf
        return logp[k] + comps[k].log_pdf(state.theta)

    def propose(state, rng):
        k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(comps) - 1)
        c = comps[k]
        new = SparseState(c.support, c.sample(rng))
        return new, log_q(new), log_q(state)

    def target(state):
        return sparse_log_target(model, data, sparse_prior, alpha, state)

    start = selected if selected in index else comps[int(np.argmax(logp))].support
    k0 = index[start]
    state = SparseState(start, comps[k0].mean)
    cur = target(state)
    rng = make_rng(seed)
    if not np.isfinite(cur):
        # start from a proposal draw with finite target
        for _ in range(1000):
            state, _, _ = propose(state, rng)
            cur = target(state)
            if np.isfinite(cur):
                break
        else:
            raise RuntimeError("no sparse state with finite target found")
    states, logts, acc = [], np.empty(iters), np.zeros(iters, dtype=bool)
    for t in range(iters):
        state, cur, a = mh_kernel(state, cur, propose, target, rng)
        states.append(state)
        logts[t] = cur
        acc[t] = a
    return SparseChain(
        states=states,
        log_targets=logts,
        accepted=acc,
        proposal_supports=[c.support for c in comps],
        proposal_probs=probs,
        seed=int(seed),
        d=sparse_prior.d,
        selected=selected,
    )

"""Metropolis-Hastings sampling.

:func:`run_chain` is a random-walk sampler for a :class:`PosteriorSpec`.
The ETEL multiplier of the current state seeds the dual solve at each
proposal, and the proposal scale is tuned by Robbins-Monro toward a
target acceptance rate during an initial window, then frozen.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InitOffSupport, NonFiniteDensityAtInit
from .posterior import PosteriorSpec, log_density
from .rng import make_rng


@dataclass(frozen=True)
class ProposalConfig:
    """Random-walk proposal ``N(theta, sigma^2 * covariance)``.

    Parameters
    ----------
    base_sd : float
        Initial scale ``sigma``.
    covariance : ndarray, optional
        Proposal shape matrix (SPD); identity when omitted.
    target_accept : float
        Acceptance rate targeted during adaptation.
    adapt_window : int
        Maximum number of adaptation steps. The effective window is
        ``min(adapt_window, iters // 3)``; those draws are burn-in.
    global_prob : float
        Probability of replacing the random-walk move by an independence
        proposal drawn from the prior (which must be proper). Each kernel
        leaves the target invariant, so the mixture does too; it lets a
        chain jump between well-separated modes. Zero disables it.
    """

    base_sd: float
    covariance: np.ndarray | None = None
    target_accept: float = 0.234
    adapt_window: int = 1000
    global_prob: float = 0.0

    def __post_init__(self):
        if not self.base_sd > 0:
            raise ValueError("base_sd must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.adapt_window < 0:
            raise ValueError("adapt_window must be non-negative")
        if not 0.0 <= self.global_prob < 1.0:
            raise ValueError("global_prob must lie in [0, 1)")
        if self.covariance is not None:
            c = np.asarray(self.covariance, dtype=float)
            np.linalg.cholesky(c)
            object.__setattr__(self, "covariance", c)


@dataclass(frozen=True, eq=False)
class Chain:
    """Draws from one Markov chain.

    ``draws[t]`` is the state after transition ``t`` and ``accepted[t]``
    records whether that transition moved. The first ``burn_in`` draws
    belong to the adaptation phase.
    """

    draws: np.ndarray
    log_densities: np.ndarray
    accepted: np.ndarray
    proposal_sd: float
    seed: int
    burn_in: int = 0
    meta: dict | None = None

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self.accepted) else 0.0

    @property
    def post_burn_in_acceptance(self) -> float:
        a = self.accepted[self.burn_in:]
        return float(np.mean(a)) if len(a) else 0.0

    @property
    def retained(self) -> np.ndarray:
        return self.draws[self.burn_in:]

    def metadata(self) -> dict:
        out = {
            "seed": int(self.seed),
            "proposal_sd": float(self.proposal_sd),
            "acceptance_rate": self.acceptance_rate,
            "post_burn_in_acceptance": self.post_burn_in_acceptance,
            "burn_in": int(self.burn_in),
            "iters": int(len(self.accepted)),
            "dim": int(self.draws.shape[1]),
        }
        if self.meta:
            out.update(self.meta)
        return out

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata(),
            "draws": self.draws.tolist(),
            "log_densities": self.log_densities.tolist(),
            "accepted": [bool(a) for a in self.accepted],
        }

    @classmethod
    def from_dict(cls, obj) -> "Chain":
        m = dict(obj["metadata"])
        known = {"seed", "proposal_sd", "acceptance_rate", "post_burn_in_acceptance", "burn_in", "iters", "dim"}
        extra = {k: v for k, v in m.items() if k not in known}
        draws = np.asarray(obj["draws"], dtype=float)
        if draws.ndim == 1:
            draws = draws[:, None]
        return cls(
            draws=draws,
            log_densities=np.asarray(obj["log_densities"], dtype=float),
            accepted=np.asarray(obj["accepted"], dtype=bool),
            proposal_sd=float(m["proposal_sd"]),
            seed=int(m["seed"]),
            burn_in=int(m.get("burn_in", 0)),
            meta=extra or None,
        )

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "Chain":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_csv(self, path, comment: str | None = None) -> None:
        d = self.draws.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(comment + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "accepted", "logd"] + [f"theta_{j + 1}" for j in range(d)])
            for t in range(len(self.accepted)):
                w.writerow(
                    [t, int(self.accepted[t]), repr(float(self.log_densities[t]))]
                    + [repr(float(v)) for v in self.draws[t]]
                )


def read_chain_csv(path) -> Chain:
    """Read a chain written by :meth:`Chain.to_csv` (metadata not included)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    header = rows[0]
    if header[:3] != ["iter", "accepted", "logd"]:
        raise ValueError(f"{path}: not a chain CSV")
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(header))
    return Chain(
        draws=body[:, 3:],
        log_densities=body[:, 2],
        accepted=body[:, 1].astype(bool),
        proposal_sd=math.nan,
        seed=-1,
    )


def mh_kernel(current_state, current_logd, propose, logd, rng):
    """One Metropolis-Hastings transition.

    Parameters
    ----------
    current_state : object
        Current state (any type understood by the callbacks).
    current_logd : float
        Target log-density at the current state.
    propose : callable
        ``propose(state, rng) -> (proposal, log_q_forward, log_q_backward)``
        where ``log_q_forward = log q(proposal | state)`` and
        ``log_q_backward = log q(state | proposal)``.
    logd : callable
        ``logd(proposal) -> float`` target log-density.
    rng : numpy.random.Generator

    Returns
    -------
    state, logd, accepted
    """
    proposal, lq_fwd, lq_bwd = propose(current_state, rng)
    new_logd = logd(proposal)
    u = rng.random()
    if new_logd == -math.inf or math.isnan(new_logd):
        return current_state, current_logd, False
    log_ratio = (new_logd - current_logd) + (lq_bwd - lq_fwd)
    if u < math.exp(min(0.0, log_ratio)):
        return proposal, new_logd, True
    return current_state, current_logd, False


def scale_proposal_default(n: int, c: float = 2.0) -> float:
    """Random-walk scale ``c / sqrt(n)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return float(c) / math.sqrt(n)


def adaptation_span(proposal: ProposalConfig, iters: int) -> int:
    return min(proposal.adapt_window, iters // 3)


def run_chain(
    spec: PosteriorSpec,
    init,
    proposal: ProposalConfig,
    iters: int,
    seed: int,
    *,
    debug_check_every: int = 0,
    on_evaluate=None,
) -> Chain:
    """Random-walk Metropolis chain targeting ``spec``.

    Parameters
    ----------
    spec : PosteriorSpec
    init : array_like, shape (d,)
        Starting state; must have finite log-density.
    proposal : ProposalConfig
    iters : int
        Number of transitions (and stored draws).
    seed : int
        Seed of the chain's random stream.
    debug_check_every : int
        When positive, every that many steps the current log-density is
        recomputed with a cold-started dual and compared (``1e-8``).
    on_evaluate : callable, optional
        ``on_evaluate(theta, value) -> value``, a hook that may transform
        each log-density (used to test invariances).

    Raises
    ------
    InitOffSupport, NonFiniteDensityAtInit
    """
    x = np.array(init, dtype=float).reshape(-1)
    d = spec.dim
    if x.shape != (d,):
        raise ValueError(f"init must have length {d}")
    if not spec.prior.in_support(x):
        raise InitOffSupport(f"initial state {x.tolist()} is outside the prior support")
    if proposal.global_prob > 0 and not spec.prior.samplable:
        raise ValueError("global proposals need a uniform_box or gaussian prior")
    ev = log_density(spec, x)
    cur_logd = ev.value if on_evaluate is None else on_evaluate(x, ev.value)
    if not np.isfinite(cur_logd):
        raise NonFiniteDensityAtInit(f"log-density at the initial state is {cur_logd} ({ev.failure})")
    cur_lam = None if ev.solution is None else ev.solution.lam

    rng = make_rng(seed)
    chol = None if proposal.covariance is None else np.linalg.cholesky(proposal.covariance)
    span = adaptation_span(proposal, iters)
    log_sd = math.log(proposal.base_sd)
    sigma = proposal.base_sd
    trial = {}

    def propose(state, rng_):
        z = rng_.standard_normal(d)
        step = z if chol is None else chol @ z
        return state + sigma * step, 0.0, 0.0

    def propose_global(state, rng_):
        new = spec.prior.sample(rng_)
        return new, spec.prior.log_density(new), spec.prior.log_density(state)

    def target(theta):
        e = log_density(spec, theta, warm_start=cur_lam)
        trial["lam"] = None if e.solution is None else e.solution.lam
        return e.value if on_evaluate is None else on_evaluate(theta, e.value)

    draws = np.empty((iters, d))
    logds = np.empty(iters)
    accepted = np.zeros(iters, dtype=bool)
    for t in range(iters):
        is_global = proposal.global_prob > 0 and rng.random() < proposal.global_prob
        # a global jump lands far away, so its dual solve starts cold
        warm = cur_lam
        if is_global:
            cur_lam = None
        x, cur_logd, acc = mh_kernel(x, cur_logd, propose_global if is_global else propose, target, rng)
        cur_lam = trial["lam"] if acc else warm
        draws[t] = x
        logds[t] = cur_logd
        accepted[t] = acc
        if t < span and not is_global:
            log_sd += (t + 1) ** -0.6 * (float(acc) - proposal.target_accept)
            sigma = math.exp(log_sd)
        if debug_check_every and (t + 1) % debug_check_every == 0 and on_evaluate is None:
            cold = log_density(spec, x).value
            if abs(cold - cur_logd) > 1e-8 * max(1.0, abs(cold)):
                raise AssertionError(f"warm-started log-density {cur_logd} != cold {cold} at step {t}")
    return Chain(draws, logds, accepted, sigma, int(seed), span)


def run_chains(spec, inits, proposal, iters, seed, workers: int = 1):
    """Run one chain per initial state; chain ``k`` uses substream ``(seed, k)``."""
    from .rng import substream_seed

    seeds = [substream_seed(seed, k) for k in range(len(inits))]
    if workers <= 1 or len(inits) == 1:
        return [run_chain(spec, x0, proposal, iters, s) for x0, s in zip(inits, seeds)]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(run_chain, spec, x0, proposal, iters, s) for x0, s in zip(inits, seeds)]
        return [f.result() for f in futs]

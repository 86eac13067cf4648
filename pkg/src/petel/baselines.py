"""Comparator methods: bootstrap ERM, calibrated Gibbs and the ALD working likelihood."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .loss import CheckLoss, Dataset, LossModel
from .optim import minimize_risk, subgradient_descent
from .posterior import PosteriorSpec, Prior, log_density
from .rng import make_rng, substream_seed
from .sampler import Chain, ProposalConfig, run_chain, scale_proposal_default


@dataclass(frozen=True)
class OptimizerConfig:
    """How each bootstrap resample is solved.

    Parameters
    ----------
    method : {"subgradient", "exact"}
        Diminishing-step (sub)gradient descent, or :func:`minimize_risk`.
    step : float
        Step constant ``c`` in ``c / sqrt(t)``.
    iters : int
        Descent iterations.
    init : {"erm", "zeros", "gaussian"}
        Start at the full-data ERM, at zero, or at a draw from
        ``N(init_mean, init_cov)`` per resample.
    box : tuple, optional
        ``(lo, hi)`` projection box.
    batch : int
        Resamples solved together (memory control).
    """

    method: str = "subgradient"
    step: float = 1.0
    iters: int = 2000
    init: str = "erm"
    init_mean: tuple | float | None = None
    init_cov: tuple | float | None = None
    box: tuple | None = None
    batch: int = 250

    def __post_init__(self):
        if self.method not in ("subgradient", "exact"):
            raise ValueError("method must be 'subgradient' or 'exact'")
        if self.init not in ("erm", "zeros", "gaussian"):
            raise ValueError("init must be 'erm', 'zeros' or 'gaussian'")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Bootstrap ERMs and percentile intervals.

    Intervals use the inverse empirical CDF, so with ``B = 2`` they are the
    minimum and maximum of the two estimates.
    """

    estimates: np.ndarray
    intervals: np.ndarray
    point: np.ndarray
    converged: np.ndarray
    level: float

    @property
    def lengths(self):
        return self.intervals[:, 1] - self.intervals[:, 0]


def resample_indices(n: int, B: int, seed: int) -> np.ndarray:
    """Resample ``b`` draws ``n`` indices from substream ``(seed, b)``."""
    return np.stack([make_rng(seed, b, 0).integers(0, n, size=n) for b in range(B)])


def _inits(model, data, B, cfg: OptimizerConfig, seed):
    d = model.dim(data)
    if cfg.init == "zeros":
        return np.zeros((B, d))
    if cfg.init == "erm":
        return np.tile(minimize_risk(model, data).theta, (B, 1))
    mean = np.broadcast_to(np.asarray(0.0 if cfg.init_mean is None else cfg.init_mean, dtype=float), (d,))
    cov = np.asarray(1.0 if cfg.init_cov is None else cfg.init_cov, dtype=float)
    if cov.ndim < 2:
        cov = np.diag(np.broadcast_to(cov, (d,)))
    L = np.linalg.cholesky(cov)
    return np.stack([mean + L @ make_rng(seed, b, 1).standard_normal(d) for b in range(B)])


def bootstrap(model: LossModel, data: Dataset, B: int = 500, level: float = 0.95, optimizer=None, seed: int = 0):
    """Nonparametric bootstrap of the empirical risk minimizer.

    Returns
    -------
    BootstrapResult
        ``point`` is the mean of the resample estimates; failed optimizer
        runs are kept and flagged in ``converged``.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    cfg = optimizer or OptimizerConfig()
    model.validate(data)
    n = data.n
    idx = resample_indices(n, B, seed)
    inits = _inits(model, data, B, cfg, seed)
    est = np.empty_like(inits)
    conv = np.zeros(B, dtype=bool)
    if cfg.method == "exact":
        for b in range(B):
            r = minimize_risk(model, data.take(idx[b]), init=inits[b] if cfg.init != "erm" else None)
            est[b], conv[b] = r.theta, r.converged
    else:
        for lo in range(0, B, cfg.batch):
            hi = min(lo + cfg.batch, B)
            w = np.stack([np.bincount(idx[b], minlength=n) for b in range(lo, hi)]).astype(float)
            est[lo:hi], conv[lo:hi] = subgradient_descent(
                model, data, inits[lo:hi], w, step=cfg.step, iters=cfg.iters, box=cfg.box
            )
    a = 1.0 - level
    intervals = np.quantile(est, [a / 2, 1 - a / 2], axis=0, method="inverted_cdf").T
    return BootstrapResult(est, intervals, est.mean(axis=0), conv, level)


# calibrated Gibbs ----------------------------------------------------------


def stochastic_approximation(beta0, coverage_fn, target, sa_iters=30, gain=1.0, exponent=0.51, bounds=(1e-4, 1e4)):
    """Robbins-Monro search for the learning rate whose coverage hits ``target``.

    Updates ``log beta += gain / t**exponent * (coverage_fn(beta, t) - target)``
    and clips ``beta`` to ``bounds``.

    Returns
    -------
    beta : float
    history : list of (beta, coverage)
    """
    if not beta0 > 0:
        raise ValueError("beta0 must be positive")
    log_beta = math.log(beta0)
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    history = []
    for t in range(1, sa_iters + 1):
        beta = math.exp(log_beta)
        cov = float(coverage_fn(beta, t))
        history.append((beta, cov))
        log_beta = min(max(log_beta + gain / t**exponent * (cov - target), lo), hi)
    return math.exp(log_beta), history


@dataclass(frozen=True, eq=False)
class CalibratedGibbsResult:
    beta: float
    chain: Chain
    history: list
    spec: PosteriorSpec


def hpd_coverage(spec: PosteriorSpec, chain: Chain, points, level: float) -> float:
    """Fraction of ``points`` inside the chain's highest-density region.

    The region is ``{theta: log pi(theta) >= c}`` with ``c`` the
    ``1 - level`` quantile of the retained draws' log-densities.
    """
    c = float(np.quantile(chain.log_densities[chain.burn_in:], 1.0 - level))
    vals = np.array([log_density(spec, p).value for p in points])
    return float(np.mean(vals >= c))


def calibrated_gibbs(
    model: LossModel,
    data: Dataset,
    level: float = 0.95,
    beta0: float = 1.0,
    sa_iters: int = 30,
    boot_B: int = 200,
    chain_iters: int = 2000,
    seed: int = 0,
    *,
    prior: Prior | None = None,
    gain: float = 1.0,
    proposal_c: float = 2.0,
    init=None,
    boot_optimizer: OptimizerConfig | None = None,
) -> CalibratedGibbsResult:
    """Gibbs posterior with a learning rate tuned for frequentist coverage.

    Each stochastic-approximation step runs a Gibbs chain at the current
    ``beta`` (rate ``n * beta``), forms its highest-density region at mass
    ``level`` and measures how many of ``boot_B`` bootstrap ERMs it covers.
    """
    n = data.n
    d = model.dim(data)
    prior = prior or Prior.flat(d)
    erm = minimize_risk(model, data, init=init).theta
    x0 = erm if init is None else np.asarray(init, dtype=float)
    boot = bootstrap(
        model, data, boot_B, level, boot_optimizer or OptimizerConfig(method="exact"), substream_seed(seed, 0)
    )
    template = PosteriorSpec(model, data, prior, mode="gibbs", gibbs_rate=float(n))

    def chain_at(beta, k):
        spec = dataclasses.replace(template, gibbs_rate=n * beta)
        prop = ProposalConfig(scale_proposal_default(n, proposal_c) / math.sqrt(beta))
        return spec, run_chain(spec, x0, prop, chain_iters, substream_seed(seed, 1, k))

    def coverage(beta, t):
        spec, chain = chain_at(beta, t)
        return hpd_coverage(spec, chain, boot.estimates, level)

    beta, history = stochastic_approximation(beta0, coverage, level, sa_iters, gain)
    spec, chain = chain_at(beta, 0)
    return CalibratedGibbsResult(beta, chain, history, spec)


# ALD working likelihood ----------------------------------------------------


def ald_gibbs_config(tau: float = 0.5):
    """Turn a posterior spec into the asymmetric-Laplace working posterior.

    The returned function maps a :class:`PosteriorSpec` to a Gibbs spec with
    check loss at quantile ``tau`` and rate ``n`` (unit ALD scale).
    """
    model = CheckLoss(tau)

    def configure(spec: PosteriorSpec) -> PosteriorSpec:
        return dataclasses.replace(
            spec, model=model, mode="gibbs", alpha_n=None, gibbs_rate=float(spec.data.n)
        )

    return configure

"""Unnormalized log-posteriors: Gibbs, Bayesian ETEL and Bayesian PETEL."""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .etel import EtelSolution, log_etel_at
from .exceptions import DimensionError, DualUnbounded, NoAlphaFound, NonFiniteLoss, SingularHessian
from .loss import Dataset, LossModel, empirical_risk
from .rng import substream_seed

MODES = ("petel", "etel", "gibbs")


@dataclass(frozen=True, eq=False)
class Prior:
    """Prior density on the parameter.

    Use the constructors :meth:`uniform_box`, :meth:`gaussian`, :meth:`flat`
    and :meth:`custom` rather than instantiating directly.
    """

    kind: str
    dim: int
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    fn: Callable | None = None
    support_fn: Callable | None = None
    _chol: np.ndarray | None = None
    _log_norm: float = 0.0

    @classmethod
    def uniform_box(cls, lo, hi) -> "Prior":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        if not np.all(hi > lo):
            raise ValueError("uniform_box needs hi > lo in every coordinate")
        log_norm = -float(np.sum(np.log(hi - lo)))
        return cls("uniform_box", lo.size, lo=lo.copy(), hi=hi.copy(), _log_norm=log_norm)

    @classmethod
    def gaussian(cls, mean, cov) -> "Prior":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        d = mean.size
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (d, d):
            raise DimensionError("gaussian prior covariance must be d x d")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("gaussian prior covariance is not positive definite") from None
        log_norm = -0.5 * d * math.log(2 * math.pi) - float(np.sum(np.log(np.diag(L))))
        return cls("gaussian", d, mean=mean, cov=cov, _chol=L, _log_norm=log_norm)

    @classmethod
    def standard_gaussian(cls, dim: int) -> "Prior":
        return cls.gaussian(np.zeros(dim), np.eye(dim))

    @classmethod
    def flat(cls, dim: int) -> "Prior":
        """Improper constant density on all of R^d."""
        return cls("flat", int(dim))

    @classmethod
    def custom(cls, dim: int, log_density: Callable, support: Callable | None = None) -> "Prior":
        """Prior from a user log-density; off-support points get ``-inf``."""
        return cls("custom", int(dim), fn=log_density, support_fn=support)

    def in_support(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        if self.kind == "uniform_box":
            return bool(np.all(theta >= self.lo) and np.all(theta <= self.hi))
        if self.kind == "custom":
            if self.support_fn is not None:
                return bool(self.support_fn(theta))
            return bool(np.isfinite(self.fn(theta)))
        return bool(np.all(np.isfinite(theta)))

    def log_density(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimensionError(f"prior expects a length-{self.dim} parameter")
        if not self.in_support(theta):
            return -math.inf
        if self.kind == "uniform_box" or self.kind == "flat":
            return self._log_norm
        if self.kind == "gaussian":
            z = np.linalg.solve(self._chol, theta - self.mean)
            return self._log_norm - 0.5 * float(z @ z)
        val = float(self.fn(theta))
        return val if not math.isnan(val) else -math.inf

    @property
    def samplable(self) -> bool:
        return self.kind in ("uniform_box", "gaussian")

    def sample(self, rng) -> np.ndarray:
        """One draw from a proper uniform or Gaussian prior."""
        if self.kind == "uniform_box":
            return self.lo + (self.hi - self.lo) * rng.random(self.dim)
        if self.kind == "gaussian":
            return self.mean + self._chol @ rng.standard_normal(self.dim)
        raise ValueError(f"cannot sample from a {self.kind} prior")

    def describe(self) -> dict:
        if self.kind == "uniform_box":
            return {"kind": "uniform_box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}
        return {"kind": self.kind, "dim": self.dim}


@dataclass(frozen=True, eq=False)
class PosteriorSpec:
    """Everything that defines an unnormalized log-posterior.

    Parameters
    ----------
    model, data, prior
        Loss model, observations and prior.
    mode : {"petel", "etel", "gibbs"}
        ``petel``: ``log prior + log ETEL - alpha_n * R_n``;
        ``etel``: the same with ``alpha_n = 0``;
        ``gibbs``: ``log prior - gibbs_rate * R_n``.
    alpha_n : float, optional
        PETEL penalty; required for ``petel``, must be unset or 0 for ``etel``.
    gibbs_rate : float, optional
        The product ``n * beta``; required for ``gibbs`` only.
    tol, max_iter
        Dual solver settings.
    """

    model: LossModel
    data: Dataset
    prior: Prior
    mode: str = "petel"
    alpha_n: float | None = None
    gibbs_rate: float | None = None
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "petel":
            if self.alpha_n is None or not self.alpha_n >= 0:
                raise ValueError("petel mode needs alpha_n >= 0")
            if self.gibbs_rate is not None:
                raise ValueError("gibbs_rate is only used in gibbs mode")
        elif self.mode == "etel":
            if self.alpha_n not in (None, 0, 0.0):
                raise ValueError("etel mode has alpha_n = 0")
            if self.gibbs_rate is not None:
                raise ValueError("gibbs_rate is only used in gibbs mode")
        else:
            if self.gibbs_rate is None or not self.gibbs_rate >= 0:
                raise ValueError("gibbs mode needs gibbs_rate >= 0")
            if self.alpha_n is not None:
                raise ValueError("alpha_n is not used in gibbs mode")
        self.model.validate(self.data)
        if self.prior.dim != self.dim:
            raise DimensionError(f"prior has dimension {self.prior.dim}, model has {self.dim}")

    @property
    def dim(self) -> int:
        return self.model.dim(self.data)

    @property
    def penalty(self) -> float:
        return float(self.alpha_n or 0.0)


class LogDensity(NamedTuple):
    """A log-density evaluation.

    ``failure`` names the reason when ``value`` is ``-inf``: ``"support"``,
    ``"dual_unbounded"``, ``"singular"``, ``"nonconvergence"`` or
    ``"nonfinite"``.
    """

    value: float
    solution: EtelSolution | None
    failure: str | None = None


def log_density(spec: PosteriorSpec, theta, warm_start=None) -> LogDensity:
    """Evaluate the unnormalized log-posterior at ``theta``.

    Solver failures do not raise: they give ``-inf`` with ``failure`` set,
    so a Metropolis step simply rejects.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.dim,):
        raise DimensionError(f"theta must have length {spec.dim}")
    lp = spec.prior.log_density(theta)
    if lp == -math.inf:
        return LogDensity(-math.inf, None, "support")
    try:
        risk = empirical_risk(spec.model, spec.data, theta)
    except NonFiniteLoss:
        return LogDensity(-math.inf, None, "nonfinite")
    if spec.mode == "gibbs":
        return LogDensity(lp - spec.gibbs_rate * risk, None)
    try:
        sol = log_etel_at(spec.model, spec.data, theta, warm_start, spec.tol, spec.max_iter)
    except DualUnbounded:
        return LogDensity(-math.inf, None, "dual_unbounded")
    except SingularHessian:
        return LogDensity(-math.inf, None, "singular")
    if not sol.converged:
        return LogDensity(-math.inf, sol, "nonconvergence")
    return LogDensity(lp + sol.log_etel - spec.penalty * risk, sol)


def default_alpha(n: int, c: float = 2.0, exponent: float = 0.5) -> float:
    """The penalty ``c * n**exponent``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return float(c) * float(n) ** float(exponent)


@dataclass(frozen=True)
class AlphaTuning:
    """Outcome of :func:`tune_alpha`."""

    alpha: float
    posterior_mean: np.ndarray
    erm: np.ndarray
    error: float
    steps: int
    exceeded_n: bool


def tune_alpha(
    template: PosteriorSpec,
    data: Dataset | None = None,
    start: float = 0.0,
    step: float = 1.0,
    match_tol: float = 0.05,
    draws: int = 1000,
    *,
    erm=None,
    init=None,
    max_increments: int = 20,
    proposal_c: float = 1.0,
    global_prob: float | None = None,
    seed: int = 0,
) -> AlphaTuning:
    """Raise the penalty until the posterior mean matches the ERM.

    Starting at ``start``, short PETEL chains of ``draws`` iterations are run
    for ``alpha = start, start + step, ...``; the first ``alpha`` whose
    post-burn-in mean lies within ``match_tol * (1 + |ERM|)`` of the ERM is
    returned. ``exceeded_n`` flags an accepted ``alpha`` larger than ``n``.

    A posterior mean is only meaningful from a chain that visits every
    mode, so with a uniform or Gaussian prior a fraction ``global_prob``
    (default 0.2) of the moves are independence proposals from the prior.

    Raises
    ------
    NoAlphaFound
        If ``max_increments`` increments pass without a match.
    """
    from .optim import minimize_risk
    from .sampler import ProposalConfig, run_chain, scale_proposal_default

    if not start >= 0 or not step > 0:
        raise ValueError("need start >= 0 and step > 0")
    data = template.data if data is None else data
    if erm is None:
        erm = minimize_risk(template.model, data).theta
    erm = np.asarray(erm, dtype=float)
    x0 = erm if init is None else np.asarray(init, dtype=float)
    if global_prob is None:
        global_prob = 0.2 if template.prior.samplable else 0.0
    proposal = ProposalConfig(scale_proposal_default(data.n, proposal_c), global_prob=global_prob)
    alpha = float(start)
    for k in range(max_increments + 1):
        spec = dataclasses.replace(template, data=data, mode="petel", alpha_n=alpha, gibbs_rate=None)
        chain = run_chain(spec, x0, proposal, draws, seed=substream_seed(seed, k))
        mean = chain.draws[chain.burn_in:].mean(axis=0)
        err = float(np.linalg.norm(mean - erm))
        if err <= match_tol * (1.0 + float(np.linalg.norm(erm))):
            exceeded = alpha > data.n
            if exceeded:
                warnings.warn(f"tuned alpha {alpha:g} exceeds n={data.n}", RuntimeWarning, stacklevel=2)
            return AlphaTuning(alpha, mean, erm, err, k, exceeded)
        alpha += step
    raise NoAlphaFound(f"no alpha in [{start:g}, {alpha - step:g}] matched the ERM within {match_tol:g}")

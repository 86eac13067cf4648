"""Posterior summaries, credible regions and MCMC diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

from .exceptions import TooFewDraws


def chi2_cdf(x: float, df: float) -> float:
    """Chi-square CDF via the regularized lower incomplete gamma."""
    if x <= 0:
        return 0.0
    return float(gammainc(0.5 * df, 0.5 * x))


def chi2_quantile(p: float, df: float, xtol: float = 1e-12) -> float:
    """Chi-square quantile by bisection on :func:`chi2_cdf`."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    lo, hi = 0.0, max(1.0, float(df))
    while chi2_cdf(hi, df) < p:
        lo, hi = hi, 2.0 * hi
    while hi - lo > xtol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class CredibleSummary:
    """Posterior mean, covariance, marginal intervals and ellipse radius.

    ``ellipse_radius`` is the squared Mahalanobis radius ``q`` of the region
    ``(theta - mean)^T cov^-1 (theta - mean) <= q``.
    """

    mean: np.ndarray
    covariance: np.ndarray
    intervals: np.ndarray
    ellipse_radius: float
    level: float
    draws: int
    singular: bool = False

    @property
    def lengths(self) -> np.ndarray:
        return self.intervals[:, 1] - self.intervals[:, 0]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "intervals": self.intervals.tolist(),
            "ellipse_radius": self.ellipse_radius,
            "level": self.level,
            "draws": self.draws,
            "singular": self.singular,
        }


def summarize(draws, burn_in: int = 0, level: float = 0.95) -> CredibleSummary:
    """Summarize retained draws.

    Intervals are the ``(1-level)/2`` and ``(1+level)/2`` empirical quantiles
    with linear interpolation; the ellipse radius is the ``level`` quantile
    of the chi-square distribution with ``d`` degrees of freedom.

    Raises
    ------
    TooFewDraws
        If fewer than ``10 * d`` draws remain after burn-in.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    x = x[burn_in:]
    T, d = x.shape
    if T < 10 * d:
        raise TooFewDraws(f"{T} retained draws, need at least {10 * d}")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (T - 1)
    cov = 0.5 * (cov + cov.T)
    a = 1.0 - level
    intervals = np.quantile(x, [a / 2, 1 - a / 2], axis=0).T
    try:
        L = np.linalg.cholesky(cov)
        singular = bool(np.diag(L).min() <= 1e-12 * max(np.diag(L).max(), 1e-300))
    except np.linalg.LinAlgError:
        singular = True
    return CredibleSummary(mean, cov, intervals, chi2_quantile(level, d), level, T, singular)


def ellipse_contains(summary: CredibleSummary, theta) -> bool:
    """Whether ``theta`` lies in the closed credible ellipse."""
    r = np.asarray(theta, dtype=float).reshape(-1) - summary.mean
    if summary.singular:
        raise np.linalg.LinAlgError("credible ellipse undefined: posterior covariance is singular")
    L = np.linalg.cholesky(summary.covariance)
    z = np.linalg.solve(L, r)
    return bool(z @ z <= summary.ellipse_radius)


def gelman_rubin(chains) -> np.ndarray:
    """Potential scale reduction factor per coordinate.

    Parameters
    ----------
    chains : array_like, shape (m, T) or (m, T, d)
        ``m >= 2`` chains of equal length.

    Returns
    -------
    ndarray, shape (d,)
        ``sqrt((W (T-1)/T + B/T) / W)`` with ``W`` the mean within-chain
        variance and ``B = T * var(chain means)``.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("chains must have shape (m, T) or (m, T, d)")
    m, T, _ = x.shape
    if m < 2 or T < 2:
        raise ValueError("need at least two chains of length at least two")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = T * means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt((W * (T - 1) / T + B / T) / W)


def split_gelman_rubin(chain) -> np.ndarray:
    """Gelman-Rubin on the two halves of one chain."""
    x = np.asarray(chain, dtype=float)
    h = x.shape[0] // 2
    return gelman_rubin(np.stack([x[:h], x[h:2 * h]]))


def _autocovariance(x):
    T = x.size
    c = x - x.mean()
    nfft = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(c, nfft)
    return np.fft.irfft(f * np.conj(f), nfft)[:T] / T


def effective_sample_size(sequence) -> float:
    """Effective sample size with Geyer's initial positive sequence.

    Autocorrelations are summed in pairs ``rho_{2k} + rho_{2k+1}`` until the
    first negative pair. The result is capped at ``1.2 T``; a constant
    sequence returns ``nan``.
    """
    x = np.asarray(sequence, dtype=float).reshape(-1)
    T = x.size
    if T < 4:
        return math.nan
    acov = _autocovariance(x)
    if not acov[0] > 0:
        return math.nan
    rho = acov / acov[0]
    pairs = rho[: 2 * (T // 2)].reshape(-1, 2).sum(axis=1)
    neg = np.nonzero(pairs < 0)[0]
    k = neg[0] if neg.size else pairs.size
    tau = -1.0 + 2.0 * float(pairs[:k].sum())
    if not tau > 0:
        return 1.2 * T
    return min(T / tau, 1.2 * T)


def ess_per_coordinate(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.array([effective_sample_size(x[:, j]) for j in range(x.shape[1])])


def diagnostics_report(chains, checkpoints=None, acceptance_rates=None, burn_in: int = 0) -> dict:
    """Convergence diagnostics for one or more equal-length chains.

    Parameters
    ----------
    chains : sequence of arrays, each (T, d)
        A single chain is split into halves for the R-hat computation.
    checkpoints : sequence of int, optional
        Chain lengths at which R-hat is reported; ten evenly spaced by default.
    acceptance_rates : sequence of float, optional
    burn_in : int
        Draws discarded before every computation.
    """
    arrs = [np.asarray(c, dtype=float) for c in chains]
    arrs = [a[:, None] if a.ndim == 1 else a for a in arrs]
    lengths = {a.shape for a in arrs}
    if len(lengths) != 1:
        raise ValueError(f"chains differ in shape: {sorted(lengths)}")
    arrs = [a[burn_in:] for a in arrs]
    T = arrs[0].shape[0]
    split = len(arrs) == 1
    if split:
        h = T // 2
        stack = np.stack([arrs[0][:h], arrs[0][h:2 * h]])
    else:
        stack = np.stack(arrs)
    L = stack.shape[1]
    if checkpoints is None:
        checkpoints = sorted({max(4, int(round(L * k / 10))) for k in range(1, 11)})
    rhat = []
    for c in checkpoints:
        c = int(min(c, L))
        if c < 2:
            continue
        rhat.append({"length": c, "rhat": gelman_rubin(stack[:, :c]).tolist()})
    pooled = np.concatenate(arrs, axis=0)
    return {
        "mode": "split_half" if split else "multi_chain",
        "chains": len(arrs),
        "draws_per_chain": T,
        "burn_in": burn_in,
        "rhat": rhat,
        "rhat_final": gelman_rubin(stack).tolist(),
        "ess": [ess_per_coordinate(a).tolist() for a in arrs],
        "ess_pooled": ess_per_coordinate(pooled).tolist(),
        "acceptance_rates": None if acceptance_rates is None else [float(a) for a in acceptance_rates],
    }


def write_json(obj, path) -> None:
    """Deterministic JSON output (sorted keys, trailing newline)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")

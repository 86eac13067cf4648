"""Synthetic generators and the replicated coverage harness."""
from __future__ import annotations

import csv
import dataclasses
import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import OptimizerConfig, ald_gibbs_config, bootstrap, calibrated_gibbs
from .exceptions import ExcessiveFailures
from .inference import summarize
from .loss import Dataset, cubic_link, make_loss
from .optim import minimize_risk
from .posterior import PosteriorSpec, Prior, default_alpha
from .rng import make_rng, substream_seed
from .sampler import ProposalConfig, run_chain, scale_proposal_default
from .sparse import default_sparse_prior, run_sparse_chain, stepwise_search

SVM_CENTROIDS = {1: (0.64, 0.45), -1: (-1.18, -0.24)}
SIGMOID_THETA = (1.0, 2.0, 3.0)


# generators ----------------------------------------------------------------


def gen_svm(n: int, seed: int) -> Dataset:
    """Two Gaussian classes ``N(c_y, I_2)`` with equiprobable labels."""
    rng = make_rng(seed)
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    c = np.where(y[:, None] > 0, SVM_CENTROIDS[1], SVM_CENTROIDS[-1])
    x = c + rng.standard_normal((n, 2))
    return Dataset(x, labels=y)


def gen_sigmoid_cauchy(n: int, seed: int) -> Dataset:
    """Sigmoid-unit regression ``y = 3 S(x_1 + 2 x_2) + e`` with Cauchy noise.

    The noise scale is ``|x|_2 / sqrt(6)``.
    """
    rng = make_rng(seed)
    x = rng.standard_normal((n, 2))
    t1, t2, t3 = SIGMOID_THETA
    signal = t3 / (1.0 + np.exp(-(t1 * x[:, 0] + t2 * x[:, 1])))
    scale = np.linalg.norm(x, axis=1) / math.sqrt(6.0)
    return Dataset(x, response=signal + scale * rng.standard_cauchy(n))


def gen_hd_quantile(n: int, d: int, seed: int, noise_param: str = "variance") -> Dataset:
    """Sparse median regression with ``theta* = (2, 3, 0, ..., 0)``.

    The first two features are ``N(0, diag(1, 2))``, the rest standard
    normal. The noise is Gaussian with ``v = 0.5 sqrt((x_1^2 + x_2^2) / 2)``
    read as its variance (``noise_param="variance"``) or its standard
    deviation (``"sd"``).
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    if noise_param not in ("variance", "sd"):
        raise ValueError("noise_param must be 'variance' or 'sd'")
    rng = make_rng(seed)
    x = rng.standard_normal((n, d))
    x[:, 1] *= math.sqrt(2.0)
    v = 0.5 * np.sqrt((x[:, 0] ** 2 + x[:, 1] ** 2) / 2.0)
    sd = np.sqrt(v) if noise_param == "variance" else v
    y = 2.0 * x[:, 0] + 3.0 * x[:, 1] + sd * rng.standard_normal(n)
    return Dataset(x, response=y)


def gen_cubic_regression(n: int, seed: int) -> Dataset:
    """``y = f(x) + e`` with the cubic link, ``x, e ~ N(0, 1)`` and ``theta* = 1``."""
    rng = make_rng(seed)
    x = rng.standard_normal(n)
    return Dataset(x[:, None], response=cubic_link(x) + rng.standard_normal(n))


GENERATOR_KINDS = ("svm_centroids", "sigmoid_cauchy", "hd_quantile", "cubic_regression")


@dataclass(frozen=True)
class GeneratorSpec:
    """A synthetic data source."""

    kind: str
    n: int
    d: int | None = None
    seed: int = 0
    noise_param: str = "variance"

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.kind == "hd_quantile" and self.d is None:
            raise ValueError("hd_quantile needs d")

    def generate(self, seed: int | None = None) -> Dataset:
        s = self.seed if seed is None else seed
        if self.kind == "svm_centroids":
            return gen_svm(self.n, s)
        if self.kind == "sigmoid_cauchy":
            return gen_sigmoid_cauchy(self.n, s)
        if self.kind == "hd_quantile":
            return gen_hd_quantile(self.n, self.d, s, self.noise_param)
        return gen_cubic_regression(self.n, s)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


THETA_STAR_MC_N = 10**6
THETA_STAR_SEED = 20240601


@functools.lru_cache(maxsize=None)
def _svm_theta_star(loss_name: str, params: tuple, n_mc: int, seed: int):
    data = gen_svm(n_mc, seed)
    model = make_loss(loss_name, **dict(params))
    return tuple(minimize_risk(model, data).theta.tolist())


def svm_theta_star(loss_name="smoothed_hinge", params=None, n_mc=THETA_STAR_MC_N, seed=THETA_STAR_SEED):
    """Population SVM minimizer, from the ERM on ``n_mc`` generated points."""
    params = {"lam": 0.1, "eps": 0.5} if params is None and loss_name == "smoothed_hinge" else (params or {"lam": 0.1})
    return np.array(_svm_theta_star(loss_name, tuple(sorted(params.items())), int(n_mc), int(seed)))


def default_theta_star(generator: GeneratorSpec, loss_name: str | None = None, loss_params=None) -> np.ndarray:
    """The population minimizer targeted by ``generator``."""
    if generator.kind == "svm_centroids":
        return svm_theta_star(loss_name or "smoothed_hinge", loss_params)
    if generator.kind == "sigmoid_cauchy":
        return np.array(SIGMOID_THETA)
    if generator.kind == "hd_quantile":
        out = np.zeros(generator.d)
        out[:2] = (2.0, 3.0)
        return out
    return np.array([1.0])


# method configuration ------------------------------------------------------

METHODS = ("petel", "etel", "gibbs", "cg", "bootstrap", "ald", "sparse_petel")


@dataclass(frozen=True)
class MethodConfig:
    """Settings for one inference method inside the coverage harness.

    The posterior methods use ``iters`` random-walk steps with proposal scale
    ``proposal_c / sqrt(n)``; the adaptation window is burn-in.
    """

    method: str = "petel"
    loss: str = "smoothed_hinge"
    loss_params: dict = field(default_factory=dict)
    alpha: float | None = None
    alpha_c: float = 2.0
    alpha_exponent: float = 0.5
    gibbs_beta: float = 1.0
    iters: int = 3000
    adapt_window: int = 1000
    proposal_c: float = 2.0
    prior: dict | None = None
    init: str = "erm"
    init_mean: float | list | None = None
    init_cov: float | list | None = None
    prerun_iters: int = 0
    prerun_alpha_factor: float = 1.0
    boot_B: int = 500
    opt_method: str = "subgradient"
    opt_step: float = 1.0
    opt_iters: int = 2000
    sa_iters: int = 30
    cg_boot_B: int = 200
    cg_chain_iters: int = 2000
    tau: float = 0.5
    s0: int | None = None
    beta_c: float = 1.2
    hamming_radius: int = 1
    smoothing_eps: float | None = None
    report_coords: list | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def alpha_for(self, n: int) -> float | None:
        if self.method not in ("petel", "sparse_petel"):
            return 0.0 if self.method == "etel" else None
        if self.alpha is not None:
            return float(self.alpha)
        return default_alpha(n, self.alpha_c, self.alpha_exponent)


def make_prior(desc: dict | None, dim: int) -> Prior:
    """Prior from a config dict; a wide ``N(0, 100 I)`` by default."""
    desc = desc or {"kind": "gaussian", "mean": 0.0, "cov": 100.0}
    kind = desc.get("kind")
    if kind == "uniform_box":
        lo = np.broadcast_to(np.asarray(desc["lo"], dtype=float), (dim,))
        hi = np.broadcast_to(np.asarray(desc["hi"], dtype=float), (dim,))
        return Prior.uniform_box(lo, hi)
    if kind == "gaussian":
        mean = np.broadcast_to(np.asarray(desc.get("mean", 0.0), dtype=float), (dim,))
        cov = np.asarray(desc.get("cov", 1.0), dtype=float)
        if cov.ndim < 2:
            cov = np.diag(np.broadcast_to(cov, (dim,)))
        return Prior.gaussian(mean, cov)
    if kind == "flat":
        return Prior.flat(dim)
    raise ValueError(f"unknown prior kind {kind!r}")


@dataclass(frozen=True, eq=False)
class MethodOutput:
    point: np.ndarray
    intervals: np.ndarray
    extra: dict = field(default_factory=dict)


def _initial_state(cfg: MethodConfig, model, data, prior, rng):
    d = model.dim(data)
    if cfg.init == "gaussian":
        mean = np.broadcast_to(np.asarray(0.0 if cfg.init_mean is None else cfg.init_mean, dtype=float), (d,))
        cov = np.asarray(1.0 if cfg.init_cov is None else cfg.init_cov, dtype=float)
        sd = np.sqrt(np.broadcast_to(cov, (d,))) if cov.ndim < 2 else None
        for _ in range(100):
            x = mean + (sd * rng.standard_normal(d) if sd is not None else np.linalg.cholesky(cov) @ rng.standard_normal(d))
            if prior.in_support(x):
                return x
        raise RuntimeError("could not draw an initial state inside the prior support")
    if cfg.init == "zeros":
        return np.zeros(d)
    return minimize_risk(model, data).theta


def _posterior_chain(cfg: MethodConfig, model, data, seed, mode=None, gibbs_rate=None):
    n = data.n
    d = model.dim(data)
    prior = make_prior(cfg.prior, d)
    mode = mode or ("gibbs" if cfg.method == "gibbs" else cfg.method if cfg.method in ("petel", "etel") else "petel")
    rng = make_rng(seed, 0)
    x0 = _initial_state(cfg, model, data, prior, rng)
    prop = ProposalConfig(scale_proposal_default(n, cfg.proposal_c), adapt_window=cfg.adapt_window)
    if cfg.prerun_iters and mode == "petel":
        pre = PosteriorSpec(model, data, prior, "petel", alpha_n=cfg.prerun_alpha_factor * n)
        ch = run_chain(pre, x0, prop, cfg.prerun_iters, substream_seed(seed, 1))
        x0 = ch.draws[int(0.8 * cfg.prerun_iters):].mean(axis=0)
    if mode == "gibbs":
        spec = PosteriorSpec(model, data, prior, "gibbs", gibbs_rate=gibbs_rate if gibbs_rate is not None else n * cfg.gibbs_beta)
    elif mode == "etel":
        spec = PosteriorSpec(model, data, prior, "etel")
    else:
        spec = PosteriorSpec(model, data, prior, "petel", alpha_n=cfg.alpha_for(n))
    return spec, run_chain(spec, x0, prop, cfg.iters, substream_seed(seed, 2))


def run_method(cfg: MethodConfig, data: Dataset, level: float, seed: int) -> MethodOutput:
    """Run one method on one dataset and return its point estimate and intervals."""
    model = make_loss(cfg.loss, **cfg.loss_params)
    if cfg.method in ("petel", "etel", "gibbs"):
        _, chain = _posterior_chain(cfg, model, data, seed)
        s = summarize(chain.draws, chain.burn_in, level)
        return MethodOutput(s.mean, s.intervals, {"acceptance": chain.post_burn_in_acceptance, "sd": chain.proposal_sd})
    if cfg.method == "bootstrap":
        opt = OptimizerConfig(
            method=cfg.opt_method, step=cfg.opt_step, iters=cfg.opt_iters,
            init=cfg.init if cfg.init in ("erm", "zeros", "gaussian") else "erm",
            init_mean=cfg.init_mean, init_cov=cfg.init_cov,
        )
        b = bootstrap(model, data, cfg.boot_B, level, opt, seed)
        return MethodOutput(b.point, b.intervals, {"boot_converged": float(np.mean(b.converged))})
    if cfg.method == "cg":
        prior = make_prior(cfg.prior, model.dim(data))
        r = calibrated_gibbs(
            model, data, level, 1.0, cfg.sa_iters, cfg.cg_boot_B, cfg.cg_chain_iters, seed,
            prior=prior, proposal_c=cfg.proposal_c,
        )
        s = summarize(r.chain.draws, r.chain.burn_in, level)
        return MethodOutput(s.mean, s.intervals, {"beta": r.beta})
    return _run_sparse_method(cfg, model, data, level, seed)


def _run_sparse_method(cfg, model, data, level, seed):
    n, d = data.n, data.p
    sp = default_sparse_prior(n, d, s0=cfg.s0, beta=cfg.beta_c * math.log(d))
    alpha = cfg.alpha if cfg.alpha is not None else default_alpha(n, cfg.alpha_c, cfg.alpha_exponent)
    cache = {}
    sel = stepwise_search(model, data, sp, alpha, cache=cache)
    extra = {"selected": [i + 1 for i in sel]}
    if cfg.method == "ald":
        cols = list(sel) or [0]
        sub = data.select(cols)
        prior = make_prior(cfg.prior or {"kind": "gaussian", "mean": 0.0, "cov": 1.0}, len(cols))
        base = PosteriorSpec(model, sub, prior, "petel", alpha_n=0.0)
        spec = ald_gibbs_config(cfg.tau)(base)
        prop = ProposalConfig(scale_proposal_default(n, cfg.proposal_c), adapt_window=cfg.adapt_window)
        x0 = minimize_risk(spec.model, sub).theta
        chain = run_chain(spec, x0, prop, cfg.iters, substream_seed(seed, 2))
        full = np.zeros((chain.draws.shape[0] - chain.burn_in, d))
        full[:, cols] = chain.draws[chain.burn_in:]
        s = summarize(full, 0, level) if full.shape[0] >= 10 * d else None
        point = full.mean(axis=0)
        intervals = np.quantile(full, [(1 - level) / 2, (1 + level) / 2], axis=0).T if s is None else s.intervals
        return MethodOutput(point, intervals, extra)
    chain = run_sparse_chain(model, data, sp, alpha, sel, cfg.hamming_radius, cfg.iters, seed, cfg.smoothing_eps, cache)
    full = np.array([st.full(d) for st in chain.states])
    point = full.mean(axis=0)
    intervals = np.quantile(full, [(1 - level) / 2, (1 + level) / 2], axis=0).T
    probs = chain.model_probabilities()
    extra["p_selected"] = probs.get(tuple(sel), 0.0)
    extra["p_true"] = probs.get((0, 1), 0.0)
    extra["acceptance"] = chain.acceptance_rate
    return MethodOutput(point, intervals, extra)


# coverage harness ----------------------------------------------------------


@dataclass(eq=False)
class CoverageReport:
    """Aggregated coverage, length and error over replicates.

    ``per_coord[j]`` holds ``coverage_pct`` (over included replicates),
    its Monte Carlo standard error ``mc_se`` and ``mean_length``.
    """

    method: str
    generator: dict
    n: int
    alpha: float | None
    level: float
    replicates: int
    per_coord: list
    avg_error: float
    excluded: int
    theta_star: list
    coords: list
    records: list
    config: dict
    seed: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj) -> "CoverageReport":
        return cls(**obj)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "CoverageReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(comment + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "generator", "n", "alpha", "level", "replicates", "excluded",
                        "coord", "coverage_pct", "mc_se", "mean_length", "avg_error"])
            for c, pc in zip(self.coords, self.per_coord):
                w.writerow([self.method, self.generator.get("kind"), self.n, repr(self.alpha), self.level,
                            self.replicates, self.excluded, c + 1, repr(pc["coverage_pct"]), repr(pc["mc_se"]),
                            repr(pc["mean_length"]), repr(self.avg_error)])

    def coverage(self) -> np.ndarray:
        return np.array([pc["coverage_pct"] for pc in self.per_coord])

    def lengths(self) -> np.ndarray:
        return np.array([pc["mean_length"] for pc in self.per_coord])


def _replicate(task):
    method, generator, theta_star, coords, level, seed, r = task
    data = generator.generate(substream_seed(seed, r, 0))
    mseed = substream_seed(seed, r, 1)
    try:
        if callable(method):
            point, intervals = method(data, level, mseed)
            extra = {}
        else:
            out = run_method(method, data, level, mseed)
            point, intervals, extra = out.point, out.intervals, out.extra
        point = np.asarray(point, dtype=float)
        intervals = np.asarray(intervals, dtype=float)
        lo, hi = intervals[coords, 0], intervals[coords, 1]
        ts = theta_star[coords]
        return {
            "replicate": r,
            "failed": False,
            "message": "",
            "covered": [bool(v) for v in (lo <= ts) & (ts <= hi)],
            "lengths": (hi - lo).tolist(),
            "error": float(np.linalg.norm(point - theta_star)),
            "extra": {k: v for k, v in extra.items()},
        }
    except Exception as exc:  # recorded and excluded from the aggregates
        return {"replicate": r, "failed": True, "message": f"{type(exc).__name__}: {exc}",
                "covered": [], "lengths": [], "error": None, "extra": {}}


def aggregate(records, ncoords: int):
    """Coverage percentages, MC standard errors, mean lengths and mean error."""
    ok = [rec for rec in records if not rec["failed"]]
    m = len(ok)
    per = []
    for j in range(ncoords):
        if m == 0:
            per.append({"coverage_pct": math.nan, "mc_se": math.nan, "mean_length": math.nan})
            continue
        hits = sum(rec["covered"][j] for rec in ok)
        p = hits / m
        per.append({
            "coverage_pct": 100.0 * hits / m,
            "mc_se": 100.0 * math.sqrt(p * (1 - p) / m),
            "mean_length": math.fsum(rec["lengths"][j] for rec in ok) / m,
        })
    err = math.fsum(rec["error"] for rec in ok) / m if m else math.nan
    return per, err, len(records) - m


def run_coverage(
    method,
    generator: GeneratorSpec,
    theta_star=None,
    replicates: int = 200,
    level: float = 0.95,
    seed: int = 0,
    workers: int = 1,
    max_excluded: float = 0.02,
) -> CoverageReport:
    """Replicated frequentist evaluation of a method.

    Replicate ``r`` draws its data from substream ``(seed, r, 0)`` and the
    method's randomness from ``(seed, r, 1)``, so results do not depend on
    ``workers``.

    Parameters
    ----------
    method : MethodConfig or callable
        A callable is ``f(data, level, seed) -> (point, intervals)``.

    Raises
    ------
    ExcessiveFailures
        If more than ``max_excluded`` of the replicates failed; the report
        is attached to the exception.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    if theta_star is None:
        loss = None if callable(method) else method.loss
        params = None if callable(method) else (method.loss_params or None)
        theta_star = default_theta_star(generator, loss, params)
    theta_star = np.asarray(theta_star, dtype=float)
    if not callable(method) and method.report_coords is not None:
        coords = [int(c) for c in method.report_coords]
    elif generator.kind == "hd_quantile":
        coords = [0, 1]
    else:
        coords = list(range(theta_star.size))
    tasks = [(method, generator, theta_star, coords, level, seed, r) for r in range(replicates)]
    if workers > 1 and replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate, tasks))
    else:
        records = [_replicate(t) for t in tasks]
    per, err, excluded = aggregate(records, len(coords))
    report = CoverageReport(
        method=method.method if not callable(method) else getattr(method, "__name__", "custom"),
        generator=generator.to_dict(),
        n=generator.n,
        alpha=None if callable(method) else method.alpha_for(generator.n),
        level=level,
        replicates=replicates,
        per_coord=per,
        avg_error=err,
        excluded=excluded,
        theta_star=theta_star.tolist(),
        coords=coords,
        records=records,
        config={} if callable(method) else method.to_dict(),
        seed=int(seed),
    )
    if excluded > max_excluded * replicates:
        raise ExcessiveFailures(f"{excluded} of {replicates} replicates failed", report)
    return report

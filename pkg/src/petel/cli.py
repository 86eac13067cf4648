"""Command-line interface.

Every subcommand reads a JSON config (validated against :data:`CONFIG_SCHEMA`,
unknown keys rejected), lets command-line flags override it, and writes
deterministic output files that embed the effective config.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import jsonschema
import numpy as np

from . import exceptions as exc
from .baselines import calibrated_gibbs
from .bench import GENERATOR_KINDS, METHODS, GeneratorSpec, MethodConfig, make_prior, run_coverage
from .inference import diagnostics_report, summarize, write_json
from .loss import LOSSES, Dataset, make_loss
from .optim import minimize_risk
from .posterior import PosteriorSpec, default_alpha
from .rng import make_rng, substream_seed
from .sampler import Chain, ProposalConfig, read_chain_csv, run_chain, scale_proposal_default
from .sparse import default_sparse_prior, run_sparse_chain, stepwise_search

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class ConfigError(Exception):
    pass


_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}
_vec = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]}
_mat = {"oneOf": [_vec, {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "method": {"enum": list(METHODS) + ["all"]},
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"enum": sorted(LOSSES)}, "params": {"type": "object"}},
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "csv": {"type": "string"},
                "generator": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "n"],
                    "properties": {
                        "kind": {"enum": list(GENERATOR_KINDS)},
                        "n": {"type": "integer", "minimum": 1},
                        "d": {"type": "integer", "minimum": 2},
                        "seed": _int,
                        "noise_param": {"enum": ["variance", "sd"]},
                    },
                },
            },
        },
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["uniform_box", "gaussian", "flat"]},
                "lo": _vec, "hi": _vec, "mean": _vec, "cov": _mat,
            },
        },
        "alpha": {"type": "number", "minimum": 0},
        "alpha_c": {"type": "number", "exclusiveMinimum": 0},
        "alpha_exponent": _num,
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "iters": {"type": "integer", "minimum": 1},
        "burn_in": _int,
        "adapt_window": _int,
        "chains": {"type": "integer", "minimum": 1},
        "replicates": {"type": "integer", "minimum": 1},
        "seed": _int,
        "workers": {"type": "integer", "minimum": 1},
        "proposal_c": {"type": "number", "exclusiveMinimum": 0},
        "init": {"oneOf": [
            {"enum": ["erm", "zeros", "gaussian"]},
            {"type": "array", "items": {"type": "number"}},
            {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        ]},
        "init_mean": _vec,
        "init_cov": _vec,
        "prerun_iters": _int,
        "boot_B": {"type": "integer", "minimum": 2},
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["subgradient", "exact"]},
                "step": {"type": "number", "exclusiveMinimum": 0},
                "iters": {"type": "integer", "minimum": 1},
            },
        },
        "cg": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sa_iters": {"type": "integer", "minimum": 1},
                "boot_B": {"type": "integer", "minimum": 2},
                "chain_iters": {"type": "integer", "minimum": 3},
            },
        },
        "sparse": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "s0": {"type": "integer", "minimum": 1},
                "beta_c": {"type": "number", "exclusiveMinimum": 0},
                "hamming_radius": _int,
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "burn_in": _int,
            },
        },
        "tau": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "theta_star": {"type": "array", "items": {"type": "number"}},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "prefix": {"type": "string"}},
        },
    },
}

CONFIG_KEYS = {
    "method": "petel | etel | gibbs | cg | bootstrap | ald | sparse_petel (coverage also accepts 'all')",
    "loss.name": "squared | check | hinge | smoothed_hinge | huber_sigmoid | cubic_regression",
    "loss.params": "loss hyperparameters, e.g. {\"lam\": 0.1, \"eps\": 0.5} or {\"tau\": 0.5}",
    "data.csv": "CSV path with x_* feature columns and optional y / label",
    "data.generator": "{kind: svm_centroids|sigmoid_cauchy|hd_quantile|cubic_regression, n, d, seed, noise_param}",
    "prior": "{kind: uniform_box (lo, hi) | gaussian (mean, cov) | flat}; default gaussian(0, 100 I)",
    "alpha": "PETEL penalty; default alpha_c * n^alpha_exponent",
    "alpha_c, alpha_exponent": "default penalty constants (2.0, 0.5)",
    "beta": "Gibbs learning rate (rate n * beta), default 1",
    "level": "credible / confidence level, default 0.95",
    "iters": "MCMC iterations per chain (sparse chain length for sparse)",
    "burn_in": "draws dropped before summaries; default the adaptation span",
    "adapt_window": "maximum Robbins-Monro adaptation steps, default 1000",
    "chains": "number of chains for sample, default 1",
    "replicates": "coverage replicates, default 200",
    "seed": "master seed, default 0",
    "workers": "worker processes, default the number of logical cores",
    "proposal_c": "random-walk scale constant c in c / sqrt(n), default 2",
    "init": "erm | zeros | gaussian, or an explicit vector (or one vector per chain)",
    "init_mean, init_cov": "mean and diagonal covariance for gaussian inits",
    "prerun_iters": "PETEL pre-run at alpha = n whose late mean becomes the init",
    "boot_B": "bootstrap resamples, default 500",
    "optimizer": "{method: subgradient|exact, step, iters} for bootstrap resamples",
    "cg": "{sa_iters, boot_B, chain_iters} for calibrated Gibbs",
    "sparse": "{s0, beta_c, hamming_radius, eps, burn_in} for the sparse sampler",
    "tau": "quantile level of the ALD working likelihood, default 0.5",
    "theta_star": "target parameter for coverage; default the generator's",
    "output": "{dir, prefix} for written files, default ('.', 'petel')",
}


def _config_help() -> str:
    w = max(len(k) for k in CONFIG_KEYS)
    lines = ["config keys (JSON):"]
    lines += [f"  {k.ljust(w)}  {v}" for k, v in CONFIG_KEYS.items()]
    lines.append("")
    lines.append("exit codes: 1 config error, 2 data error, 3 numerical failure")
    return "\n".join(lines)


# config handling -----------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        cfg = {}
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    validate_config(cfg)
    return cfg


def validate_config(cfg) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from e


def apply_overrides(cfg: dict, args) -> dict:
    """Flags override config keys (flags > config > defaults)."""
    out = copy.deepcopy(cfg)
    for key in ("seed", "iters", "chains", "replicates", "workers", "alpha", "level", "burn_in"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "method", None):
        out["method"] = args.method
    if getattr(args, "output_dir", None):
        out.setdefault("output", {})["dir"] = args.output_dir
    if getattr(args, "prefix", None):
        out.setdefault("output", {})["prefix"] = args.prefix
    if getattr(args, "hamming_radius", None) is not None:
        out.setdefault("sparse", {})["hamming_radius"] = args.hamming_radius
    if getattr(args, "csv", None):
        out["data"] = {"csv": args.csv}
    validate_config(out)
    return out


def _echo(cfg: dict) -> dict:
    e = copy.deepcopy(cfg)
    e.pop("workers", None)  # does not affect results
    return e


def _out_path(cfg, name):
    o = cfg.get("output", {})
    d = o.get("dir", ".")
    os.makedirs(d, exist_ok=True)
    return os.path.join(d, f"{o.get('prefix', 'petel')}_{name}")


def _comment(cfg) -> str:
    return "# config=" + json.dumps(_echo(cfg), sort_keys=True, separators=(",", ":"))


def load_data(cfg) -> Dataset:
    data = cfg.get("data")
    if not data:
        raise ConfigError("config needs 'data' (csv or generator)")
    if "csv" in data:
        if not os.path.exists(data["csv"]):
            raise exc.DataError(f"data file not found: {data['csv']}")
        return Dataset.from_csv(data["csv"])
    if "generator" in data:
        return generator_spec(cfg).generate()
    raise ConfigError("config 'data' needs 'csv' or 'generator'")


def generator_spec(cfg) -> GeneratorSpec:
    g = cfg.get("data", {}).get("generator")
    if g is None:
        raise ConfigError("this command needs data.generator")
    try:
        return GeneratorSpec(g["kind"], g["n"], g.get("d"), g.get("seed", 0), g.get("noise_param", "variance"))
    except ValueError as e:
        raise ConfigError(str(e)) from e


_DEFAULT_LOSS = {
    "svm_centroids": "smoothed_hinge",
    "sigmoid_cauchy": "huber_sigmoid",
    "hd_quantile": "check",
    "cubic_regression": "cubic_regression",
}


def loss_config(cfg):
    if "loss" in cfg:
        return cfg["loss"]["name"], dict(cfg["loss"].get("params", {}))
    kind = cfg.get("data", {}).get("generator", {}).get("kind")
    if kind is None:
        raise ConfigError("config needs 'loss'")
    return _DEFAULT_LOSS[kind], {}


def _model(cfg):
    name, params = loss_config(cfg)
    try:
        return make_loss(name, **params)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad loss parameters for {name}: {e}") from e


def method_config(cfg, method) -> MethodConfig:
    name, params = loss_config(cfg)
    init = cfg.get("init", "erm")
    opt = cfg.get("optimizer", {})
    cg = cfg.get("cg", {})
    sp = cfg.get("sparse", {})
    kw = dict(
        method=method, loss=name, loss_params=params,
        alpha=cfg.get("alpha"), alpha_c=cfg.get("alpha_c", 2.0), alpha_exponent=cfg.get("alpha_exponent", 0.5),
        gibbs_beta=cfg.get("beta", 1.0), iters=cfg.get("iters", 3000), adapt_window=cfg.get("adapt_window", 1000),
        proposal_c=cfg.get("proposal_c", 2.0), prior=cfg.get("prior"),
        init=init if isinstance(init, str) else "erm",
        init_mean=cfg.get("init_mean"), init_cov=cfg.get("init_cov"),
        prerun_iters=cfg.get("prerun_iters", 0), boot_B=cfg.get("boot_B", 500),
        opt_method=opt.get("method", "subgradient"), opt_step=opt.get("step", 1.0), opt_iters=opt.get("iters", 2000),
        sa_iters=cg.get("sa_iters", 30), cg_boot_B=cg.get("boot_B", 200), cg_chain_iters=cg.get("chain_iters", 2000),
        tau=cfg.get("tau", 0.5), s0=sp.get("s0"), beta_c=sp.get("beta_c", 1.2),
        hamming_radius=sp.get("hamming_radius", 1), smoothing_eps=sp.get("eps"),
    )
    return MethodConfig(**kw)


# subcommands ---------------------------------------------------------------


def _inits(cfg, model, data, prior, chains, seed):
    init = cfg.get("init", "erm")
    d = model.dim(data)
    if isinstance(init, list):
        arr = np.asarray(init, dtype=float)
        if arr.ndim == 1:
            arr = np.tile(arr, (chains, 1))
        if arr.shape != (chains, d):
            raise ConfigError(f"init must be a length-{d} vector or {chains} such vectors")
        return list(arr)
    if init == "zeros":
        return [np.zeros(d)] * chains
    if init == "gaussian":
        mean = np.broadcast_to(np.asarray(cfg.get("init_mean", 0.0), dtype=float), (d,))
        sd = np.sqrt(np.broadcast_to(np.asarray(cfg.get("init_cov", 1.0), dtype=float), (d,)))
        return [mean + sd * make_rng(seed, 7, k).standard_normal(d) for k in range(chains)]
    return [minimize_risk(model, data).theta] * chains


def cmd_sample(cfg) -> list:
    """Run posterior chains and write chain CSV/JSON, summary and diagnostics."""
    method = cfg.get("method", "petel")
    if method not in ("petel", "etel", "gibbs", "cg"):
        raise ConfigError("sample supports methods petel, etel, gibbs and cg")
    data = load_data(cfg)
    model = _model(cfg)
    model.validate(data)
    n, d = data.n, model.dim(data)
    seed = cfg.get("seed", 0)
    iters = cfg.get("iters", 3000)
    chains = cfg.get("chains", 1)
    prior = make_prior(cfg.get("prior"), d)
    inits = _inits(cfg, model, data, prior, chains, seed)
    prop = ProposalConfig(scale_proposal_default(n, cfg.get("proposal_c", 2.0)), adapt_window=cfg.get("adapt_window", 1000))
    meta = {}
    if method == "cg":
        cg = cfg.get("cg", {})
        r = calibrated_gibbs(model, data, cfg.get("level", 0.95), cfg.get("beta", 1.0), cg.get("sa_iters", 30),
                             cg.get("boot_B", 200), cg.get("chain_iters", 2000), seed, prior=prior,
                             proposal_c=cfg.get("proposal_c", 2.0))
        spec = r.spec
        meta["beta"] = r.beta
        prop = ProposalConfig(prop.base_sd / np.sqrt(r.beta), adapt_window=prop.adapt_window)
    elif method == "gibbs":
        spec = PosteriorSpec(model, data, prior, "gibbs", gibbs_rate=n * cfg.get("beta", 1.0))
    elif method == "etel":
        spec = PosteriorSpec(model, data, prior, "etel")
    else:
        alpha = cfg.get("alpha", default_alpha(n, cfg.get("alpha_c", 2.0), cfg.get("alpha_exponent", 0.5)))
        spec = PosteriorSpec(model, data, prior, "petel", alpha_n=alpha)
        meta["alpha"] = alpha
    out = []
    runs = []
    for k, x0 in enumerate(inits):
        ch = run_chain(spec, x0, prop, iters, substream_seed(seed, k))
        runs.append(ch)
        p_csv, p_json = _out_path(cfg, f"chain{k + 1}.csv"), _out_path(cfg, f"chain{k + 1}.json")
        ch.to_csv(p_csv, comment=_comment(cfg))
        obj = ch.to_dict()
        obj["config"] = _echo(cfg)
        obj["metadata"].update(meta)
        obj["metadata"]["chain"] = k + 1
        write_json(obj, p_json)
        out += [p_csv, p_json]
    burn = cfg.get("burn_in", runs[0].burn_in)
    report = diagnostics_report([c.draws for c in runs], burn_in=burn,
                                acceptance_rates=[c.acceptance_rate for c in runs])
    pooled = np.concatenate([c.draws[burn:] for c in runs])
    report["summary"] = summarize(pooled, 0, cfg.get("level", 0.95)).to_dict()
    report["config"] = _echo(cfg)
    path = _out_path(cfg, "diagnostics.json")
    write_json(report, path)
    return out + [path]


COVERAGE_ALL = ("petel", "etel", "gibbs", "cg", "bootstrap")


def cmd_coverage(cfg) -> list:
    """Run the coverage harness for one method or all of them."""
    gen = generator_spec(cfg)
    method = cfg.get("method", "petel")
    methods = COVERAGE_ALL if method == "all" else (method,)
    ts = cfg.get("theta_star")
    out = []
    for m in methods:
        mc = method_config(cfg, m)
        rep = run_coverage(mc, gen, None if ts is None else np.asarray(ts, dtype=float),
                           cfg.get("replicates", 200), cfg.get("level", 0.95), cfg.get("seed", 0),
                           cfg.get("workers", os.cpu_count() or 1))
        rep.config = {"method_config": rep.config, "input": _echo(cfg)}
        pj, pc = _out_path(cfg, f"{m}_coverage.json"), _out_path(cfg, f"{m}_coverage.csv")
        rep.to_json(pj)
        rep.to_csv(pc, comment=_comment(cfg))
        out += [pj, pc]
    return out


def cmd_sparse(cfg) -> list:
    """Stepwise model search followed by the independence sampler."""
    data = load_data(cfg)
    if "loss" not in cfg and "generator" not in cfg.get("data", {}):
        cfg = dict(cfg, loss={"name": "check", "params": {}})
    model = _model(cfg)
    model.validate(data)
    n, d = data.n, data.p
    sp_cfg = cfg.get("sparse", {})
    try:
        sp = default_sparse_prior(n, d, s0=sp_cfg.get("s0"), beta=sp_cfg.get("beta_c", 1.2) * np.log(d))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    alpha = cfg.get("alpha", default_alpha(n, cfg.get("alpha_c", 2.0), cfg.get("alpha_exponent", 0.5)))
    cache = {}
    sel = stepwise_search(model, data, sp, alpha, cache=cache)
    chain = run_sparse_chain(model, data, sp, alpha, sel, sp_cfg.get("hamming_radius", 1),
                             cfg.get("iters", 3000), cfg.get("seed", 0), sp_cfg.get("eps"), cache)
    burn = sp_cfg.get("burn_in", 0)
    p_csv = _out_path(cfg, "sparse_chain.csv")
    chain.to_csv(p_csv, comment=_comment(cfg))
    rep = chain.report(burn)
    rep["alpha"] = alpha
    rep["beta_nd"] = sp.beta_nd
    rep["s0"] = sp.s0
    rep["config"] = _echo(cfg)
    p_json = _out_path(cfg, "sparse_report.json")
    write_json(rep, p_json)
    return [p_csv, p_json]


def _read_chain_file(path):
    if not os.path.exists(path):
        raise exc.DataError(f"chain file not found: {path}")
    try:
        if path.endswith(".json"):
            return Chain.from_json(path)
        return read_chain_csv(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise exc.DataError(f"cannot parse chain file {path}: {e}") from e


def cmd_diagnose(paths, output, burn_in=0) -> list:
    """Gelman-Rubin (split-half for one file), ESS and acceptance rates."""
    chains = [_read_chain_file(p) for p in paths]
    shapes = {c.draws.shape for c in chains}
    if len(shapes) != 1:
        raise ConfigError(f"chains have mismatched shapes: {sorted(shapes)}")
    rep = diagnostics_report([c.draws for c in chains], burn_in=burn_in,
                             acceptance_rates=[c.acceptance_rate for c in chains])
    rep["inputs"] = [os.path.basename(p) for p in paths]
    d = os.path.dirname(output)
    if d:
        os.makedirs(d, exist_ok=True)
    write_json(rep, output)
    return [output]


def cmd_gen(cfg, output) -> list:
    """Write a generated dataset as CSV."""
    gen = generator_spec(cfg)
    data = gen.generate()
    d = os.path.dirname(output)
    if d:
        os.makedirs(d, exist_ok=True)
    data.to_csv(output, comment=_comment(cfg))
    return [output]


# entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(
        prog="petel",
        description="PETEL posterior sampling, baselines and coverage benchmarks.",
        epilog=_config_help(),
        formatter_class=fmt,
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, chains=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--level", type=float)
        sp.add_argument("--burn-in", dest="burn_in", type=int)
        sp.add_argument("--output-dir", dest="output_dir")
        sp.add_argument("--prefix")
        sp.add_argument("--csv", help="data CSV (overrides data in the config)")
        if chains:
            sp.add_argument("--chains", type=int)

    s = sub.add_parser("sample", help="run posterior chains", epilog=_config_help(), formatter_class=fmt)
    common(s, chains=True)
    s.add_argument("--method", choices=["petel", "etel", "gibbs", "cg"])
    s.add_argument("--workers", type=int)

    c = sub.add_parser("coverage", help="replicated coverage experiment", epilog=_config_help(), formatter_class=fmt)
    common(c)
    c.add_argument("--method", choices=list(METHODS) + ["all"])
    c.add_argument("--replicates", type=int)
    c.add_argument("--workers", type=int, help="worker processes (default: logical cores)")

    sp = sub.add_parser("sparse", help="stepwise search and sparse sampler", epilog=_config_help(),
                        formatter_class=fmt)
    common(sp)
    sp.add_argument("--hamming-radius", dest="hamming_radius", type=int)

    dg = sub.add_parser("diagnose", help="diagnostics for chain files")
    dg.add_argument("files", nargs="+", help="chain CSV or JSON files")
    dg.add_argument("--output", default="diagnostics.json")
    dg.add_argument("--burn-in", dest="burn_in", type=int, default=0)

    g = sub.add_parser("gen", help="write a generated dataset", epilog=_config_help(), formatter_class=fmt)
    g.add_argument("--config")
    g.add_argument("--kind", choices=list(GENERATOR_KINDS))
    g.add_argument("--n", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise-param", dest="noise_param", choices=["variance", "sd"])
    g.add_argument("--output", required=True)
    return p


def run(argv=None) -> list:
    args = build_parser().parse_args(argv)
    if args.command == "diagnose":
        return cmd_diagnose(args.files, args.output, args.burn_in)
    cfg = load_config(getattr(args, "config", None))
    if args.command == "gen":
        g = dict(cfg.get("data", {}).get("generator", {}))
        for key in ("kind", "n", "d", "seed", "noise_param"):
            v = getattr(args, key)
            if v is not None:
                g[key] = v
        cfg = dict(cfg, data={"generator": g})
        validate_config(cfg)
        return cmd_gen(cfg, args.output)
    cfg = apply_overrides(cfg, args)
    if args.command == "sample":
        return cmd_sample(cfg)
    if args.command == "coverage":
        return cmd_coverage(cfg)
    return cmd_sparse(cfg)


NUMERIC_ERRORS = (
    exc.InitOffSupport, exc.NonFiniteDensityAtInit, exc.DualUnbounded, exc.SingularHessian,
    exc.NoAlphaFound, exc.TooFewDraws, exc.NonConvergence, exc.ExcessiveFailures, exc.NonFiniteLoss,
    ArithmeticError, np.linalg.LinAlgError,
)


def main(argv=None) -> int:
    try:
        for path in run(argv):
            print(path)
        return 0
    except ConfigError as e:
        print(f"petel: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except exc.DataError as e:
        print(f"petel: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as e:
        print(f"petel: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

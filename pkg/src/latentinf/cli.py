"""Command-line front end.

    latentinf ingest-check --input edges.txt
    latentinf fit --input edges.txt --r 2 --output fit.csv
    latentinf infer --input edges.txt --fit fit.csv --nodes hubs:5 --output report.csv
    latentinf simulate --setting bounded --n 500 --seed 7 --output sims/
    latentinf experiment coverage --setting bounded,sparse --n-grid 500 --reps 200 --output cov.csv

Options may also come from a JSON file given with ``--config``; flags on the
command line override values from the file. Exit status is 0 on success, 1 on
a runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .estimation import FitConfig, FitError, estimate_rho, fit_pgd, svt_init
from .experiments import (
    DESK_GRID,
    FULL_GRID,
    RunOptions,
    records_to_rows,
    resolve_workers,
    run_consistency,
    run_coverage,
    run_dependence_diagnostic,
    run_distribution,
)
from .inference import (
    InferenceUnavailable,
    ci_individual,
    ci_link_probability,
    confidence_ellipse,
    covariance_bundle,
)
from .io import (
    EdgeListError,
    IngestReport,
    fmt,
    header_line,
    ingest_edge_list,
    read_fit,
    read_network,
    write_dense_csv,
    write_edge_list,
    write_fit,
    write_table,
)
from .model import Family, ModelSpec, Network, total_loglik
from .simulation import SimKind, SimSetting, cached_truth, gen_replication_stream

log = logging.getLogger("latentinf")

EXPERIMENTS = ("consistency", "coverage", "distribution", "dependence")

# Defaults applied before the config file and the command line.
DEFAULTS = {
    "family": "bernoulli",
    "r": 2,
    "M": 10.0,
    "delta": 1.0,
    "sparse": False,
    "level": 0.95,
    "seed": 0,
    "format": None,
    "max_iters": 2000,
    "rel_tol": 1e-12,
    "method": "newton",
    "c_tau": 2.01,
    "eps": 1e-3,
    "nodes": None,
    "pairs": None,
    "setting": "bounded",
    "n": 500,
    "n_grid": None,
    "reps": None,
    "kappa": 0.5,
    "hidden_prop": 0.5,
    "threads": None,
    "full": False,
    "align": "procrustes",
    "all_components": False,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- options

def _add_model_opts(p):
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--r", type=int, help="latent dimension")
    p.add_argument("--M", type=float, help="radius of the per-node parameter ball")
    p.add_argument("--delta", type=float, help="Gaussian noise scale")
    p.add_argument("--sparse", action="store_true", default=argparse.SUPPRESS,
                   help="estimate a global offset rho and scale inference by exp(rho)")


def _add_fit_opts(p):
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--rel-tol", dest="rel_tol", type=float)
    p.add_argument("--method", choices=["newton", "gradient"])
    p.add_argument("--c-tau", dest="c_tau", type=float, help="spectral threshold constant")
    p.add_argument("--eps", type=float, help="probability clipping for the spectral start")


def _add_common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentinf", description=__doc__.split("\n")[0],
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"latentinf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-check", argument_default=argparse.SUPPRESS,
                       help="parse an edge list and report its largest component")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--all-components", dest="all_components", action="store_true")
    p.add_argument("--output", help="optional edge-list copy of the retained network")

    p = sub.add_parser("fit", argument_default=argparse.SUPPRESS, help="fit the model to a network")
    _add_common(p)
    p.add_argument("--input", required=True, help="edge list, or dense matrix if it ends in .csv")
    p.add_argument("--format", choices=["edgelist", "dense"])
    p.add_argument("--output", required=True)
    _add_model_opts(p)
    _add_fit_opts(p)

    p = sub.add_parser("infer", argument_default=argparse.SUPPRESS,
                       help="confidence intervals, ellipses and link-probability intervals")
    _add_common(p)
    p.add_argument("--input", required=True, help="the network the fit was computed on")
    p.add_argument("--format", choices=["edgelist", "dense"])
    p.add_argument("--fit", required=True, help="fit file written by 'latentinf fit'")
    p.add_argument("--output", required=True)
    p.add_argument("--level", type=float)
    p.add_argument("--nodes", help="comma-separated labels, 'all', or 'hubs:D' for degree > D")
    p.add_argument("--pairs", help="comma-separated label pairs a:b")

    p = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                       help="write simulated networks")
    _add_common(p)
    p.add_argument("--setting", choices=[k.value for k in SimKind])
    p.add_argument("--n", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--reps", type=int, help="number of replications to write (default 1)")
    p.add_argument("--kappa", type=float, help="chain correlation strength (dependent1)")
    p.add_argument("--hidden-prop", dest="hidden_prop", type=float,
                   help="share of nodes with a hidden factor (dependent2)")
    p.add_argument("--delta", type=float)
    p.add_argument("--format", choices=["edgelist", "dense"])
    p.add_argument("--output", required=True, help="output directory")

    p = sub.add_parser("experiment", argument_default=argparse.SUPPRESS,
                       help="replicated simulation studies")
    _add_common(p)
    p.add_argument("kind", choices=EXPERIMENTS)
    p.add_argument("--setting", help="comma-separated settings")
    p.add_argument("--n-grid", dest="n_grid", help="comma-separated network sizes")
    p.add_argument("--full", action="store_true", help=f"use the grid {FULL_GRID}")
    p.add_argument("--reps", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--hidden-prop", dest="hidden_prop", type=float)
    p.add_argument("--threads", type=int, help="worker processes (default: LATENTINF_THREADS or all cores)")
    p.add_argument("--align", choices=["procrustes", "sign"])
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--output", required=True)
    return parser


def resolve_options(ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    given = vars(ns)
    if given.get("config"):
        try:
            cfg = json.loads(Path(given["config"]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(cfg) - set(DEFAULTS) - {"input", "output", "fit", "kind"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update({k: v for k, v in given.items() if k != "config"})
    return opts


# Where results go and how many workers compute them do not change the data.
_NOT_HASHED = ("verbose", "threads", "output")


def _config_record(opts: dict) -> dict:
    return {k: v for k, v in sorted(opts.items()) if k not in _NOT_HASHED}


def _model_spec(opts) -> ModelSpec:
    try:
        return ModelSpec(family=opts["family"], r=opts["r"], M=opts["M"], delta=opts["delta"],
                         sparse_mode=bool(opts["sparse"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _fit_config(opts) -> FitConfig:
    try:
        return FitConfig(max_iters=opts["max_iters"], rel_tol=opts["rel_tol"], method=opts["method"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _int_list(text, name) -> List[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{name} must be comma-separated integers") from None
    if not vals:
        raise UsageError(f"{name} is empty")
    return vals


# ---------------------------------------------------------------- commands

def cmd_ingest_check(opts) -> int:
    report = IngestReport()
    net = ingest_edge_list(opts["input"], opts["family"], not opts["all_components"], report)
    print(f"lines={report.lines} edges_read={report.raw_edges} duplicates={report.duplicates} "
          f"self_loops={report.self_loops}")
    print(f"nodes={report.nodes_total} components={report.components}")
    print(f"retained n={net.n} edges={net.n_edges} density={net.density():.6g}")
    if opts.get("output"):
        write_edge_list(net, opts["output"], header_line("network", _config_record(opts), opts["seed"]))
    return 0


def cmd_fit(opts) -> int:
    spec = _model_spec(opts)
    cfg = _fit_config(opts)
    net = read_network(opts["input"], spec.family, opts["format"])
    if spec.r >= net.n:
        raise UsageError(f"r={spec.r} must be smaller than the number of nodes ({net.n})")
    init = svt_init(net, spec, c_tau=opts["c_tau"], eps=opts["eps"])
    res = fit_pgd(net, spec, cfg, init)
    rho_hat, _ = estimate_rho(res.state)
    meta = {
        "n": net.n,
        "edges": net.n_edges,
        "iterations": res.iterations,
        "converged": res.converged,
        "stop_reason": res.stop_reason,
        "loglik": total_loglik(net, res.state, spec),
        "score_norm": res.score_norm,
        "rho_hat": rho_hat,
    }
    write_fit(opts["output"], net, res.state, spec, meta,
              header_line("fit", _config_record(opts), opts["seed"]))
    log.info("fit: %d iterations, converged=%s, score norm %.3g", res.iterations, res.converged,
             res.score_norm)
    if not res.converged:
        log.warning("optimiser stopped at max_iters without meeting the tolerance")
    return 0


def _lookup(net: Network, label) -> int:
    try:
        return net.label_index(label)
    except (KeyError, ValueError):
        raise UsageError(f"unknown node label {label!r}") from None


def _select_nodes(net: Network, text) -> List[int]:
    if text is None:
        return []
    text = str(text).strip()
    if text == "all":
        return list(range(net.n))
    if text.startswith("hubs:"):
        try:
            d = float(text[5:])
        except ValueError:
            raise UsageError("hubs selection must look like hubs:5") from None
        return [int(i) for i in np.flatnonzero(net.degrees() > d)]
    return [_lookup(net, lab.strip()) for lab in text.split(",") if lab.strip()]


def _select_pairs(net: Network, text):
    if text is None:
        return []
    out = []
    for tok in str(text).split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok.count(":") != 1:
            raise UsageError(f"pair {tok!r} must look like a:b")
        a, b = tok.split(":")
        i, j = _lookup(net, a), _lookup(net, b)
        if i == j:
            raise UsageError(f"pair {tok!r} names the same node twice (no self-loops)")
        out.append((i, j))
    return out


INFER_COLUMNS = ("kind", "node", "node2", "param", "estimate", "lower", "upper", "std_error",
                 "semi_major", "semi_minor", "angle", "cov_11", "cov_12", "cov_22", "status")


def cmd_infer(opts) -> int:
    level = opts["level"]
    if not 0 < level < 1:
        raise UsageError("--level must lie in (0, 1)")
    art = read_fit(opts["fit"])
    spec = art.spec
    net = read_network(opts["input"], spec.family, opts["format"])
    labels = net.labels if net.labels is not None else tuple(str(i) for i in range(net.n))
    if tuple(labels) != tuple(art.labels):
        raise UsageError("fit file and network have different node labels")
    state = art.state
    nodes = _select_nodes(net, opts["nodes"])
    pairs = _select_pairs(net, opts["pairs"])
    if not nodes and not pairs:
        raise UsageError("nothing requested; give --nodes and/or --pairs")
    names = [f"z{k + 1}" for k in range(spec.r)] + ["alpha"]

    rows = []
    for i in nodes:
        lab = labels[i]
        try:
            bundle = covariance_bundle(net, state, spec, (i,))
        except InferenceUnavailable as exc:
            rows.append({"kind": "node", "node": lab, "status": f"unavailable: {exc}"})
            continue
        intervals, _ = ci_individual(bundle, i, level)
        se = np.sqrt(np.diag(bundle.scaled_covariance(i)))
        for k, name in enumerate(names):
            rows.append({"kind": "node", "node": lab, "param": name,
                         "estimate": float(bundle.centers[0, k]), "lower": float(intervals[k, 0]),
                         "upper": float(intervals[k, 1]), "std_error": float(se[k]), "status": "ok"})
        if spec.r == 2:
            el = confidence_ellipse(bundle, i, level)
            rows.append({"kind": "ellipse", "node": lab, "param": "z",
                         "semi_major": float(el.semi_axes[0]), "semi_minor": float(el.semi_axes[1]),
                         "angle": el.angle, "cov_11": float(el.covariance[0, 0]),
                         "cov_12": float(el.covariance[0, 1]), "cov_22": float(el.covariance[1, 1]),
                         "status": "ok"})
    for i, j in pairs:
        base = {"kind": "pair", "node": labels[i], "node2": labels[j], "param": "theta"}
        if spec.family is not Family.BERNOULLI:
            rows.append({**base, "status": "unavailable: link probabilities need Bernoulli edges"})
            continue
        try:
            li = ci_link_probability(net, state, spec, i, j, level)
        except InferenceUnavailable as exc:
            rows.append({**base, "status": f"unavailable: {exc}"})
            continue
        rows.append({**base, "estimate": li.theta_hat, "lower": li.lower, "upper": li.upper,
                     "status": "ok"})
    write_table(opts["output"], rows, INFER_COLUMNS,
                header_line("inference", _config_record(opts), opts["seed"]))
    return 0


def _sim_setting(opts, kind=None, n=None) -> SimSetting:
    try:
        return SimSetting(kind=kind or opts["setting"], n=int(n or opts["n"]), r=int(opts["r"]),
                          dep_kappa=float(opts["kappa"]), hidden_prop=float(opts["hidden_prop"]),
                          seed=int(opts["seed"]), delta=float(opts["delta"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_simulate(opts) -> int:
    setting = _sim_setting(opts)
    reps = 1 if opts["reps"] is None else int(opts["reps"])
    if reps < 1:
        raise UsageError("--reps must be positive")
    dense = opts["format"] != "edgelist"  # dense keeps isolated nodes
    out = Path(opts["output"])
    out.mkdir(parents=True, exist_ok=True)
    config = _config_record(opts)
    truth = cached_truth(setting)
    stem = f"{setting.kind.value}_n{setting.n}_seed{setting.seed}"
    write_fit(out / f"{stem}_truth.csv", Network(np.zeros((setting.n, setting.n)), setting.family),
              truth.state, setting.model_spec(), {"kind": "truth"},
              header_line("truth", config, setting.seed))
    for rep in range(reps):
        net, _ = gen_replication_stream(setting, rep)
        head = header_line("network", {**config, "rep": rep}, setting.seed)
        if dense:
            write_dense_csv(net, out / f"{stem}_rep{rep}.csv", head)
        else:
            write_edge_list(net, out / f"{stem}_rep{rep}.txt", head)
    print(f"wrote {reps} network(s) to {out}")
    return 0


def cmd_experiment(opts) -> int:
    kind = opts["kind"]
    settings = [s.strip() for s in str(opts["setting"]).split(",") if s.strip()]
    if opts["n_grid"] is not None:
        grid = _int_list(opts["n_grid"], "--n-grid")
    elif opts["full"]:
        grid = list(FULL_GRID)
    else:
        grid = {"coverage": [500], "distribution": [800]}.get(kind, list(DESK_GRID))
    reps = opts["reps"]
    if reps is None:
        reps = {"consistency": 100, "dependence": 10}.get(kind, 200)
    level = float(opts["level"])
    if not 0 < level < 1:
        raise UsageError("--level must lie in (0, 1)")
    fit_cfg = FitConfig(max_iters=int(opts["max_iters"]))
    run = RunOptions(fit_cfg, level, opts["align"], resolve_workers(opts["threads"]))
    config = _config_record({**opts, "n_grid": grid, "reps": reps})
    head = header_line(f"experiment-{kind}", config, opts["seed"])
    sims = [_sim_setting(opts, kind=s, n=grid[0]) for s in settings]
    try:
        if kind == "consistency":
            _experiment_consistency(sims, grid, reps, run, head, opts["output"])
        elif kind == "coverage":
            recs = []
            for s in sims:
                recs.extend(run_coverage(s, grid, reps, level, run))
            write_table(opts["output"], records_to_rows(recs),
                        ("setting", "n", "target", "rate", "se", "excluded", "covered", "total"),
                        head)
        elif kind == "distribution":
            rows, extra = [], []
            for s in sims:
                for n in grid:
                    d = run_distribution(s, n, reps, run)
                    extra.append(f"# ks setting={d.setting} n={n} statistic={fmt(d.ks_statistic)} "
                                 f"pvalue={fmt(d.ks_pvalue)} excluded={d.excluded}\n")
                    rows.extend({"setting": d.setting, "n": n, "prob": q[0], "theoretical": q[1],
                                 "empirical": q[2]} for q in d.qq)
            write_table(opts["output"], rows, ("setting", "n", "prob", "theoretical", "empirical"),
                        head + "".join(extra))
        else:
            recs = run_dependence_diagnostic(sims, grid, reps, run)
            write_table(opts["output"], records_to_rows(recs),
                        ("setting", "label", "n", "reps", "raw_mean", "normalized_mean", "flagged"),
                        head)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return 0


def _experiment_consistency(sims, grid, reps, run, head, path):
    rows, extra = [], []
    metrics = ("delta_Z", "delta_alpha", "delta_rho", "delta_var", "mse_Z", "mse_alpha")
    for s in sims:
        res = run_consistency(s, grid, reps, run)
        for n in grid:
            row = {"setting": res.setting, "n": n, "excluded": res.excluded[n]}
            row.update({m: res.means[m][n] for m in metrics})
            rows.append(row)
        extra.append(f"# slopes setting={res.setting} "
                     + " ".join(f"{m}={fmt(res.slopes.get(m))}" for m in metrics) + "\n")
    write_table(path, rows, ("setting", "n", "excluded") + metrics, head + "".join(extra))


COMMANDS = {
    "ingest-check": cmd_ingest_check,
    "fit": cmd_fit,
    "infer": cmd_infer,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.DEBUG if getattr(ns, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = resolve_options(ns)
        return COMMANDS[ns.command](opts)
    except UsageError as exc:
        print(f"latentinf {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FitError, EdgeListError, OSError, ValueError, InferenceUnavailable) as exc:
        print(f"latentinf {ns.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

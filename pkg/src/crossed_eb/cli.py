"""Command-line entry point: ``crossed-eb {fit,simulate,bench,compare,generate}``.

Each command reads an optional JSON config (``--config``), applies the
command-line overrides, writes the effective config to ``OUT/config.json``
and then its outputs. Running again with ``--config OUT/config.json``
reproduces them.

Exit codes: 0 success, 1 input error, 2 EM did not converge, 3 numerical
failure (including engines disagreeing in ``compare``).
"""

from __future__ import annotations

import argparse
import csv
import importlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .em import ENGINES, EmConfig, EmTrace, TraceRow, em_fit
from .model import (LOG_2PI, FeatureMap, InputError, NumericalError, ObservationTable,
                    PosteriorSummary, Priors, VarianceComponents, builtin_feature_map,
                    prior_posterior, read_observation_table, spd_logdet,
                    write_observation_table)
from .simulate import (GenConfig, SpeedConfig, TrialConfig, draw_batch, random_instance,
                       run_speed_assessment, run_trial_replications)

log = logging.getLogger("crossed_eb")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULTS = {
    "fit": {"data": None, "feature_map": "linear", "engine": "streamlined", "tol": 1e-5,
            "max_iter": 100, "init": None, "priors": None},
    "bench": {"sizes": [10, 50, 100], "reps": 50, "engines": list(ENGINES),
              "gen": {}, "tol": 1e-5, "max_iter": 100, "budget_seconds": 45 * 60.0,
              "memory_budget": None, "seed": 0},
    "simulate": {"trial": {}, "truth": {}, "engines": ["streamlined"], "reps": 10, "seed": 0},
    "compare": {"instances": 20, "seed": 0, "max_iter": 50, "tol": 1e-8,
                "trace_rtol": 1e-8, "vc_rtol": 1e-7},
    "generate": {"gen": {}, "feature_map": "linear"},
}


def _dataclass_dict(cls, overrides: dict) -> dict:
    names = {f.name for f in fields(cls)}
    bad = set(overrides) - names
    if bad:
        raise InputError(f"unknown {cls.__name__} key(s): {sorted(bad)}")
    d = asdict(cls())
    d.update(overrides)
    return _jsonable(d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def effective_config(command: str, args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(user, dict):
            raise InputError("config must be a JSON object")
        user.pop("command", None)
        user.pop("workers", None)
        bad = set(user) - set(cfg)
        if bad:
            raise InputError(f"unknown {command} config key(s): {sorted(bad)}")
        cfg.update(user)
    if getattr(args, "data", None):
        cfg["data"] = args.data
    if args.engine is not None:
        if "engine" in cfg:
            cfg["engine"] = args.engine
        elif "engines" in cfg:
            cfg["engines"] = [args.engine]
    if args.seed is not None and command != "fit":  # fitting draws nothing
        if command == "generate":
            cfg["gen"] = {**cfg["gen"], "seed": args.seed}
        else:
            cfg["seed"] = args.seed
    if command == "bench":
        cfg["gen"] = _dataclass_dict(GenConfig, cfg["gen"])
    elif command == "generate":
        cfg["gen"] = _dataclass_dict(GenConfig, cfg["gen"])
    elif command == "simulate":
        cfg["trial"] = _dataclass_dict(TrialConfig, cfg["trial"])
        cfg["truth"] = _dataclass_dict(GenConfig, cfg["truth"])
    return cfg


def resolve_feature_map(spec: str, context_dim: int) -> FeatureMap:
    """A built-in name, or ``module:attr`` naming a FeatureMap or a factory
    taking the context dimension."""
    if ":" not in spec:
        return builtin_feature_map(spec, context_dim)
    mod, _, attr = spec.partition(":")
    try:
        obj = getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as exc:
        raise InputError(f"cannot load feature map {spec!r}: {exc}") from None
    fm = obj if isinstance(obj, FeatureMap) else obj(context_dim)
    if not isinstance(fm, FeatureMap):
        raise InputError(f"{spec!r} did not produce a FeatureMap")
    return fm


def _priors_from(cfg, p: int) -> Priors:
    if cfg.get("priors") is None:
        return Priors.default(p)
    pr = cfg["priors"]
    return Priors(np.asarray(pr["mu_beta"], float), np.asarray(pr["Sigma_beta"], float))


def write_posterior_csv(path, post: PosteriorSummary):
    """Marginal posterior mean and sd of every effect, one row per coordinate."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["effect", "index", "component", "mean", "sd"])
        sd = np.sqrt(np.diag(post.Sigma_beta))
        for k in range(post.p):
            w.writerow(["beta", "", k + 1, repr(float(post.mu_beta[k])), repr(float(sd[k]))])
        for tag, mu, S in (("u", post.mu_u, post.Sigma_u), ("v", post.mu_v, post.Sigma_v)):
            sds = np.sqrt(np.diagonal(S, axis1=1, axis2=2))
            for i in range(mu.shape[0]):
                for k in range(mu.shape[1]):
                    w.writerow([tag, i + 1, k + 1, repr(float(mu[i, k])), repr(float(sds[i, k]))])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_fit(cfg: dict, out: Path, workers: int) -> int:
    if not cfg.get("data"):
        raise InputError("fit needs a data CSV (positional argument or config key 'data')")
    tab = read_observation_table(cfg["data"], allow_empty=True)
    fm = resolve_feature_map(cfg["feature_map"], max(tab.context_dim, 1))
    priors = _priors_from(cfg, fm.p)
    init = (VarianceComponents.from_dict(cfg["init"]) if cfg.get("init")
            else VarianceComponents.identity(fm.q_u, fm.q_v))
    if (init.q_u, init.q_v) != (fm.q_u, fm.q_v):
        raise InputError(f"init dimensions {(init.q_u, init.q_v)} do not match feature map")
    em_cfg = EmConfig(tol=cfg["tol"], max_iter=cfg["max_iter"], init=init)
    if len(tab) == 0:
        # no data: the posterior is the prior and EM has nothing to update
        post = prior_posterior(priors, init, 0, 0)
        trace = EmTrace([TraceRow(0, init, _prior_only_ecll(priors), 0.0, 0.0)], True)
        vc = init
    else:
        data = tab.dataset(fm)
        fit = em_fit(data, priors, em_cfg, engine=cfg["engine"])
        vc, post, trace = fit
    _write_json(out / "vc.json", {**vc.to_dict(), "converged": trace.converged,
                                  "iterations": trace.n_iter, "engine": cfg["engine"]})
    trace.to_csv(out / "trace.csv")
    write_posterior_csv(out / "posterior.csv", post)
    log.info("fit: %s after %d iterations", "converged" if trace.converged else "max_iter reached",
             trace.n_iter)
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


def _prior_only_ecll(priors: Priors) -> float:
    # E[log N(beta; mu, S)] for beta ~ N(mu, S); no users, times or observations
    p = priors.p
    return -0.5 * (p * LOG_2PI + spd_logdet(priors.Sigma_beta) + p)


def cmd_bench(cfg: dict, out: Path, workers: int) -> int:
    sc = SpeedConfig(sizes=tuple(int(m) for m in cfg["sizes"]), reps=int(cfg["reps"]),
                     engines=tuple(cfg["engines"]), gen=GenConfig(**_tuple_fields(cfg["gen"])),
                     tol=cfg["tol"], max_iter=cfg["max_iter"],
                     budget_seconds=cfg["budget_seconds"], memory_budget=cfg["memory_budget"],
                     seed=int(cfg["seed"]))
    res = run_speed_assessment(sc, workers=workers)
    res.write(out)
    return EXIT_OK


def _tuple_fields(d: dict) -> dict:
    return {k: _tuplify(v) for k, v in d.items()}


def cmd_simulate(cfg: dict, out: Path, workers: int) -> int:
    tc = TrialConfig(**{**_tuple_fields(cfg["trial"]), "seed": int(cfg["seed"])})
    truth = GenConfig(**_tuple_fields(cfg["truth"]))
    table = run_trial_replications(tc, tuple(cfg["engines"]), int(cfg["reps"]), truth, workers)
    table.write(out / "regret.csv")
    return EXIT_OK


def compare_engines(data, priors, em_cfg: EmConfig, trace_rtol: float, vc_rtol: float):
    a = em_fit(data, priors, em_cfg, engine="naive")
    b = em_fit(data, priors, em_cfg, engine="streamlined")
    same_len = len(a.trace) == len(b.trace)
    n = min(len(a.trace), len(b.trace))
    ea, eb = a.trace.ecll[:n], b.trace.ecll[:n]
    d_trace = float(np.max(np.abs(ea - eb) / np.maximum(np.abs(ea), 1.0)))
    va = np.array(list(a.vc.components().values()))
    vb = np.array(list(b.vc.components().values()))
    d_vc = float(np.max(np.abs(va - vb) / np.maximum(np.abs(va), 1e-12)))
    ok = same_len and d_trace <= trace_rtol and d_vc <= vc_rtol
    return ok, a, b, d_trace, d_vc


def cmd_compare(cfg: dict, out: Path, workers: int) -> int:
    em_cfg = EmConfig(tol=cfg["tol"], max_iter=cfg["max_iter"])
    n_bad = 0
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "m", "t", "N", "iter_naive", "iter_streamlined",
                    "max_rel_trace_diff", "max_rel_vc_diff", "ok"])
        for k in range(int(cfg["instances"])):
            data, priors = random_instance(int(cfg["seed"]) * 100_003 + k)
            ok, a, b, dt, dv = compare_engines(data, priors, em_cfg, cfg["trace_rtol"],
                                               cfg["vc_rtol"])
            n_bad += not ok
            w.writerow([k, data.m, data.t, data.N, a.trace.n_iter, b.trace.n_iter,
                        repr(dt), repr(dv), int(ok)])
    if n_bad:
        log.error("compare: %d of %d instances diverge", n_bad, cfg["instances"])
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_generate(cfg: dict, out: Path, workers: int) -> int:
    gc = GenConfig(**_tuple_fields(cfg["gen"]))
    fm = resolve_feature_map(cfg["feature_map"], 1)
    b = draw_batch(gc, fm)
    write_observation_table(out / "data.csv", ObservationTable(
        b.user + 1, b.time + 1, b.replicate + 1, b.A, b.y, b.X))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "bench": cmd_bench, "simulate": cmd_simulate,
            "compare": cmd_compare, "generate": cmd_generate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config; defaults fill the rest")
    common.add_argument("--engine", choices=ENGINES, help="EM engine (overrides config)")
    common.add_argument("--seed", type=int, help="base random seed (overrides config)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory")
    common.add_argument("--workers", type=int, default=None,
                        help="parallel replications (default: physical cores)")
    ap = argparse.ArgumentParser(prog="crossed-eb", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fit", parents=[common], help="fit variance components to a CSV")
    p.add_argument("data", nargs="?", help="observations CSV")
    sub.add_parser("bench", parents=[common], help="batch timing / accuracy study")
    sub.add_parser("simulate", parents=[common], help="staggered-entry bandit trial")
    sub.add_parser("compare", parents=[common], help="naive vs streamlined on random instances")
    sub.add_parser("generate", parents=[common], help="write a simulated batch as data.csv")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    debug = os.environ.get("CROSSED_EB_DEBUG", "") not in ("", "0")
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args.command, args)
        if args.workers is not None and args.workers < 1:
            raise InputError("--workers must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": args.command, **cfg})
        return COMMANDS[args.command](cfg, out, args.workers)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (OSError, KeyError, TypeError, ValueError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INPUT
    except (NumericalError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``barrier-bsde {price,grid,check}``.

Option values resolve in this order: command-line flag, environment
variable (``BARRIER_BSDE_SEED``, ``BARRIER_BSDE_WORKERS``), ``--config``
JSON file, built-in default.  The config file is a flat JSON object whose
keys are the long option names with dashes replaced by underscores, e.g.
``{"setting": "test3", "seed": 7, "workers": 2}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .model_core import MarketCase

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "setting": "test2",
    "paths": 1_000_000,
    "filter": None,
    "mc_paths": 0,
}
ENV_VARS = {"seed": "BARRIER_BSDE_SEED", "workers": "BARRIER_BSDE_WORKERS"}


def _resolve(args: argparse.Namespace, key: str, config: dict):
    val = getattr(args, key, None)
    if val is not None:
        return val
    env = ENV_VARS.get(key)
    if env and os.environ.get(env, "").strip():
        try:
            return int(os.environ[env])
        except ValueError:
            raise SystemExit(f"error: {env} must be an integer, got {os.environ[env]!r}")
    if key in config:
        return config[key]
    return DEFAULTS.get(key)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"error: cannot read config {path}: {exc}")
    if not isinstance(cfg, dict):
        raise SystemExit(f"error: config {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _load_case(path: str) -> MarketCase:
    try:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("expected a JSON object")
        # rate and drift are often left out of hand-written case files
        return MarketCase.from_dict({"rate": 0.0, "drift": 0.0, **data})
    except (OSError, ValueError, TypeError) as exc:
        raise SystemExit(f"error: bad case file {path}: {exc}")


def cmd_price(args, config) -> int:
    from .analytic import PriceEstimate, up_out_call
    from .montecarlo import McConfig, price_path_bridge, price_terminal_bridge
    from .solver import TrainConfig, train

    case = _load_case(args.case)
    seed = int(_resolve(args, "seed", config))
    if args.method == "analytic":
        est = up_out_call(case)
    elif args.method in ("mc-terminal", "mc-path"):
        cfg = McConfig(n_paths=int(_resolve(args, "paths", config)), seed=seed)
        est = price_terminal_bridge(case, cfg) if args.method == "mc-terminal" else price_path_bridge(case, None, cfg)
    else:
        setting = _resolve(args, "setting", config)
        res = train(case, TrainConfig.from_setting(setting, seed=seed))
        est = PriceEstimate(res.price, "bsde", 0.0, {
            "setting": setting, "seed": seed, "iterations": res.iterations_run,
            "converged": res.converged, "z0": res.z0,
        })
    print(est.to_json(indent=2, sort_keys=True))
    return 0


def cmd_grid(args, config) -> int:
    from .harness import compute_stats, parse_filter, report, run_grid

    setting = _resolve(args, "setting", config)
    try:
        flt = parse_filter(_resolve(args, "filter", config))
    except ValueError as exc:
        raise SystemExit(f"error: {exc}")
    results = run_grid(setting, flt, base_seed=int(_resolve(args, "seed", config)),
                       workers=int(_resolve(args, "workers", config)), out_dir=args.out,
                       mc_paths=int(_resolve(args, "mc_paths", config)))
    if not results:
        raise SystemExit("error: the filter selected no cases")
    try:
        stats = compute_stats(results)
    except ValueError as exc:
        print(f"warning: {exc}", file=sys.stderr)
        return 1
    csv_path, json_path = report(results, stats, args.out)
    rel = stats.relative
    print(f"{len(results)} cases; rel error avg {rel.average:.4%} median {rel.median:.4%}")
    print(f"wrote {csv_path} and {json_path}")
    return 0 if not any(r.error for r in results) else 1


def cmd_check(args, config) -> int:
    from .checks import run_suite

    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{args.suite}: {len(results) - failed}/{len(results)} passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="barrier-bsde", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("price", help="price one case and print a PriceEstimate as JSON")
    pr.add_argument("--method", required=True, choices=["analytic", "mc-terminal", "mc-path", "bsde"])
    pr.add_argument("--case", required=True, help="JSON file with spot, strike, barrier, maturity, "
                                                  "and optionally rate, drift, volatility")
    pr.add_argument("--setting", choices=["test1", "test2", "test3"], help="training setting for bsde (default test2)")
    pr.add_argument("--seed", type=int, help="random seed (env BARRIER_BSDE_SEED, default 0)")
    pr.add_argument("--paths", type=int, help="Monte Carlo paths (default 1000000)")
    pr.set_defaults(func=cmd_price)

    gr = sub.add_parser("grid", help="train the 72-case grid (or a subset) and write results")
    gr.add_argument("--setting", choices=["test1", "test2", "test3"], help="training setting (default test2)")
    gr.add_argument("--filter", help="subset, e.g. 'barrier=40,maturity=0.5' or 'spot=22|27'")
    gr.add_argument("--seed", type=int, help="base seed; per-case seeds derive from it (env BARRIER_BSDE_SEED)")
    gr.add_argument("--workers", type=int, help="parallel worker processes (env BARRIER_BSDE_WORKERS, default 1)")
    gr.add_argument("--mc-paths", type=int, help="also price each case by terminal Monte Carlo (default 0: off)")
    gr.add_argument("--out", required=True, help="output directory for results.csv and summary.json")
    gr.set_defaults(func=cmd_grid)

    ck = sub.add_parser("check", help="run a property suite; exit code 0 when all checks pass")
    ck.add_argument("--suite", required=True, choices=["gradients", "estimators", "analytic", "lemma2"])
    ck.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args, _load_config(args.config))


if __name__ == "__main__":
    sys.exit(main())

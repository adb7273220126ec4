"""Command-line experiment runner.

Verbs:
    moments    build (or hit) the moment cache for a config; print a dump
    solve      assemble and solve the nominal synthesis program
    simulate   run the configured closed-loop comparison
    certify    compute the stability certificate and its empirical checks
    reproduce  run a bundled experiment (example61 | example62 | example63 |
               certificate61 | smoke)

Exit codes: 0 ok, 1 configuration error, 2 numeric/runtime failure.
"""

import argparse
import json
import os
import sys

from .cache import CacheError, inspect_cache
from .config import ConfigError, load_config


def _add_common(p, config_required=True):
    if config_required:
        p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--out", required=True, help="artifact output directory")
    p.add_argument("--cache-dir", default=None,
                   help="moment cache directory (default: the output directory)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the simulation master seed")
    p.add_argument("--samples", type=int, default=None,
                   help="override the Monte Carlo moment sample count")
    p.add_argument("--tol", type=float, default=None,
                   help="override the solver tolerance")


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.samples is not None:
        cfg.moment_samples = args.samples
    if args.tol is not None:
        cfg.solver_tol = args.tol
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(prog="satrhc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("moments", help="build or inspect a moment cache")
    p.add_argument("--config", help="experiment TOML file")
    p.add_argument("--out", help="artifact output directory")
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--inspect", metavar="PATH",
                   help="print a dump of an existing cache file and exit")

    for verb in ("solve", "simulate", "certify"):
        _add_common(sub.add_parser(verb))

    p = sub.add_parser("reproduce", help="run a bundled experiment")
    p.add_argument("name", help="bundled experiment name")
    _add_common(p, config_required=False)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, CacheError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # numeric / runtime failure
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args):
    from . import experiments

    if args.verb == "moments":
        if args.inspect:
            print(inspect_cache(args.inspect))
            return 0
        if not args.config or not args.out:
            raise ConfigError("moments needs --config and --out (or --inspect PATH)")
        cfg = _apply_overrides(load_config(args.config), args)
        os.makedirs(args.out, exist_ok=True)
        _, path, hit = experiments.build_moment_cache(
            cfg, args.cache_dir or args.out)
        print(inspect_cache(path))
        return 0

    if args.verb == "reproduce":
        overrides = {"master_seed": args.seed, "samples": args.samples,
                     "tol": args.tol}
        experiments.reproduce(args.name, args.out, cache_dir=args.cache_dir,
                              overrides=overrides)
        return 0

    cfg = _apply_overrides(load_config(args.config), args)
    if args.verb == "solve":
        import numpy as np

        from .model import build_cost_blocks, build_lifted_dynamics
        from .optimizer import assemble_qp, solve as qp_solve

        os.makedirs(args.out, exist_ok=True)
        moments, _, _ = experiments.build_moment_cache(
            cfg, args.cache_dir or args.out)
        lifted = build_lifted_dynamics(cfg.sys, cfg.horizon)
        cost = build_cost_blocks([cfg.q_stage] * cfg.horizon + [cfg.q_terminal],
                                 [cfg.r_stage] * cfg.horizon)
        x0 = cfg.x0 if cfg.x0 is not None else np.zeros(cfg.sys.n)
        qp = assemble_qp(lifted, cost, moments, x0, cfg.spec, cfg.basis)
        report = qp_solve(qp, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
        payload = experiments._solve_report_payload(report, cfg)
        with open(os.path.join(args.out, "solve_report.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"objective {report.objective:.8g}  kkt {report.kkt_residual:.2e}  "
              f"iterations {report.iterations}  certified {report.certified}")
        return 0

    if args.verb == "certify" and cfg.certificate is None:
        raise ConfigError("config has no [certificate] section")
    if args.verb == "certify":
        cfg.ratio = None
        cfg.t_steps = 0
    experiments.run_experiment(cfg, args.out, cache_dir=args.cache_dir) \
        if args.verb == "simulate" else _certify_only(cfg, args, experiments)
    return 0


def _certify_only(cfg, args, experiments):
    os.makedirs(args.out, exist_ok=True)
    moments, _, _ = experiments.build_moment_cache(cfg, args.cache_dir or args.out)
    results = experiments._run_certificate_protocol(cfg, moments, args.out, [])
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump({"certificates": results}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for nc, res in results.items():
        print(f"n_control={nc}: bound {res['bound']:.6g}, empirical "
              f"{res['empirical_sup']:.6g}, valid={res['valid']}, "
              f"drift_pass={res['drift_pass']}")


if __name__ == "__main__":
    sys.exit(main())

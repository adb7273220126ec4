"""Experiment orchestration: moments cache, solves, simulations, artifacts.

An experiment run produces a self-contained artifact directory:

    moments_<key>.npz           cached moment matrices
    solve_report.json           nominal policy solve at the configured x0
    trajectories_<name>.csv     one row per (realization, t) per controller
    aggregate_curves.csv        per-time average running costs
    summary.json                all deterministic numbers of the run
    timings.json                wall times (the only nondeterministic output)
    avg_cost.svg, std_cost.svg  cost curves (standard protocol)
    ratio.csv, ratio.svg        per-draw ratios (ratio protocol)
    certificate.txt             certificate constants and empirical checks

Reruns with the same config and seeds are byte-identical except for
timings.json.  Failures leave partial artifacts behind plus a FAILED marker
with the diagnostic.
"""

import importlib.resources
import json
import math
import os
import time

import numpy as np

from .cache import CacheError, descriptor_key, inspect_cache, load_moments, save_moments
from .config import ConfigError, ExperimentConfig, load_config
from .moments import Moments, closed_form_moments, monte_carlo_moments
from .optimizer import assemble_qp, solve
from .model import build_cost_blocks, build_lifted_dynamics
from .simulate import (
    CeMpcController,
    LqgController,
    RhcPolicyController,
    SaturatedLqgController,
    aggregate,
    run_receding_horizon,
)
from .stability import certificate, drift_check, empirical_second_moment
from .svg import write_line_plot

BUNDLED = ("example61", "example62", "example63", "certificate61", "smoke")


def _fmt(v):
    return repr(float(v))


def _derive_seed(master, *key):
    seq = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, np.uint64)[0])


def _log(messages, text):
    messages.append(text)
    print(text, flush=True)


def build_moment_cache(cfg: ExperimentConfig, cache_dir, messages=None):
    """Build the configured moments, or load them from the keyed cache file."""
    messages = messages if messages is not None else []
    if cfg.moment_source == "closed_form":
        moments = closed_form_moments(cfg.basis, cfg.noise, cfg.horizon)
    else:
        moments = None
    if moments is not None and moments.descriptor is None:
        raise CacheError("closed-form moments missing a descriptor")
    descriptor = (moments.descriptor if moments is not None else {
        "version": 1, "basis": cfg.basis.descriptor(),
        "noise": cfg.noise.descriptor(), "horizon": cfg.horizon,
        "samples": cfg.moment_samples, "seed": cfg.moment_seed})
    key = descriptor_key(descriptor)
    path = os.path.join(cache_dir, f"moments_{key[:16]}.npz")
    if os.path.exists(path):
        loaded = load_moments(path, expected_descriptor=descriptor)
        _log(messages, f"moment cache hit: {path}")
        return loaded, path, True
    if moments is None:
        _log(messages, f"estimating moments ({cfg.moment_samples} samples, "
                       f"seed {cfg.moment_seed})")
        moments = monte_carlo_moments(cfg.basis, cfg.noise, cfg.horizon,
                                      cfg.moment_samples, cfg.moment_seed)
    os.makedirs(cache_dir, exist_ok=True)
    save_moments(path, moments)
    _log(messages, f"moment cache written: {path}")
    return moments, path, False


def _controller(cfg: ExperimentConfig, kind, n_control, moments,
                horizon=None):
    horizon = cfg.horizon if horizon is None else horizon
    common = dict(q_term=cfg.q_terminal, tol=cfg.solver_tol,
                  max_iter=cfg.solver_max_iter)
    if kind == "rhc":
        return RhcPolicyController(cfg.sys, cfg.q_stage, cfg.r_stage, horizon,
                                   n_control, cfg.spec, cfg.basis,
                                   moments.with_horizon(horizon),
                                   warm_start=cfg.warm_start, **common)
    if kind == "ce_mpc":
        return CeMpcController(cfg.sys, cfg.q_stage, cfg.r_stage, horizon,
                               n_control, cfg.spec, cfg.basis,
                               warm_start=cfg.warm_start, **common)
    if kind == "lqg":
        return LqgController(cfg.sys, cfg.q_stage, cfg.r_stage, horizon,
                             n_control, q_term=cfg.q_terminal)
    if kind == "saturated_lqg":
        return SaturatedLqgController(cfg.sys, cfg.q_stage, cfg.r_stage,
                                      horizon, n_control, cfg.spec.u_max,
                                      q_term=cfg.q_terminal)
    raise ConfigError(f"unknown controller kind {kind!r}")


def write_trajectories_csv(path, batch):
    n = batch.states.shape[2]
    m = batch.inputs.shape[2]
    cols = (["realization", "t"] + [f"x{i}" for i in range(n)]
            + [f"u{i}" for i in range(m)] + ["stage_cost", "flagged"])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in range(batch.realizations):
            flag = int(batch.flagged[r])
            for t in range(batch.t_steps):
                row = ([str(r), str(t)]
                       + [_fmt(v) for v in batch.states[r, t]]
                       + [_fmt(v) for v in batch.inputs[r, t]]
                       + [_fmt(batch.stage_costs[r, t]), str(flag)])
                fh.write(",".join(row) + "\n")


def _write_summary(out_dir, summary, timings):
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "timings.json"), "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _solve_report_payload(report, cfg):
    return {
        "objective": report.objective,
        "iterations": report.iterations,
        "kkt_residual": report.kkt_residual,
        "projection_count": report.projection_count,
        "certified": report.certified,
        "method": report.method,
        "eta": [float(v) for v in report.params.eta],
        "theta": [[float(v) for v in row] for row in report.params.theta],
        "basis": cfg.basis.descriptor(),
        "constraint": {"p": ("inf" if cfg.spec.p == math.inf else cfg.spec.p),
                       "u_max": cfg.spec.u_max, "variant": cfg.spec.variant},
    }


def run_experiment(cfg, out_dir, cache_dir=None):
    """Run all configured stages; returns the summary dict.

    Raises ConfigError for configuration problems and lets numeric failures
    propagate after writing a FAILED marker with the diagnostic.
    """
    if isinstance(cfg, (str, os.PathLike)):
        cfg = load_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    cache_dir = cache_dir or out_dir
    messages = []
    timings = {}
    try:
        t0 = time.perf_counter()
        moments, cache_path, cache_hit = build_moment_cache(cfg, cache_dir, messages)
        timings["moments_s"] = time.perf_counter() - t0

        summary = {
            "moment_cache": os.path.basename(cache_path),
            "moment_cache_hit": cache_hit,
            "log": messages,
        }

        t0 = time.perf_counter()
        x0_nominal = cfg.x0 if cfg.x0 is not None else np.zeros(cfg.sys.n)
        lifted = build_lifted_dynamics(cfg.sys, cfg.horizon)
        cost = build_cost_blocks([cfg.q_stage] * cfg.horizon + [cfg.q_terminal],
                                 [cfg.r_stage] * cfg.horizon)
        qp = assemble_qp(lifted, cost, moments, x0_nominal, cfg.spec, cfg.basis)
        report = solve(qp, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
        with open(os.path.join(out_dir, "solve_report.json"), "w") as fh:
            json.dump(_solve_report_payload(report, cfg), fh, indent=2, sort_keys=True)
            fh.write("\n")
        summary["solve"] = {"objective": report.objective,
                            "kkt_residual": report.kkt_residual,
                            "iterations": report.iterations,
                            "certified": report.certified}
        timings["solve_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if cfg.ratio is not None:
            summary["ratio_protocol"] = _run_ratio_protocol(cfg, moments, out_dir,
                                                            messages)
        else:
            summary["controllers"], summary["pairs"] = _run_standard_protocol(
                cfg, moments, out_dir, messages)
        timings["simulate_s"] = time.perf_counter() - t0

        if cfg.certificate is not None:
            t0 = time.perf_counter()
            summary["certificates"] = _run_certificate_protocol(cfg, moments,
                                                                out_dir, messages)
            timings["certificate_s"] = time.perf_counter() - t0

        _write_summary(out_dir, summary, timings)
        return summary
    except ConfigError:
        raise
    except Exception as exc:
        with open(os.path.join(out_dir, "FAILED"), "w") as fh:
            fh.write(f"{type(exc).__name__}: {exc}\n")
        raise


def _run_standard_protocol(cfg, moments, out_dir, messages):
    q_term = cfg.q_terminal if cfg.terminal_cost else None
    main = _controller(cfg, "rhc", cfg.n_control, moments)
    _log(messages, f"simulating {main.name} ({cfg.realizations} realizations, "
                   f"T={cfg.t_steps})")
    main_batch = run_receding_horizon(cfg.sys, cfg.q_stage, cfg.r_stage, main,
                                      cfg.noise, cfg.x0, cfg.t_steps,
                                      cfg.realizations, cfg.master_seed,
                                      q_term=q_term)
    write_trajectories_csv(os.path.join(out_dir, f"trajectories_{main.name}.csv"),
                           main_batch)
    batches = {main.name: main_batch}
    controllers = {main.name: aggregate(main_batch)}
    pairs = {}
    for base_cfg in cfg.baselines:
        ctl = _controller(cfg, base_cfg.kind, base_cfg.n_control, moments,
                          horizon=base_cfg.horizon)
        _log(messages, f"simulating baseline {ctl.name}")
        batch = run_receding_horizon(cfg.sys, cfg.q_stage, cfg.r_stage, ctl,
                                     cfg.noise, cfg.x0, cfg.t_steps,
                                     cfg.realizations, cfg.master_seed,
                                     q_term=q_term)
        write_trajectories_csv(os.path.join(out_dir, f"trajectories_{ctl.name}.csv"),
                               batch)
        batches[ctl.name] = batch
        controllers[ctl.name] = aggregate(batch)
        paired = aggregate(main_batch, baseline=batch)
        pairs[ctl.name] = {
            "ratio_baseline_over_main_mean": paired.ratio_baseline_over_main_mean,
            "ratio_baseline_over_main_std": paired.ratio_baseline_over_main_std,
            "ratio_main_over_baseline_mean": paired.ratio_main_over_baseline_mean,
            "mean_cost_main": paired.mean_cost,
            "mean_cost_baseline": paired.mean_cost_baseline,
            "savings_percent": 100.0 * (1.0 - paired.mean_cost
                                        / paired.mean_cost_baseline),
        }

    steps = list(range(cfg.t_steps))
    with open(os.path.join(out_dir, "aggregate_curves.csv"), "w") as fh:
        names = list(batches)
        fh.write("t," + ",".join(f"mean_cum_{n},std_cum_{n}" for n in names) + "\n")
        aggs = {n: aggregate(batches[n]) for n in names}
        for t in steps:
            cells = [str(t)]
            for n in names:
                cells += [_fmt(aggs[n].mean_curve[t]), _fmt(aggs[n].std_curve[t])]
            fh.write(",".join(cells) + "\n")

    spread = max(max(a.mean_curve.max(), 1e-300) for a in controllers.values())
    floor = min(max(a.mean_curve[a.mean_curve > 0].min(), 1e-300)
                if np.any(a.mean_curve > 0) else spread
                for a in controllers.values())
    log_y = spread / max(floor, 1e-300) > 1e3
    write_line_plot(os.path.join(out_dir, "avg_cost.svg"),
                    [(n, steps, list(controllers[n].mean_curve)) for n in controllers],
                    title="average cumulative cost", xlabel="t",
                    ylabel="cost", log_y=log_y)
    write_line_plot(os.path.join(out_dir, "std_cost.svg"),
                    [(n, steps, list(controllers[n].std_curve)) for n in controllers],
                    title="cumulative cost standard deviation", xlabel="t",
                    ylabel="std", log_y=log_y)

    controller_summaries = {}
    for name, agg in controllers.items():
        batch = batches[name]
        controller_summaries[name] = {
            "mean_cost": agg.mean_cost, "std_cost": agg.std_cost,
            "n_valid": agg.n_valid, "n_flagged": agg.n_flagged,
            "max_input_norm": batch.max_input_norm(),
            "input_violations": batch.input_violations(),
        }
    return controller_summaries, pairs


def _run_ratio_protocol(cfg, moments, out_dir, messages):
    base_cfg = cfg.baselines[0]
    main = _controller(cfg, "rhc", cfg.n_control, moments)
    base = _controller(cfg, base_cfg.kind, base_cfg.n_control, moments,
                       horizon=base_cfg.horizon)
    q_term = cfg.q_terminal if cfg.terminal_cost else None
    rows = []
    _log(messages, f"ratio protocol: {cfg.ratio.draws} initial-state draws, "
                   f"baseline {base.name}")
    for i in range(cfg.ratio.draws):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.ratio.x0_seed,
                                                           spawn_key=(i,)))
        x0 = cfg.ratio.x0_box * (2.0 * rng.random(cfg.sys.n) - 1.0)
        seed_i = _derive_seed(cfg.master_seed, i)
        kw = dict(q_term=q_term)
        main_batch = run_receding_horizon(cfg.sys, cfg.q_stage, cfg.r_stage,
                                          main, cfg.noise, x0, cfg.t_steps, 1,
                                          seed_i, **kw)
        base_batch = run_receding_horizon(cfg.sys, cfg.q_stage, cfg.r_stage,
                                          base, cfg.noise, x0, cfg.t_steps, 1,
                                          seed_i, **kw)
        c_main = float(main_batch.cumulative_costs()[0])
        c_base = float(base_batch.cumulative_costs()[0])
        rows.append((i, x0, c_main, c_base, c_base / c_main,
                     bool(main_batch.flagged[0])))
    with open(os.path.join(out_dir, "ratio.csv"), "w") as fh:
        n = cfg.sys.n
        fh.write("draw," + ",".join(f"x0_{j}" for j in range(n))
                 + ",cost_main,cost_baseline,ratio_baseline_over_main,flagged\n")
        for i, x0, cm, cb, ratio, flag in rows:
            fh.write(",".join([str(i)] + [_fmt(v) for v in x0]
                              + [_fmt(cm), _fmt(cb), _fmt(ratio), str(int(flag))])
                     + "\n")
    ratios = np.array([r[4] for r in rows if not r[5]])
    write_line_plot(os.path.join(out_dir, "ratio.svg"),
                    [("baseline/main cost ratio", list(range(len(ratios))),
                      list(ratios))],
                    title="per-draw cost ratio", xlabel="draw", ylabel="ratio")
    return {
        "draws": cfg.ratio.draws,
        "flagged": int(sum(r[5] for r in rows)),
        "ratio_mean": float(ratios.mean()),
        "ratio_std": float(ratios.std(ddof=1)) if len(ratios) > 1 else 0.0,
        "mean_cost_main": float(np.mean([r[2] for r in rows])),
        "mean_cost_baseline": float(np.mean([r[3] for r in rows])),
        "baseline": base.name,
    }


def _run_certificate_protocol(cfg, moments, out_dir, messages):
    cc = cfg.certificate
    lines = []
    results = {}
    for nc in cc.n_list:
        cert = certificate(cfg.sys, nc, cfg.spec.u_max,
                           cfg.basis.component_bound, moments,
                           zeta=cc.zeta, zeta_grid=cc.zeta_grid or None)
        ctl = _controller(cfg, "rhc", nc, moments, horizon=nc)
        _log(messages, f"certificate n_control={nc}: empirical run "
                       f"({cc.realizations} x T={cc.t_steps})")
        x0 = cfg.x0 if cfg.x0 is not None else np.zeros(cfg.sys.n)
        batch = run_receding_horizon(cfg.sys, cfg.q_stage, cfg.r_stage, ctl,
                                     cfg.noise, x0, cc.t_steps,
                                     cc.realizations,
                                     _derive_seed(cc.master_seed, nc))
        trace = empirical_second_moment(batch)
        bound = cert.sup_bound(x0)
        directions = [np.ones(cfg.sys.n),
                      np.array([(-1.0) ** i for i in range(cfg.sys.n)]),
                      np.eye(cfg.sys.n)[0]]
        x0_list = [cc.drift_x0_scale * cert.r_prime * v / max(np.abs(v))
                   for v in directions]
        drift_rows = drift_check(cfg.sys, cfg.q_stage, cfg.r_stage, ctl,
                                 cfg.noise, cert, x0_list,
                                 cc.drift_realizations,
                                 _derive_seed(cc.master_seed, nc, 99))
        lines.append(cert.describe())
        lines.append(f"  empirical sup_t mean|x_t|^2 over {cc.realizations} paths, "
                     f"T={cc.t_steps}: {trace.sup:.6g}  (bound {bound:.6g}, "
                     f"{'VALID' if trace.sup <= bound else 'VIOLATED'})")
        for row in drift_rows:
            lines.append(f"  drift x0#{row.x0_index} l={row.offset}: "
                         f"lhs {row.lhs_mean:.6g} (se {row.lhs_se:.3g}) "
                         f"<= rhs {row.rhs:.6g}: {'ok' if row.ok else 'FAIL'}")
        lines.append("")
        results[str(nc)] = {
            "bound": bound,
            "asymptotic_bound": cert.asymptotic_bound,
            "empirical_sup": trace.sup,
            "valid": bool(trace.sup <= bound),
            "max_lyapunov_residual": float(cert.lyapunov_residuals.max()),
            "drift_checked": len(drift_rows),
            "drift_pass": all(r.ok for r in drift_rows),
            "input_violations": batch.input_violations(),
            "n_flagged": int(batch.flagged.sum()),
        }
        write_trajectories_csv(
            os.path.join(out_dir, f"trajectories_{ctl.name}_cert.csv"), batch)
    with open(os.path.join(out_dir, "certificate.txt"), "w") as fh:
        fh.write("\n".join(lines))
    return results


def bundled_config_path(name):
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled experiment {name!r}; "
                          f"choose from {', '.join(BUNDLED)}")
    return importlib.resources.files("satrhc").joinpath("configs", f"{name}.toml")


def reproduce(name, out_dir, cache_dir=None, overrides=None):
    """Run a bundled experiment config by name."""
    path = bundled_config_path(name)
    with importlib.resources.as_file(path) as p:
        cfg = load_config(p)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "master_seed":
            cfg.master_seed = int(value)
        elif key == "samples":
            cfg.moment_samples = int(value)
        elif key == "realizations":
            cfg.realizations = int(value)
        elif key == "tol":
            cfg.solver_tol = float(value)
        else:
            raise ConfigError(f"unsupported override {key!r}")
    return run_experiment(cfg, out_dir, cache_dir=cache_dir)

"""Experiment configuration: TOML parsing and validation.

Physically meaningful quantities (input bound, horizons, weights, noise)
have no defaults and must be stated explicitly; only tolerances and sample
counts fall back to defaults.  Referential consistency between the basis,
the moment source and the constraint variant is checked here, before any
run starts.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:  # python 3.10
    import tomli as _toml

from .basis import BasisFamily, fourier_sine, scaled_sigmoid, standard_saturation
from .model import SystemModel
from .noise import NoiseSpec, gaussian_noise, uniform_box_noise
from .policy import ConstraintSpec


class ConfigError(ValueError):
    pass


def _need(table, key, where):
    if key not in table:
        raise ConfigError(f"missing required key {key!r} in [{where}]")
    return table[key]


def _weight_matrix(value, dim, label):
    if np.isscalar(value):
        return np.eye(dim) * float(value)
    mat = np.asarray(value, dtype=float)
    if mat.shape != (dim, dim):
        raise ConfigError(f"{label} must be a scalar or a {dim}x{dim} matrix")
    return mat


@dataclass
class BaselineConfig:
    kind: str
    n_control: int
    horizon: Optional[int] = None   # gain/planning horizon; defaults to the main one


@dataclass
class RatioProtocol:
    x0_box: float
    draws: int
    x0_seed: int


@dataclass
class CertificateConfig:
    n_list: list
    zeta: float
    zeta_grid: int
    t_steps: int
    realizations: int
    master_seed: int
    drift_realizations: int
    drift_x0_scale: float


@dataclass
class ExperimentConfig:
    sys: SystemModel
    q_stage: np.ndarray
    r_stage: np.ndarray
    q_terminal: np.ndarray
    horizon: int
    n_control: int
    spec: ConstraintSpec
    basis: BasisFamily
    noise: NoiseSpec
    moment_source: str
    moment_samples: int
    moment_seed: int
    solver_tol: float
    solver_max_iter: int
    warm_start: bool
    t_steps: int
    realizations: int
    master_seed: int
    x0: Optional[np.ndarray]
    terminal_cost: bool
    main_controller: str
    baselines: list
    ratio: Optional[RatioProtocol]
    certificate: Optional[CertificateConfig]
    raw: dict = field(repr=False, default_factory=dict)


_BASELINE_KINDS = ("lqg", "saturated_lqg", "ce_mpc", "rhc")


def parse_config(data: dict) -> ExperimentConfig:
    sys_tab = _need(data, "system", "system")
    sys = SystemModel(_need(sys_tab, "a", "system"), _need(sys_tab, "b", "system"))
    n, m = sys.n, sys.m

    cost_tab = _need(data, "cost", "cost")
    q_stage = _weight_matrix(_need(cost_tab, "q", "cost"), n, "cost.q")
    r_stage = _weight_matrix(_need(cost_tab, "r", "cost"), m, "cost.r")
    q_term = _weight_matrix(cost_tab.get("q_terminal", cost_tab["q"]), n,
                            "cost.q_terminal")

    hor_tab = _need(data, "horizon", "horizon")
    horizon = int(_need(hor_tab, "n", "horizon"))
    n_control = int(_need(hor_tab, "n_control", "horizon"))
    if horizon < 1 or not 1 <= n_control <= horizon:
        raise ConfigError("need horizon >= 1 and 1 <= n_control <= horizon")

    con_tab = _need(data, "constraint", "constraint")
    p_raw = con_tab.get("p", "inf")
    p = math.inf if str(p_raw) in ("inf", "Infinity") else float(p_raw)
    try:
        spec = ConstraintSpec(p, float(_need(con_tab, "u_max", "constraint")),
                              con_tab.get("variant", "rowwise"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    basis_tab = _need(data, "basis", "basis")
    kind = _need(basis_tab, "kind", "basis")
    if kind == "scaled_sigmoid":
        basis = scaled_sigmoid(n, float(_need(basis_tab, "alpha", "basis")),
                               float(_need(basis_tab, "beta", "basis")))
    elif kind == "saturation":
        basis = standard_saturation(n)
    elif kind == "fourier_sine":
        basis = fourier_sine(n, int(_need(basis_tab, "modes", "basis")),
                             float(_need(basis_tab, "support", "basis")))
    else:
        raise ConfigError(f"unknown basis kind {kind!r}")

    noise_tab = _need(data, "noise", "noise")
    nkind = _need(noise_tab, "kind", "noise")
    if nkind == "gaussian":
        mean = noise_tab.get("mean", [0.0] * n)
        noise = gaussian_noise(mean, _need(noise_tab, "cov", "noise"))
    elif nkind == "uniform":
        noise = uniform_box_noise(n, float(_need(noise_tab, "support", "noise")))
    else:
        raise ConfigError(f"unknown noise kind {nkind!r}")
    if noise.n != n:
        raise ConfigError("noise dimension does not match the plant")
    if basis.kind == "fourier_sine":
        if noise.kind != "uniform" or basis.params["support"] != noise.support:
            raise ConfigError("fourier_sine basis requires uniform noise on the same box")
    try:
        spec.validate_basis(basis)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    mom_tab = _need(data, "moments", "moments")
    source = mom_tab.get("source", "monte_carlo")
    if source not in ("monte_carlo", "closed_form"):
        raise ConfigError(f"unknown moment source {source!r}")
    samples = int(mom_tab.get("samples", 0))
    seed = int(mom_tab.get("seed", 0))
    if source == "monte_carlo" and samples < 10_000:
        raise ConfigError("monte_carlo moments need samples >= 1e4")

    sol_tab = data.get("solver", {})
    tol = float(sol_tab.get("tol", 1e-8))
    max_iter = int(sol_tab.get("max_iter", 50000))
    warm = bool(sol_tab.get("warm_start", False))

    sim_tab = _need(data, "simulation", "simulation")
    t_steps = int(_need(sim_tab, "t", "simulation"))
    realizations = int(_need(sim_tab, "realizations", "simulation"))
    master_seed = int(_need(sim_tab, "master_seed", "simulation"))
    x0 = None
    if "x0" in sim_tab:
        x0 = np.asarray(sim_tab["x0"], dtype=float)
        if x0.size != n:
            raise ConfigError("simulation.x0 has the wrong dimension")
    terminal = bool(sim_tab.get("terminal_cost", False))

    ctl_tab = data.get("controllers", {})
    main = ctl_tab.get("main", "rhc")
    if main != "rhc":
        raise ConfigError("the main controller must be the synthesized policy ('rhc')")
    baselines = []
    for entry in ctl_tab.get("baseline", []):
        bkind = _need(entry, "kind", "controllers.baseline")
        if bkind not in _BASELINE_KINDS:
            raise ConfigError(f"unknown baseline controller {bkind!r}")
        bl_horizon = int(entry["horizon"]) if "horizon" in entry else None
        baselines.append(BaselineConfig(bkind, int(entry.get("n_control", n_control)),
                                        bl_horizon))

    ratio = None
    if "ratio_protocol" in data:
        rt = data["ratio_protocol"]
        ratio = RatioProtocol(float(_need(rt, "x0_box", "ratio_protocol")),
                              int(_need(rt, "draws", "ratio_protocol")),
                              int(_need(rt, "x0_seed", "ratio_protocol")))
        if not baselines:
            raise ConfigError("ratio protocol needs a baseline controller")
    elif x0 is None:
        raise ConfigError("simulation.x0 is required unless a ratio protocol is given")

    cert = None
    if "certificate" in data:
        ct = data["certificate"]
        cert = CertificateConfig(
            [int(v) for v in _need(ct, "n_list", "certificate")],
            float(ct.get("zeta", 0.5)), int(ct.get("zeta_grid", 0)),
            int(ct.get("t", 500)), int(ct.get("realizations", 100)),
            int(ct.get("master_seed", master_seed + 1)),
            int(ct.get("drift_realizations", 200)),
            float(ct.get("drift_x0_scale", 2.0)))

    return ExperimentConfig(sys, q_stage, r_stage, q_term, horizon, n_control,
                            spec, basis, noise, source, samples, seed, tol,
                            max_iter, warm, t_steps, realizations, master_seed,
                            x0, terminal, main, baselines, ratio, cert, data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = _toml.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}")
    return parse_config(data)

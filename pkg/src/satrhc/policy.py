"""Noise-feedback policy u = eta + Theta e(w) and its constraint algebra.

Theta is strictly lower block triangular over stages: the inputs of stage t
may only read the features of noises 0..t-1, so block row 0 is identically
zero.  Feasibility is a per-stage norm budget that couples eta_t with the
free part of Theta_t; every variant's left-hand side is absolutely
homogeneous, which is what makes radial rescaling a universal fallback.

Constraint variants
    rowwise     per input row: |eta_{t,i}| + phi_max * ||Theta_{t,i}||_1 <= u_max
                (exact for the componentwise bound; the default)
    generic     triangle-inequality budgets for p in {1, 2, inf}; the printed
                growth factors (script-E * t for p=1, sqrt(1 + script-E t)
                for p=2) are kept as stated, which is only a sound hard
                bound for one-element bases with script-E <= 1.  Setting
                corrected_growth=True switches to the dimensionally
                consistent factors script-E*t*d and sqrt(1 + script-E^2 t d).
    orthonormal ||eta_t|| + sqrt(N-1) ||Theta_t||_F <= u_max, for orthonormal
                families; certifies the function-space norm of the policy
    finite-dim  ||[eta_t Theta_t]||_F <= u_max / sqrt(N)

An optional total-energy budget sqrt(eta' S eta) + ||S^(1/2) Theta||_2
||S||_inf script-E <= beta can be attached on top of any variant.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import BasisFamily
from .model import SystemModel


class PolicyError(ValueError):
    pass


def causality_mask(horizon, m, d):
    """Boolean (N m, (N-1) d) mask of the free Theta entries."""
    mask = np.zeros((horizon * m, max(horizon - 1, 0) * d), dtype=bool)
    for t in range(horizon):
        mask[t * m:(t + 1) * m, :t * d] = True
    return mask


@dataclass(frozen=True)
class PolicyParams:
    """Open-loop part eta (N m,) and feedback coefficients Theta (N m, (N-1) d)."""

    eta: np.ndarray
    theta: np.ndarray
    basis: BasisFamily
    horizon: int
    m: int

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).reshape(-1)
        theta = np.asarray(self.theta, dtype=float)
        d = self.basis.stage_dim
        if eta.size != self.horizon * self.m:
            raise PolicyError(f"eta has length {eta.size}, expected {self.horizon * self.m}")
        want = (self.horizon * self.m, max(self.horizon - 1, 0) * d)
        if theta.shape != want:
            raise PolicyError(f"theta has shape {theta.shape}, expected {want}")
        mask = causality_mask(self.horizon, self.m, d)
        if theta.size and np.any(theta[~mask] != 0.0):
            raise PolicyError("theta has nonzero entries above the causal block diagonal")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "theta", theta)

    @property
    def d(self):
        return self.basis.stage_dim

    def eta_stage(self, t):
        return self.eta[t * self.m:(t + 1) * self.m]

    def theta_stage(self, t):
        return self.theta[t * self.m:(t + 1) * self.m, :]

    def theta_stage_free(self, t):
        """The columns of Theta_t that causality allows to be nonzero."""
        return self.theta[t * self.m:(t + 1) * self.m, :t * self.d]

    def scaled(self, factor):
        return PolicyParams(self.eta * factor, self.theta * factor,
                            self.basis, self.horizon, self.m)


def control_sequence(params: PolicyParams, w) -> np.ndarray:
    """Stacked inputs u = eta + Theta e(w) for one stacked noise vector."""
    feats = params.basis.eval_stacked(w, params.horizon - 1)
    if params.theta.shape[1] == 0:
        return params.eta.copy()
    return params.eta + params.theta @ feats


def control_at_stage(params: PolicyParams, t, w_prefix) -> np.ndarray:
    """Input of stage t given the noises of stages 0..t-1 only."""
    if not 0 <= t < params.horizon:
        raise PolicyError(f"stage {t} outside horizon {params.horizon}")
    u = params.eta_stage(t).copy()
    if t == 0:
        return u
    w_prefix = np.asarray(w_prefix, dtype=float).reshape(-1)
    if w_prefix.size != t * params.basis.n:
        raise PolicyError(
            f"stage {t} needs {t} noise blocks, got length {w_prefix.size}")
    feats = params.basis.eval_stacked(w_prefix, t)
    return u + params.theta_stage_free(t) @ feats


def reconstruct_noise(sys: SystemModel, states, inputs) -> np.ndarray:
    """Recover w_0..w_{T-1} from a measured trajectory: w_i = x_{i+1} - A x_i - B u_i."""
    states = np.asarray(states, dtype=float)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] == 1 and inputs.shape[1] != sys.m:
        inputs = inputs.T
    if states.shape[0] != inputs.shape[0] + 1:
        raise PolicyError(
            f"got {states.shape[0]} states and {inputs.shape[0]} inputs; "
            "need exactly one more state than inputs")
    pred = states[:-1] @ sys.a_mat.T + inputs @ sys.b_mat.T
    return states[1:] - pred


# ---------------------------------------------------------------------------
# constraint sets
# ---------------------------------------------------------------------------

VARIANTS = ("rowwise", "generic", "orthonormal", "finite-dim")


@dataclass(frozen=True)
class ConstraintSpec:
    """Per-stage input-norm budget, plus an optional total-energy budget."""

    p: float
    u_max: float
    variant: str = "rowwise"
    energy_weight: Optional[np.ndarray] = None   # SPD S
    energy_budget: Optional[float] = None        # beta
    corrected_growth: bool = False

    def __post_init__(self):
        if self.u_max <= 0:
            raise PolicyError("u_max must be positive")
        if self.variant not in VARIANTS:
            raise PolicyError(f"unknown constraint variant {self.variant!r}")
        p = float(self.p)
        if p not in (1.0, 2.0, math.inf):
            raise PolicyError("p must be 1, 2 or inf")
        if self.variant == "rowwise" and p != math.inf:
            raise PolicyError("the rowwise variant enforces the inf-norm bound")
        if self.variant in ("orthonormal", "finite-dim") and p != 2.0:
            raise PolicyError(f"the {self.variant} variant enforces the 2-norm bound")
        if (self.energy_weight is None) != (self.energy_budget is None):
            raise PolicyError("energy constraint needs both S and beta")
        if self.energy_weight is not None:
            s_mat = np.asarray(self.energy_weight, dtype=float)
            if self.energy_budget <= 0:
                raise PolicyError("energy budget beta must be positive")
            try:
                np.linalg.cholesky(s_mat)
            except np.linalg.LinAlgError:
                raise PolicyError("energy weight S must be SPD")
            object.__setattr__(self, "energy_weight", s_mat)
        object.__setattr__(self, "p", p)

    def validate_basis(self, basis: BasisFamily):
        if self.variant in ("orthonormal", "finite-dim") and not basis.orthonormal:
            raise PolicyError(
                f"the {self.variant} variant requires an orthonormal basis family, "
                f"got {basis.kind!r}")

    def stage_bound(self, horizon):
        if self.variant == "finite-dim":
            return self.u_max / math.sqrt(horizon)
        return self.u_max


def stage_constraint_lhs(spec: ConstraintSpec, basis: BasisFamily, horizon,
                         t, eta_t, theta_t_free) -> float:
    """Left-hand side of the stage-t budget; compare against spec.stage_bound."""
    eta_t = np.asarray(eta_t, dtype=float).reshape(-1)
    th = np.asarray(theta_t_free, dtype=float)
    if th.ndim != 2:
        th = th.reshape(eta_t.size, -1)
    bound = basis.vector_bound
    if spec.variant == "rowwise":
        row_l1 = np.abs(th).sum(axis=1) if th.size else np.zeros(eta_t.size)
        return float(np.max(np.abs(eta_t) + basis.component_bound * row_l1))
    if spec.variant == "orthonormal":
        return float(np.linalg.norm(eta_t)
                     + math.sqrt(max(horizon - 1, 0)) * np.linalg.norm(th))
    if spec.variant == "finite-dim":
        return float(math.hypot(np.linalg.norm(eta_t), np.linalg.norm(th)))
    # generic
    if spec.p == 1.0:
        col = np.abs(th).sum(axis=0).max() if th.size else 0.0
        factor = bound * t * (basis.stage_dim if spec.corrected_growth else 1)
        return float(np.abs(eta_t).sum() + factor * col)
    if spec.p == math.inf:
        row = np.abs(th).sum(axis=1).max() if th.size else 0.0
        return float(np.abs(eta_t).max() + bound * row)
    # p == 2: Frobenius reading of ||[eta_t Theta_t]||
    stacked = math.hypot(np.linalg.norm(eta_t), np.linalg.norm(th))
    if spec.corrected_growth:
        factor = math.sqrt(1.0 + bound * bound * t * basis.stage_dim)
    else:
        factor = math.sqrt(1.0 + bound * t)
    return float(stacked * factor)


def energy_constraint_lhs(spec: ConstraintSpec, basis: BasisFamily,
                          params: PolicyParams) -> float:
    s_mat = spec.energy_weight
    vals, vecs = np.linalg.eigh(s_mat)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    eta_term = math.sqrt(float(params.eta @ s_mat @ params.eta))
    if params.theta.size:
        theta_term = np.linalg.norm(root @ params.theta, 2)
    else:
        theta_term = 0.0
    s_inf = np.abs(s_mat).sum(axis=1).max()
    return float(eta_term + theta_term * s_inf * basis.vector_bound)


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    stage_slack: np.ndarray
    energy_slack: Optional[float] = None


def check_feasible(params: PolicyParams, spec: ConstraintSpec,
                   basis: Optional[BasisFamily] = None,
                   atol=0.0) -> FeasibilityReport:
    """Exact feasibility check with per-stage slack u_bound - lhs."""
    basis = basis or params.basis
    spec.validate_basis(basis)
    bound = spec.stage_bound(params.horizon)
    slack = np.empty(params.horizon)
    for t in range(params.horizon):
        lhs = stage_constraint_lhs(spec, basis, params.horizon, t,
                                   params.eta_stage(t), params.theta_stage_free(t))
        slack[t] = bound - lhs
    e_slack = None
    ok = bool(np.all(slack >= -atol))
    if spec.energy_weight is not None:
        e_slack = spec.energy_budget - energy_constraint_lhs(spec, basis, params)
        ok = ok and e_slack >= -atol
    return FeasibilityReport(ok, slack, e_slack)


def scale_to_feasible(params: PolicyParams, spec: ConstraintSpec,
                      basis: Optional[BasisFamily] = None) -> PolicyParams:
    """Radially shrink (eta, Theta) by the largest factor in [0, 1] that fits.

    Every constraint functional is absolutely homogeneous, so the optimal
    factor is the smallest ratio bound/lhs, clipped at 1.
    """
    basis = basis or params.basis
    spec.validate_basis(basis)
    bound = spec.stage_bound(params.horizon)
    factor = 1.0
    for t in range(params.horizon):
        lhs = stage_constraint_lhs(spec, basis, params.horizon, t,
                                   params.eta_stage(t), params.theta_stage_free(t))
        if lhs > 0:
            factor = min(factor, bound / lhs)
    if spec.energy_weight is not None:
        lhs = energy_constraint_lhs(spec, basis, params)
        if lhs > 0:
            factor = min(factor, spec.energy_budget / lhs)
    if factor >= 1.0:
        return params
    # one-ulp shrink so the rescaled point cannot round back over the boundary
    return params.scaled(factor * (1.0 - 4e-16))

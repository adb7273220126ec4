"""Assembly and solution of the convex policy-synthesis program.

The expected quadratic cost of the policy u = eta + Theta e(w) is, after
taking expectations against the off-line moment matrices,

    f(eta, Theta) = tr(Theta' H Theta Sigma_e) + 2 tr(Theta' B'QD Sigma'_e)
                    + eta' H eta + 2 (x0' A'QB eta + eta' B'QD mu_w
                    + x0' A'QB Theta mu_e) + 2 eta' H Theta mu_e + c,

with H = B'QB + R and c collecting the policy-independent terms.  This is a
convex quadratic in (eta, Theta) restricted to the causal (strictly lower
block triangular) entries of Theta.  The trace form is evaluated and
differentiated directly against Sigma_e; no rank-one decomposition of
Sigma_e is ever materialized.

The solver is FISTA with gradient-based adaptive restart and a monotone
safeguard, using the exact per-stage projections where they exist and a
feasible-scaling descent fallback (flagged, never KKT-certified) otherwise.
The step size comes from a power-iteration estimate of the quadratic form's
largest curvature.
"""

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import BasisFamily
from .model import CostBlocks, LiftedModel
from .moments import Moments
from .policy import (
    ConstraintSpec,
    PolicyParams,
    causality_mask,
    check_feasible,
    scale_to_feasible,
)
from .projections import UnsupportedProjection, project_stage, weighted_l1_projection


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class QpProblem:
    """Dense data of the synthesis program for one initial state."""

    h_mat: np.ndarray          # B'QB + R, (Nm, Nm), SPD
    bqd: np.ndarray            # B'QD, (Nm, Nn)
    bqa: np.ndarray            # B'QA, (Nm, n)
    sigma_e: np.ndarray        # lifted E[e e'], (K, K)
    mu_e: np.ndarray           # lifted E[e], (K,)
    g_theta_const: np.ndarray  # 2 B'QD Sigma'_e, (Nm, K)
    b_eta: np.ndarray          # 2 (B'QA x0 + B'QD mu_w), (Nm,)
    g_theta: np.ndarray        # g_theta_const + 2 (B'QA x0) mu_e', (Nm, K)
    constant: float            # x0'A'QA x0 + 2 x0'A'QD mu_w + tr(D'QD Sigma_w)
    x0: np.ndarray
    spec: ConstraintSpec
    basis: BasisFamily
    horizon: int
    n: int
    m: int
    mask: np.ndarray           # float causality mask over Theta
    aqa: np.ndarray
    aqd_mu: np.ndarray
    dqd_sigma_tr: float
    bqd_mu: np.ndarray

    @property
    def k_cols(self):
        return self.sigma_e.shape[0]

    def value(self, eta, theta):
        """Objective at a point (constant included)."""
        h_eta = self.h_mat @ eta
        val = float(eta @ h_eta + self.b_eta @ eta) + self.constant
        if theta.size:
            g_quad = (self.h_mat @ theta) @ self.sigma_e
            val += float(np.sum(theta * g_quad) + np.sum(self.g_theta * theta))
            if self._has_mu_e:
                val += 2.0 * float(eta @ (self.h_mat @ (theta @ self.mu_e)))
        return val

    def value_and_grad(self, eta, theta):
        h_eta = self.h_mat @ eta
        g_eta = 2.0 * h_eta + self.b_eta
        val = float(eta @ h_eta + self.b_eta @ eta) + self.constant
        if theta.size:
            h_th = self.h_mat @ theta
            g_quad = h_th @ self.sigma_e
            val += float(np.sum(theta * g_quad) + np.sum(self.g_theta * theta))
            g_theta = 2.0 * g_quad + self.g_theta
            if self._has_mu_e:
                th_mu = theta @ self.mu_e
                val += 2.0 * float(eta @ (self.h_mat @ th_mu))
                g_eta = g_eta + 2.0 * (self.h_mat @ th_mu)
                g_theta = g_theta + 2.0 * np.outer(h_eta, self.mu_e)
            g_theta = g_theta * self.mask
        else:
            g_theta = np.zeros_like(theta)
        return val, g_eta, g_theta

    @property
    def _has_mu_e(self):
        return bool(np.any(self.mu_e != 0.0))

    def hessian_apply(self, eta, theta):
        """Action of the objective's Hessian on a direction (eta, theta)."""
        h_eta = self.h_mat @ eta
        out_eta = 2.0 * h_eta
        if theta.size:
            out_theta = 2.0 * ((self.h_mat @ theta) @ self.sigma_e)
            if self._has_mu_e:
                th_mu = theta @ self.mu_e
                out_eta = out_eta + 2.0 * (self.h_mat @ th_mu)
                out_theta = out_theta + 2.0 * np.outer(h_eta, self.mu_e)
            out_theta = out_theta * self.mask
        else:
            out_theta = np.zeros_like(theta)
        return out_eta, out_theta

    def with_x0(self, x0):
        """Same program re-anchored at a new initial state (cheap)."""
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.size != self.n:
            raise OptimizerError(f"x0 has length {x0.size}, expected {self.n}")
        bqa_x0 = self.bqa @ x0
        b_eta = 2.0 * (bqa_x0 + self.bqd_mu)
        if self._has_mu_e:
            g_theta = self.g_theta_const + 2.0 * np.outer(bqa_x0, self.mu_e)
        else:
            g_theta = self.g_theta_const
        constant = float(x0 @ self.aqa @ x0 + 2.0 * (x0 @ self.aqd_mu)
                         + self.dqd_sigma_tr)
        return QpProblem(self.h_mat, self.bqd, self.bqa, self.sigma_e,
                         self.mu_e, self.g_theta_const, b_eta, g_theta,
                         constant, x0, self.spec, self.basis, self.horizon,
                         self.n, self.m, self.mask, self.aqa, self.aqd_mu,
                         self.dqd_sigma_tr, self.bqd_mu)


def assemble_qp(lifted: LiftedModel, cost: CostBlocks, moments: Moments,
                x0, spec: ConstraintSpec, basis: BasisFamily) -> QpProblem:
    """Build the dense program data from the lifted model and moment blocks."""
    if cost.horizon != lifted.horizon:
        raise OptimizerError("cost and lifted horizons differ")
    if moments.horizon != lifted.horizon:
        raise OptimizerError("moment blocks were built for a different horizon")
    if moments.n != lifted.n:
        raise OptimizerError("moment noise dimension does not match the plant")
    if moments.d != basis.stage_dim:
        raise OptimizerError("moment feature dimension does not match the basis")
    spec.validate_basis(basis)

    q_full, r_full = cost.q_full, cost.r_full
    qb = q_full @ lifted.phi_b
    qd = q_full @ lifted.phi_d
    h_mat = lifted.phi_b.T @ qb + r_full
    h_mat = 0.5 * (h_mat + h_mat.T)
    try:
        np.linalg.cholesky(h_mat)
    except np.linalg.LinAlgError:
        raise OptimizerError("input-block Hessian B'QB + R is not positive definite")

    sigma_e = moments.sigma_e()
    sig_sym = 0.5 * (sigma_e + sigma_e.T)
    if sig_sym.size:
        min_eig = np.linalg.eigvalsh(sig_sym).min()
        if min_eig < -1e-10 * (1.0 + np.trace(sig_sym)):
            raise OptimizerError(
                f"moment kernel Sigma_e is not PSD (min eig {min_eig:.3e})")

    bqd = lifted.phi_b.T @ qd
    bqa = lifted.phi_b.T @ (q_full @ lifted.phi_a)
    aqa = lifted.phi_a.T @ q_full @ lifted.phi_a
    mu_w = moments.mu_w()
    aqd_mu = (lifted.phi_a.T @ qd) @ mu_w
    dqd = lifted.phi_d.T @ qd
    dqd_sigma_tr = float(np.sum(dqd * moments.sigma_w()))
    bqd_mu = bqd @ mu_w
    g_theta_const = 2.0 * (bqd @ moments.sigma_e_prime())
    mu_e = moments.mu_e()

    mask = causality_mask(lifted.horizon, lifted.m, moments.d).astype(float)
    g_theta_const = g_theta_const * mask

    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != lifted.n:
        raise OptimizerError(f"x0 has length {x0.size}, expected {lifted.n}")
    base = QpProblem(h_mat, bqd, bqa, sig_sym, mu_e, g_theta_const,
                     np.zeros(h_mat.shape[0]), g_theta_const, 0.0, x0, spec,
                     basis, lifted.horizon, lifted.n, lifted.m, mask, aqa,
                     aqd_mu, dqd_sigma_tr, bqd_mu)
    return base.with_x0(x0)


@dataclass
class SolveReport:
    """Outcome of one solve: the policy point plus optimality bookkeeping."""

    params: PolicyParams
    objective: float
    iterations: int
    kkt_residual: float
    projection_count: int
    wall_time: float
    certified: bool
    method: str
    trace: Optional[list] = None


def _estimate_curvature(qp: QpProblem, iters=120):
    rng = np.random.default_rng(12345)
    eta = rng.standard_normal(qp.h_mat.shape[0])
    theta = rng.standard_normal((qp.h_mat.shape[0], qp.k_cols)) * qp.mask
    lam = 0.0
    for _ in range(iters):
        norm = math.hypot(np.linalg.norm(eta), np.linalg.norm(theta))
        if norm == 0:
            break
        eta /= norm
        theta /= norm
        new_eta, new_theta = qp.hessian_apply(eta, theta)
        new = float(eta @ new_eta + np.sum(theta * new_theta))
        if lam > 0 and abs(new - lam) <= 1e-12 * lam:
            lam = new
            break
        lam = new
        eta, theta = new_eta, new_theta
    return max(lam, 1e-12)


def _make_projector(qp: QpProblem):
    """Per-iteration projection onto the feasible set; None if unsupported."""
    spec, basis, horizon, m, d = qp.spec, qp.basis, qp.horizon, qp.m, qp.basis.stage_dim
    bound = spec.stage_bound(horizon)
    if spec.energy_weight is not None:
        return None
    if spec.variant == "rowwise":
        weights = np.concatenate([[1.0], np.full(qp.k_cols, basis.component_bound)])

        def proj(eta, theta):
            joint = np.concatenate([eta[:, None], theta], axis=1)
            lhs = np.abs(joint) @ weights
            if np.all(lhs <= bound):
                return eta, theta
            out = np.empty_like(joint)
            for r in range(joint.shape[0]):
                out[r] = weighted_l1_projection(joint[r], weights, bound)
            return out[:, 0].copy(), np.ascontiguousarray(out[:, 1:])

        return proj
    try:
        project_stage(spec, basis, horizon, 1, np.zeros(m), np.zeros((m, d)))
    except UnsupportedProjection:
        return None

    def proj(eta, theta):
        eta = eta.copy()
        theta = theta.copy()
        for t in range(horizon):
            pe, pt = project_stage(spec, basis, horizon, t,
                                   eta[t * m:(t + 1) * m],
                                   theta[t * m:(t + 1) * m, :t * d])
            eta[t * m:(t + 1) * m] = pe
            theta[t * m:(t + 1) * m, :t * d] = pt
        return eta, theta

    return proj


def _params(qp, eta, theta):
    return PolicyParams(eta, theta, qp.basis, qp.horizon, qp.m)


def _exact_feasible(qp, eta, theta):
    """Final safety rescale so check_feasible passes with zero tolerance."""
    params = _params(qp, eta, theta)
    report = check_feasible(params, qp.spec)
    if report.feasible:
        return params
    return scale_to_feasible(params, qp.spec)


def solve(qp: QpProblem, tol=1e-8, max_iter=50000, init=None,
          check_every=5, keep_trace=False) -> SolveReport:
    """Minimize the program; returns a feasible, optionally certified point.

    Terminates when the step-scaled projected-gradient (fixed-point)
    residual, normalized by the problem scale 1 + |grad f(start)|, drops
    below `tol`.  Hitting `max_iter` returns the best iterate flagged
    non-certified.  The reported KKT residual is
    |x - P(x - grad f(x))| / (1 + |grad f(x)|), the natural-map distance
    between -grad f and the normal cone at x.
    """
    t_start = time.perf_counter()
    nm, k = qp.h_mat.shape[0], qp.k_cols
    projector = _make_projector(qp)
    proj_count = 0
    trace = [] if keep_trace else None

    def feasible_point(eta, theta):
        nonlocal proj_count
        if projector is not None:
            proj_count += 1
            return projector(eta, theta)
        p = scale_to_feasible(_params(qp, eta, theta), qp.spec)
        return p.eta, p.theta

    eta = np.zeros(nm)
    theta = np.zeros((nm, k))
    f_val = qp.value(eta, theta)
    if init is not None:
        ie, it = (init.eta, init.theta) if isinstance(init, PolicyParams) else init
        ie = np.asarray(ie, dtype=float).copy()
        it = np.asarray(it, dtype=float).copy() * qp.mask
        # the feedback block is initial-state independent whenever the
        # features are centered, so (0, Theta_init) is a strong re-anchor
        for cand in ((ie, it), (np.zeros(nm), it)):
            ce, ct = feasible_point(cand[0], cand[1])
            f_cand = qp.value(ce, ct)
            if f_cand < f_val:
                eta, theta, f_val = ce, ct, f_cand

    lam = _estimate_curvature(qp)
    step = 1.0 / (1.05 * lam)

    if projector is None:
        return _solve_fallback(qp, eta, theta, f_val, step, tol, max_iter,
                               t_start, trace)

    _, g0_eta, g0_theta = qp.value_and_grad(eta, theta)
    scale0 = 1.0 + math.hypot(np.linalg.norm(g0_eta), np.linalg.norm(g0_theta))

    best_eta, best_theta, best_f = eta.copy(), theta.copy(), f_val
    y_eta, y_theta = eta.copy(), theta.copy()
    t_mom = 1.0
    iterations = 0
    resid = math.inf

    while iterations < max_iter:
        iterations += 1
        _, g_eta, g_theta = qp.value_and_grad(y_eta, y_theta)
        new_eta, new_theta = feasible_point(y_eta - step * g_eta,
                                            y_theta - step * g_theta)
        # gradient-based adaptive restart (O'Donoghue-Candes test)
        if float((y_eta - new_eta) @ (new_eta - eta)
                 + np.sum((y_theta - new_theta) * (new_theta - theta))) > 0:
            t_mom = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        mom = (t_mom - 1.0) / t_next
        y_eta = new_eta + mom * (new_eta - eta)
        y_theta = new_theta + mom * (new_theta - theta)
        eta, theta = new_eta, new_theta
        t_mom = t_next

        if iterations % check_every == 0 or iterations == max_iter:
            f_val, g_eta, g_theta = qp.value_and_grad(eta, theta)
            if f_val < best_f:
                best_eta, best_theta, best_f = eta.copy(), theta.copy(), f_val
            elif f_val > best_f + 1e-12 * (1.0 + abs(best_f)):
                # monotone safeguard: restart the momentum from the best point
                eta, theta = best_eta.copy(), best_theta.copy()
                y_eta, y_theta = eta.copy(), theta.copy()
                t_mom = 1.0
            pe, pt = feasible_point(eta - step * g_eta, theta - step * g_theta)
            resid = math.hypot(np.linalg.norm(eta - pe),
                               np.linalg.norm(theta - pt)) / (step * scale0)
            if trace is not None:
                trace.append((iterations, f_val, resid))
            if resid <= tol:
                break

    certified = resid <= tol
    params = _exact_feasible(qp, best_eta, best_theta)
    f_final, g_eta, g_theta = qp.value_and_grad(params.eta, params.theta)
    pe, pt = feasible_point(params.eta - g_eta, params.theta - g_theta)
    g_norm = math.hypot(np.linalg.norm(g_eta), np.linalg.norm(g_theta))
    kkt = math.hypot(np.linalg.norm(params.eta - pe),
                     np.linalg.norm(params.theta - pt)) / (1.0 + g_norm)
    return SolveReport(params, f_final, iterations, kkt, proj_count,
                       time.perf_counter() - t_start, certified,
                       "projected-fista", trace)


def _solve_fallback(qp, eta, theta, f_val, step, tol, max_iter, t_start, trace):
    """Feasible-scaling descent for variants without an exact projection.

    Gradient steps pulled back by radial scaling; monotone by construction.
    Not a projection method, so no KKT certificate is issued.
    """
    stall = 0
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        _, g_eta, g_theta = qp.value_and_grad(eta, theta)
        s = step
        improved = False
        for _ in range(40):
            cand = scale_to_feasible(
                _params(qp, eta - s * g_eta, theta - s * g_theta), qp.spec)
            f_new = qp.value(cand.eta, cand.theta)
            if f_new < f_val - 1e-15 * (1.0 + abs(f_val)):
                eta, theta, f_val = cand.eta, cand.theta, f_new
                improved = True
                break
            s *= 0.5
        if trace is not None and iterations % 10 == 0:
            trace.append((iterations, f_val, math.nan))
        if not improved:
            stall += 1
            if stall >= 3:
                break
        else:
            stall = 0
    params = _exact_feasible(qp, eta, theta)
    return SolveReport(params, qp.value(params.eta, params.theta), iterations,
                       math.nan, 0, time.perf_counter() - t_start, False,
                       "feasible-scaling", trace)

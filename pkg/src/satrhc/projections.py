"""Exact Euclidean projections onto the per-stage constraint sets.

The rowwise budget decouples into one weighted l1 ball per input row, which
has the classic sorted-threshold projection.  The Frobenius-ball variants
project by radial scaling (exact for a 2-norm ball), and the orthonormal
sum-of-norms budget reduces to a two-dimensional projection on the radial
plane spanned by the eta and Theta blocks.  The generic p in {1, inf}
budgets couple rows through a max and get no cheap exact projection here;
the solver falls back to feasible scaling for those.
"""

import math

import numpy as np

from .policy import ConstraintSpec, PolicyParams


class UnsupportedProjection(RuntimeError):
    """No exact per-stage Euclidean projection is available for this variant."""


def weighted_l1_projection(v, weights, radius):
    """Project v onto {x : sum_i weights_i |x_i| <= radius}, weights > 0.

    Sorted-threshold algorithm: the projection is a soft threshold
    x_i = sign(v_i) max(|v_i| - lam * w_i, 0) and the multiplier lam solves a
    piecewise-linear equation whose breakpoints are |v_i| / w_i.  The sort is
    stable, so ties resolve deterministically.
    """
    v = np.asarray(v, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    a = np.abs(v)
    if a.size == 0 or float(weights @ a) <= radius:
        return v.copy()
    if radius == 0.0:
        return np.zeros_like(v)
    ratios = a / weights
    order = np.argsort(-ratios, kind="stable")
    wa = (weights * a)[order]
    w2 = (weights * weights)[order]
    lam = (np.cumsum(wa) - radius) / np.cumsum(w2)
    rd = ratios[order]
    nxt = np.concatenate([rd[1:], [-np.inf]])
    valid = np.nonzero((lam >= nxt) & (lam <= rd))[0]
    k = valid[0] if valid.size else lam.size - 1
    lam_star = max(float(lam[k]), 0.0)
    return np.sign(v) * np.maximum(a - lam_star * weights, 0.0)


def _two_block_projection(block_a, block_b, scale_b, radius):
    """Project onto {(a, b) : ||a|| + scale_b ||b|| <= radius} (Frobenius norms)."""
    alpha = float(np.linalg.norm(block_a))
    beta = float(np.linalg.norm(block_b))
    if alpha + scale_b * beta <= radius:
        return block_a.copy(), block_b.copy()
    lam = (alpha + scale_b * beta - radius) / (1.0 + scale_b * scale_b)
    x, y = alpha - lam, beta - lam * scale_b
    if y < 0.0:
        y, x = 0.0, min(alpha, radius)
    elif x < 0.0:
        x, y = 0.0, min(beta, radius / scale_b)
    fa = x / alpha if alpha > 0 else 0.0
    fb = y / beta if beta > 0 else 0.0
    return block_a * fa, block_b * fb


def _radial(block_a, block_b, radius):
    norm = math.hypot(float(np.linalg.norm(block_a)), float(np.linalg.norm(block_b)))
    if norm <= radius:
        return block_a.copy(), block_b.copy()
    f = radius / norm
    return block_a * f, block_b * f


def project_stage(spec: ConstraintSpec, basis, horizon, t, eta_t, theta_t_free):
    """Euclidean projection of one stage's (eta_t, free Theta_t columns)."""
    eta_t = np.asarray(eta_t, dtype=float)
    th = np.asarray(theta_t_free, dtype=float).reshape(eta_t.size, -1)
    bound = spec.stage_bound(horizon)
    if spec.energy_weight is not None:
        raise UnsupportedProjection("the energy budget couples all stages")
    if spec.variant == "rowwise":
        m = eta_t.size
        k = th.shape[1]
        out_eta = np.empty_like(eta_t)
        out_th = np.empty_like(th)
        weights = np.concatenate([[1.0], np.full(k, basis.component_bound)])
        for i in range(m):
            row = np.concatenate([[eta_t[i]], th[i]])
            proj = weighted_l1_projection(row, weights, bound)
            out_eta[i] = proj[0]
            out_th[i] = proj[1:]
        return out_eta, out_th
    if spec.variant == "orthonormal":
        return _two_block_projection(eta_t, th, math.sqrt(max(horizon - 1, 0)), bound)
    if spec.variant == "finite-dim":
        return _radial(eta_t, th, bound)
    if spec.variant == "generic" and spec.p == 2.0:
        if spec.corrected_growth:
            factor = math.sqrt(1.0 + basis.vector_bound ** 2 * t * basis.stage_dim)
        else:
            factor = math.sqrt(1.0 + basis.vector_bound * t)
        return _radial(eta_t, th, bound / factor)
    raise UnsupportedProjection(
        f"no exact projection for variant {spec.variant!r} with p={spec.p}")


def project_params(params: PolicyParams, spec: ConstraintSpec) -> PolicyParams:
    """Stage-by-stage projection of a full parameter point."""
    eta = params.eta.copy()
    theta = params.theta.copy()
    m, d = params.m, params.d
    for t in range(params.horizon):
        pe, pt = project_stage(spec, params.basis, params.horizon, t,
                               params.eta_stage(t), params.theta_stage_free(t))
        eta[t * m:(t + 1) * m] = pe
        theta[t * m:(t + 1) * m, :t * d] = pt
    return PolicyParams(eta, theta, params.basis, params.horizon, params.m)

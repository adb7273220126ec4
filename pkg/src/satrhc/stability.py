"""Mean-square-boundedness certificate for Schur-stable plants.

For each segment offset l = 1..n_control the certificate builds a Lyapunov
matrix P_l solving (A^l)' P_l A^l - P_l = -I and bounds the conditional
growth of x' P_l x over one segment of any input-bounded policy:

    E[x_+l' P_l x_+l | x] <= x' P_l x - |x|^2 + 2 c1_l |x|_inf + c2_l,

where c1_l = m |(A^l)' P_l B_l|_inf u_max and c2_l collects the worst-case
input energy, the noise energy, and the feedback cross terms, the latter
bounded over all coefficient matrices with row sums below u_max/phi_max
(the rowwise feasibility budget) via submultiplicative norm inequalities.
Outside the radius r_l = (c1_l + sqrt(c1_l^2 + c2_l zeta_l))/zeta_l this
gives a geometric drift with factor rho_l = 1 - (1 - zeta_l)/lambda_max(P_l),
and chaining segments yields an explicit finite bound on sup_t E|x_t|^2.

Everything is deterministic and conservative: any valid upper bound on the
feedback terms preserves soundness of the certificate.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .model import SystemModel
from .moments import Moments
from .simulate import TrajectoryBatch


class SchurStabilityError(RuntimeError):
    """The open-loop matrix violates the Schur-stability requirement."""


def spectral_radius(mat):
    return float(np.max(np.abs(np.linalg.eigvals(mat))))


def solve_discrete_lyapunov(mat, residual_tol=1e-9):
    """P solving M' P M - P = -I for a Schur-stable M; symmetric PD.

    Refuses matrices with spectral radius >= 1 (the certificate requires the
    zero-input plant to be a strict contraction in the Lyapunov sense).
    """
    mat = np.asarray(mat, dtype=float)
    rho = spectral_radius(mat)
    if rho >= 1.0:
        raise SchurStabilityError(
            "discrete Lyapunov equation needs a Schur-stable matrix (all "
            f"eigenvalues strictly inside the unit circle); spectral radius is {rho:.4f}")
    p = sla.solve_discrete_lyapunov(mat.T, np.eye(mat.shape[0]))
    p = 0.5 * (p + p.T)
    resid = np.linalg.norm(mat.T @ p @ mat - p + np.eye(mat.shape[0]), "fro")
    if resid > residual_tol:
        raise SchurStabilityError(f"Lyapunov residual {resid:.3e} exceeds {residual_tol}")
    return p


def _induced_inf(mat):
    return float(np.abs(mat).sum(axis=1).max()) if mat.size else 0.0


@dataclass
class StabilityCertificate:
    """Per-offset Lyapunov data plus the chained moment bound."""

    n_control: int
    u_max: float
    phi_max: float
    zeta: np.ndarray
    p_mats: list
    c1: np.ndarray
    c2: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    lyapunov_residuals: np.ndarray
    rho_max: float
    r_prime: float
    lam_bar: float
    lam_under: float
    rho_prime: float
    b_const: float
    b_prime: float
    asymptotic_bound: float
    zeta_surface: Optional[list] = None

    def sup_bound(self, x0):
        """Bound on sup_t E|x_t|^2 from the given start (covers t = 0 too)."""
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        p_nc = self.p_mats[-1]
        v0 = float(x0 @ p_nc @ x0)
        head = max(self.rho_prime * v0, self.b_const / (1.0 - self.rho_max_nc))
        lam_min = float(np.linalg.eigvalsh(p_nc)[0])
        return max(float(x0 @ x0), (head + self.b_prime) / lam_min)

    @property
    def rho_max_nc(self):
        return float(self.rho[-1])

    def describe(self):
        lines = [
            "mean-square boundedness certificate",
            f"  n_control = {self.n_control}, u_max = {self.u_max}, "
            f"phi_max = {self.phi_max}",
            "  per-offset constants:",
            "    l   zeta      rho_l     r_l           c1_l          c2_l        lyap resid",
        ]
        for i in range(self.n_control):
            lines.append(
                f"    {i + 1:<3d} {self.zeta[i]:<9.4f} {self.rho[i]:<9.6f} "
                f"{self.r[i]:<13.6g} {self.c1[i]:<13.6g} {self.c2[i]:<11.6g} "
                f"{self.lyapunov_residuals[i]:.2e}")
        lines += [
            f"  rho' = {self.rho_prime:.6g}, r' = {self.r_prime:.6g}, "
            f"lam_bar = {self.lam_bar:.6g}, lam_under = {self.lam_under:.6g}",
            f"  b = {self.b_const:.6g}, b' = {self.b_prime:.6g}",
            f"  asymptotic bound on sup_t E|x_t|^2: {self.asymptotic_bound:.6g}",
        ]
        if self.zeta_surface is not None:
            best = min(self.zeta_surface, key=lambda zb: zb[1])
            lines.append(f"  zeta grid: {len(self.zeta_surface)} points, "
                         f"best zeta = {best[0]:.4f} (bound {best[1]:.6g})")
        return "\n".join(lines)


def _segment_pieces(sys, n_control):
    a, b = sys.a_mat, sys.b_mat
    n = sys.n
    powers = [np.eye(n)]
    for _ in range(n_control):
        powers.append(a @ powers[-1])
    b_segs, d_segs = [], []
    for ell in range(1, n_control + 1):
        b_segs.append(np.concatenate([powers[ell - 1 - j] @ b for j in range(ell)], axis=1))
        d_segs.append(np.concatenate([powers[ell - 1 - j] for j in range(ell)], axis=1))
    return powers, b_segs, d_segs


def _lambda2_segment(moments: Moments, ell):
    """E[w_seg e_seg'] for one segment: (ell n, (ell-1) d) with stage blocks."""
    n, d = moments.n, moments.d
    lam2 = np.zeros((ell * n, max(ell - 1, 0) * d))
    for i in range(ell - 1):
        lam2[i * n:(i + 1) * n, i * d:(i + 1) * d] = moments.stage_sigma_we
    return lam2


def _constants_for(sys, powers, b_segs, d_segs, p_mat, ell, u_max, phi_max,
                   moments):
    """c1 and c2 of the one-segment drift bound, evaluated with matrix p_mat."""
    m = sys.m
    n = sys.n
    a_l = powers[ell]
    b_l = b_segs[ell - 1]
    d_l = d_segs[ell - 1]
    c1 = m * _induced_inf(a_l.T @ p_mat @ b_l) * u_max
    bpb = b_l.T @ p_mat @ b_l
    sigma_seg = np.kron(np.eye(ell), moments.stage_sigma_w)
    c2 = m * _induced_inf(bpb) * u_max ** 2
    c2 += float(np.sum((d_l.T @ p_mat @ d_l) * sigma_seg))
    if ell > 1:
        ups_rows = ell * m
        ups_inf = u_max / phi_max
        lam1_norm = float(np.linalg.norm(moments.stage_sigma_e, 2))
        c2 += lam1_norm * float(np.linalg.norm(bpb, 2)) * ups_rows * ups_inf ** 2
        lam2 = _lambda2_segment(moments, ell)
        cross = np.linalg.norm(b_l.T @ p_mat @ d_l @ lam2, "fro")
        c2 += 2.0 * math.sqrt(ups_rows) * ups_inf * float(cross)
    return c1, c2


def certificate(sys: SystemModel, n_control, u_max, phi_max,
                moments: Moments, zeta=0.5, zeta_grid=None) -> StabilityCertificate:
    """Build the certificate; refuses non-Schur plants and nonzero-mean noise.

    `zeta` may be a scalar (shared by all offsets) or a per-offset array in
    the open interval (0, 1).  With `zeta_grid` = k the shared zeta is also
    swept over a k-point grid and the value minimizing the asymptotic bound
    is reported alongside.
    """
    rho_open = spectral_radius(sys.a_mat)
    if rho_open >= 1.0:
        raise SchurStabilityError(
            "certificate refused: the zero-input plant must be Schur stable "
            "(all eigenvalues strictly inside the unit circle), but the state "
            f"matrix has spectral radius {rho_open:.4f}")
    if u_max <= 0 and u_max != 0.0:
        raise ValueError("u_max must be nonnegative")
    if phi_max <= 0:
        raise ValueError("phi_max must be positive")
    mu_w_scale = np.max(np.abs(moments.stage_mu_w)) if moments.stage_mu_w.size else 0.0
    tol_w = 1e-9 if moments.se_mu_w is None else max(5.0 * np.max(moments.se_mu_w), 1e-9)
    if mu_w_scale > tol_w:
        raise ValueError("certificate requires zero-mean noise")
    mu_e_scale = np.max(np.abs(moments.stage_mu_e)) if moments.stage_mu_e.size else 0.0
    tol_e = 1e-9 if moments.se_mu_e is None else max(5.0 * np.max(moments.se_mu_e), 1e-9)
    if mu_e_scale > tol_e:
        raise ValueError("certificate requires centered (zero-mean) basis features")

    def build(zetas):
        powers, b_segs, d_segs = _segment_pieces(sys, n_control)
        p_mats, resids = [], []
        for ell in range(1, n_control + 1):
            p = solve_discrete_lyapunov(powers[ell])
            p_mats.append(p)
            resids.append(np.linalg.norm(
                powers[ell].T @ p @ powers[ell] - p + np.eye(sys.n), "fro"))
        c1 = np.empty(n_control)
        c2 = np.empty(n_control)
        r = np.empty(n_control)
        rho = np.empty(n_control)
        for i, ell in enumerate(range(1, n_control + 1)):
            lam_max = float(np.linalg.eigvalsh(p_mats[i])[-1])
            z = zetas[i]
            if not (max(0.0, 1.0 - lam_max) < z < 1.0):
                raise ValueError(
                    f"zeta[{i}] = {z} outside the admissible interval "
                    f"({max(0.0, 1.0 - lam_max):.4f}, 1)")
            c1[i], c2[i] = _constants_for(sys, powers, b_segs, d_segs,
                                          p_mats[i], ell, u_max, phi_max, moments)
            r[i] = (c1[i] + math.sqrt(c1[i] ** 2 + c2[i] * z)) / z
            rho[i] = 1.0 - (1.0 - z) / lam_max
            if not 0.0 < rho[i] < 1.0:
                raise SchurStabilityError(f"drift factor rho[{i}] = {rho[i]} invalid")
        lam_maxes = np.array([np.linalg.eigvalsh(p)[-1] for p in p_mats])
        lam_mins = np.array([np.linalg.eigvalsh(p)[0] for p in p_mats])
        rho_all = float(rho.max())
        r_prime = float(r.max())
        lam_bar = float(lam_maxes.max())
        lam_under = float(lam_mins.min())
        p_nc = p_mats[-1]
        rho_prime = rho_all * lam_bar * lam_maxes[-1] / (lam_under * lam_mins[-1])
        # b: one full segment started inside the radius r_{n_control}
        a_nc = powers[n_control]
        quad = float(np.linalg.eigvalsh(a_nc.T @ p_nc @ a_nc)[-1])
        b_const = quad * sys.n * r[-1] ** 2 + 2.0 * c1[-1] * r[-1] + c2[-1]
        # b': any offset started inside radius r', measured with P_{n_control}
        b_prime = 0.0
        for ell in range(1, n_control + 1):
            c1t, c2t = _constants_for(sys, powers, b_segs, d_segs, p_nc, ell,
                                      u_max, phi_max, moments)
            quad_l = float(np.linalg.eigvalsh(powers[ell].T @ p_nc @ powers[ell])[-1])
            b_prime = max(b_prime,
                          quad_l * sys.n * r_prime ** 2 + 2.0 * c1t * r_prime + c2t)
        lam_min_nc = float(lam_mins[-1])
        asym = (b_const / (1.0 - rho[-1]) + b_prime) / lam_min_nc
        return StabilityCertificate(
            n_control, float(u_max), float(phi_max), np.asarray(zetas, dtype=float),
            p_mats, c1, c2, r, rho, np.asarray(resids), rho_all, r_prime,
            lam_bar, lam_under, rho_prime, b_const, b_prime, asym)

    zetas = np.full(n_control, float(zeta)) if np.isscalar(zeta) \
        else np.asarray(zeta, dtype=float)
    if zetas.size != n_control:
        raise ValueError("zeta schedule length must equal n_control")
    cert = build(zetas)
    if zeta_grid:
        surface = []
        best = cert
        for z in np.linspace(1.0 / (zeta_grid + 1), zeta_grid / (zeta_grid + 1.0),
                             zeta_grid):
            cand = build(np.full(n_control, z))
            surface.append((float(z), cand.asymptotic_bound))
            if cand.asymptotic_bound < best.asymptotic_bound:
                best = cand
        best.zeta_surface = surface
        cert = best
    return cert


@dataclass
class SecondMomentTrace:
    """Per-time empirical E|x_t|^2 with standard errors and the running sup."""

    mean: np.ndarray
    se: np.ndarray
    running_sup: np.ndarray

    @property
    def sup(self):
        return float(self.running_sup[-1])


def empirical_second_moment(batch: TrajectoryBatch) -> SecondMomentTrace:
    valid = ~batch.flagged
    if not np.any(valid):
        raise ValueError("all realizations flagged")
    sq = (batch.states[valid] ** 2).sum(axis=2)
    n = sq.shape[0]
    mean = sq.mean(axis=0)
    se = sq.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return SecondMomentTrace(mean, se, np.maximum.accumulate(mean))


@dataclass
class DriftRow:
    x0_index: int
    offset: int
    lhs_mean: float
    lhs_se: float
    rhs: float
    ok: bool


def drift_check(sys: SystemModel, q_stage, r_stage, controller, noise,
                cert: StabilityCertificate, x0_list, realizations,
                master_seed) -> list:
    """Empirical one-segment drift test from starts outside the radii.

    For each start x0 with |x0|_inf > r_l the certificate promises
    E[x_l' P_l x_l] <= rho_l x0' P_l x0; the check allows four standard
    errors of sampling slack.  Starts inside a radius are skipped (the
    inequality says nothing there).
    """
    from .simulate import run_receding_horizon

    rows = []
    for idx, x0 in enumerate(x0_list):
        x0 = np.asarray(x0, dtype=float)
        batch = run_receding_horizon(sys, q_stage, r_stage, controller, noise,
                                     x0, cert.n_control, realizations,
                                     master_seed + idx)
        for i, ell in enumerate(range(1, cert.n_control + 1)):
            if np.max(np.abs(x0)) <= cert.r[i]:
                continue
            p = cert.p_mats[i]
            vals = np.einsum("ri,ij,rj->r", batch.states[:, ell, :], p,
                             batch.states[:, ell, :])
            lhs = float(vals.mean())
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            rhs = float(cert.rho[i] * (x0 @ p @ x0))
            rows.append(DriftRow(idx, ell, lhs, se, rhs, lhs <= rhs + 4.0 * se))
    return rows

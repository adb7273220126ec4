"""Off-line moment matrices of the saturated noise features.

The convex synthesis program only sees the noise through a handful of fixed
expectations: E[e(w) e(w)'], E[w e(w)'], E[e(w)], E[w], E[w w'].  For
i.i.d. stages it is enough to know the single-stage blocks; the lifted
matrices are tiled from them on demand (with the exact mean cross-blocks
when the means are nonzero, so the assembled objective stays unbiased).

Closed forms are available for the standard sigmoid and saturation maps
under zero-mean Gaussian noise with independent components, and for the
Fourier sine family under uniform box noise.  Everything else goes through
the seeded Monte Carlo estimator.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import BasisFamily, fourier_sine, scaled_sigmoid, standard_saturation
from .noise import NoiseSpec, gaussian_noise, uniform_box_noise
from .special import (
    confluent_u,
    erf,
    erfc,
    gaussian_half_sigmoid_sq,
    gaussian_tail,
    gaussian_trunc_square,
    inc_gamma,
)


class MomentsError(ValueError):
    pass


@dataclass(frozen=True)
class Moments:
    """Single-stage moment blocks plus the horizon used for lifting.

    stage_sigma_e   E[e e'], (d, d)
    stage_sigma_we  E[w e'], (n, d)
    stage_mu_e      E[e], (d,)
    stage_mu_w      E[w], (n,)
    stage_sigma_w   E[w w'], (n, n)
    horizon         number of plant stages N; the feature lift spans N-1
    sample_count    Monte Carlo sample size (0 for closed forms)
    se_*            standard errors of the estimates (None for closed forms)
    """

    n: int
    d: int
    horizon: int
    stage_sigma_e: np.ndarray
    stage_sigma_we: np.ndarray
    stage_mu_e: np.ndarray
    stage_mu_w: np.ndarray
    stage_sigma_w: np.ndarray
    sample_count: int = 0
    se_sigma_e: Optional[np.ndarray] = None
    se_sigma_we: Optional[np.ndarray] = None
    se_mu_e: Optional[np.ndarray] = None
    se_mu_w: Optional[np.ndarray] = None
    se_sigma_w: Optional[np.ndarray] = None
    descriptor: Optional[dict] = None

    @property
    def feature_stages(self):
        return self.horizon - 1

    def sigma_e(self):
        """Lifted E[e(w) e(w)'] over the N-1 feature stages."""
        k, d = self.feature_stages, self.d
        out = np.tile(np.outer(self.stage_mu_e, self.stage_mu_e), (k, k))
        for i in range(k):
            out[i * d:(i + 1) * d, i * d:(i + 1) * d] = self.stage_sigma_e
        return out

    def sigma_e_prime(self):
        """Lifted E[w e(w)'] with w over N stages, e over N-1 stages."""
        k, d, n = self.feature_stages, self.d, self.n
        out = np.tile(np.outer(self.stage_mu_w, self.stage_mu_e),
                      (self.horizon, k))
        for i in range(k):
            out[i * n:(i + 1) * n, i * d:(i + 1) * d] = self.stage_sigma_we
        return out

    def mu_e(self):
        return np.tile(self.stage_mu_e, self.feature_stages)

    def mu_w(self):
        return np.tile(self.stage_mu_w, self.horizon)

    def sigma_w(self):
        """Lifted E[w w'] over N stages."""
        n = self.n
        out = np.tile(np.outer(self.stage_mu_w, self.stage_mu_w),
                      (self.horizon, self.horizon))
        for i in range(self.horizon):
            out[i * n:(i + 1) * n, i * n:(i + 1) * n] = self.stage_sigma_w
        return out

    def with_horizon(self, horizon):
        if horizon < 1:
            raise MomentsError("horizon must be >= 1")
        return Moments(self.n, self.d, horizon, self.stage_sigma_e,
                       self.stage_sigma_we, self.stage_mu_e, self.stage_mu_w,
                       self.stage_sigma_w, self.sample_count,
                       self.se_sigma_e, self.se_sigma_we, self.se_mu_e,
                       self.se_mu_w, self.se_sigma_w, self.descriptor)


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def sigmoid_second_moment(sigma):
    """E[phi(w)^2] for phi(t) = t/sqrt(1+t^2), w ~ N(0, sigma^2)."""
    return 2.0 * gaussian_half_sigmoid_sq(sigma)


def sigmoid_cross_moment(sigma):
    """E[phi(w) w] for the standard sigmoid; equals (s/sqrt2) U(1/2, 0, 1/(2 s^2))."""
    s = float(sigma)
    if s <= 0:
        raise MomentsError("sigma must be positive")
    return s / math.sqrt(2.0) * confluent_u(0.5, 0.0, 1.0 / (2.0 * s * s))


def closed_form_sigmoid_moments(sigmas):
    """Diagonal feature moments of the standard sigmoid under N(0, diag(sigma^2)).

    Returns (second-moment entries, cross-moment entries), one pair per
    component.  Only the unscaled sigmoid has this closed form.
    """
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if np.any(sigmas <= 0):
        raise MomentsError("all sigmas must be positive")
    m2 = np.array([sigmoid_second_moment(s) for s in sigmas])
    xm = np.array([sigmoid_cross_moment(s) for s in sigmas])
    return m2, xm


def saturation_second_moment(sigma):
    """E[sat(w)^2] = s^2 erf(1/(sqrt2 s)) - sqrt(2/pi) s e^(-1/(2 s^2)) + erfc(1/(sqrt2 s))."""
    s = float(sigma)
    return (2.0 * gaussian_trunc_square(s) + 2.0 * gaussian_tail(1.0, s))


def saturation_cross_moment(sigma):
    """E[sat(w) w]; the truncated-square and tail-linear pieces collapse to s^2 erf(1/(sqrt2 s))."""
    s = float(sigma)
    if s <= 0:
        raise MomentsError("sigma must be positive")
    return s * s * float(erf(1.0 / (math.sqrt(2.0) * s)))


def closed_form_saturation_moments(sigmas):
    """Diagonal feature moments of the standard saturation under N(0, diag(sigma^2))."""
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if np.any(sigmas <= 0):
        raise MomentsError("all sigmas must be positive")
    m2 = np.array([saturation_second_moment(s) for s in sigmas])
    xm = np.array([saturation_cross_moment(s) for s in sigmas])
    return m2, xm


def closed_form_uniform_sine_moments(modes, support, n):
    """Stage moment blocks of the Fourier sine family under uniform box noise.

    E[sin(pi nu t/a) sin(pi mu t/a)] = delta/2 and
    E[t sin(pi nu t/a)] = a (-1)^(nu+1) / (pi nu), scaled by the sqrt(2/n)
    normalization of the family.  Returns (sigma_e block (d, d),
    sigma_we block (n, d)) with d = n * modes.
    """
    if modes < 1 or support <= 0 or n < 1:
        raise MomentsError("need modes >= 1, support > 0, n >= 1")
    d = n * modes
    scale = math.sqrt(2.0 / n)
    sigma_e = np.zeros((d, d))
    sigma_we = np.zeros((n, d))
    for nu in range(1, modes + 1):
        for j in range(n):
            col = (nu - 1) * n + j
            sigma_e[col, col] = scale * scale * 0.5
            sigma_we[j, col] = scale * support * (-1.0) ** (nu + 1) / (math.pi * nu)
    return sigma_e, sigma_we


def closed_form_moments(basis: BasisFamily, noise: NoiseSpec, horizon) -> Moments:
    """Build a full Moments object from the closed forms, where they exist."""
    if basis.n != noise.n:
        raise MomentsError("basis and noise dimensions differ")
    n = basis.n
    if (basis.kind in ("scaled_sigmoid", "saturation") and noise.kind == "gaussian"):
        if np.any(noise.mean != 0.0):
            raise MomentsError("closed forms require zero-mean Gaussian noise")
        offdiag = noise.cov - np.diag(np.diag(noise.cov))
        if np.any(offdiag != 0.0):
            raise MomentsError("closed forms require independent components")
        sigmas = np.sqrt(np.diag(noise.cov))
        if np.any(sigmas <= 0):
            raise MomentsError("closed forms require positive variances")
        if basis.kind == "scaled_sigmoid":
            if not (basis.params["alpha"] == 1.0 and basis.params["beta"] == 1.0):
                raise MomentsError("sigmoid closed form is for the unscaled map only")
            m2, xm = closed_form_sigmoid_moments(sigmas)
        else:
            m2, xm = closed_form_saturation_moments(sigmas)
        return Moments(n, n, horizon, np.diag(m2), np.diag(xm), np.zeros(n),
                       np.zeros(n), noise.raw_second_moment(), 0,
                       descriptor=_descriptor(basis, noise, horizon, 0, None))
    if basis.kind == "fourier_sine" and noise.kind == "uniform":
        if basis.params["support"] != noise.support:
            raise MomentsError("basis support does not match the noise box")
        se_blk, swe_blk = closed_form_uniform_sine_moments(
            int(basis.params["modes"]), noise.support, n)
        return Moments(n, basis.stage_dim, horizon, se_blk, swe_blk,
                       np.zeros(basis.stage_dim), np.zeros(n),
                       noise.raw_second_moment(), 0,
                       descriptor=_descriptor(basis, noise, horizon, 0, None))
    raise MomentsError(f"no closed form for basis {basis.kind!r} with noise {noise.kind!r}")


# ---------------------------------------------------------------------------
# Monte Carlo estimator
# ---------------------------------------------------------------------------

def repair_psd(mat, rel_floor=1e-8):
    """Symmetrize and clip tiny negative eigenvalues of an estimated Gram matrix.

    Violations beyond rel_floor * trace are treated as estimator failures
    rather than silently repaired.
    """
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    floor = -rel_floor * max(np.trace(sym), 1e-300)
    if vals.min() < floor:
        raise MomentsError(
            f"moment matrix is indefinite beyond tolerance (min eig {vals.min():.3e})"
        )
    clipped = np.clip(vals, 0.0, None)
    return (vecs * clipped) @ vecs.T


def _descriptor(basis, noise, horizon, samples, seed):
    return {"version": 1, "basis": basis.descriptor(),
            "noise": noise.descriptor(), "horizon": int(horizon),
            "samples": int(samples), "seed": seed}


def monte_carlo_moments(basis: BasisFamily, noise: NoiseSpec, horizon,
                        samples, seed, batch=131072) -> Moments:
    """Seeded sample moments of (w, e(w)) for one stage, tiled to the horizon.

    The stage-i.i.d. structure means a single stage block is all that has to
    be estimated.  Accumulation runs over fixed-size batches in a fixed
    order (numpy pairwise sums within each batch), so the result is
    bit-reproducible for a given seed regardless of the batch count.
    """
    if basis.n != noise.n:
        raise MomentsError("basis and noise dimensions differ")
    if samples < 10_000:
        raise MomentsError("need at least 1e4 samples for usable moment estimates")
    n, d = basis.n, basis.stage_dim
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    sum_ee = np.zeros((d, d))
    sum_ee2 = np.zeros((d, d))
    sum_we = np.zeros((n, d))
    sum_we2 = np.zeros((n, d))
    sum_e = np.zeros(d)
    sum_e2 = np.zeros(d)
    sum_w = np.zeros(n)
    sum_w2 = np.zeros(n)
    sum_ww = np.zeros((n, n))
    sum_ww2 = np.zeros((n, n))

    done = 0
    while done < samples:
        k = min(batch, samples - done)
        w = noise.sample(rng, k)
        e = basis.eval_stage(w)
        ee = np.einsum("bi,bj->bij", e, e)
        we = np.einsum("bi,bj->bij", w, e)
        ww = np.einsum("bi,bj->bij", w, w)
        sum_ee += ee.sum(axis=0)
        sum_ee2 += (ee * ee).sum(axis=0)
        sum_we += we.sum(axis=0)
        sum_we2 += (we * we).sum(axis=0)
        sum_ww += ww.sum(axis=0)
        sum_ww2 += (ww * ww).sum(axis=0)
        sum_e += e.sum(axis=0)
        sum_e2 += (e * e).sum(axis=0)
        sum_w += w.sum(axis=0)
        sum_w2 += (w * w).sum(axis=0)
        done += k

    s = float(samples)

    def finish(total, total_sq):
        mean = total / s
        var = np.maximum(total_sq / s - mean * mean, 0.0)
        se = np.sqrt(var / s)
        return mean, se

    sigma_e_raw, se_sigma_e = finish(sum_ee, sum_ee2)
    sigma_we, se_sigma_we = finish(sum_we, sum_we2)
    mu_e, se_mu_e = finish(sum_e, sum_e2)
    mu_w, se_mu_w = finish(sum_w, sum_w2)
    sigma_w_raw, se_sigma_w = finish(sum_ww, sum_ww2)

    # repair the centered Gram, then restore the mean term: keeps both the
    # stage block and every lifted assembly PSD
    cov_e = repair_psd(sigma_e_raw - np.outer(mu_e, mu_e))
    sigma_e = cov_e + np.outer(mu_e, mu_e)
    cov_w = repair_psd(sigma_w_raw - np.outer(mu_w, mu_w))
    sigma_w = cov_w + np.outer(mu_w, mu_w)

    return Moments(n, d, horizon, sigma_e, sigma_we, mu_e, mu_w, sigma_w,
                   int(samples), se_sigma_e, se_sigma_we, se_mu_e, se_mu_w,
                   se_sigma_w, _descriptor(basis, noise, horizon, samples, seed))

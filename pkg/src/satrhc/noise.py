"""Stage noise models: Gaussian with arbitrary PSD covariance, or a uniform box.

Gaussian sampling goes through a pivoted-Cholesky factor so positive
semidefinite (possibly singular) covariances are handled without fuss.
All draws are made through numpy Generators supplied by the caller, which
keeps every consumer seedable.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import lapack


class NoiseError(ValueError):
    pass


def psd_factor(cov, tol=1e-10):
    """Return F with F F' = cov via pivoted Cholesky; cov must be symmetric PSD."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise NoiseError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12, rtol=1e-12):
        raise NoiseError("covariance is not symmetric")
    n = cov.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    scale = max(np.max(np.abs(np.diag(cov))), 1.0)
    c, piv, rank, info = lapack.dpstrf(cov, lower=1, tol=tol * scale)
    if info < 0:
        raise NoiseError("pivoted Cholesky failed")
    # dpstrf stops at `rank`; negative leading minors beyond tolerance mean
    # the matrix is genuinely indefinite
    lower = np.tril(c)
    lower[:, rank:] = 0.0
    perm = np.asarray(piv, dtype=int) - 1
    f = np.zeros_like(lower)
    f[perm, :] = lower
    resid = np.max(np.abs(f @ f.T - cov))
    if resid > 1e-8 * scale:
        raise NoiseError(f"covariance is not PSD (factor residual {resid:.3e})")
    return f


@dataclass(frozen=True)
class NoiseSpec:
    """Per-stage i.i.d. noise description.

    kind "gaussian": mean vector plus PSD covariance.
    kind "uniform":  independent components uniform on (-support, support).
    """

    kind: str
    n: int
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    support: Optional[float] = None
    _factor: np.ndarray = field(default=None, repr=False, compare=False)

    def sample(self, rng, size=1):
        """Draw `size` stage vectors, shape (size, n)."""
        if self.kind == "gaussian":
            z = rng.standard_normal((size, self.n))
            return self.mean[None, :] + z @ self._factor.T
        # open-interval scaled draws: random() yields [0, 1), so map through
        # (2r - 1) which never reaches +support and hits -support with
        # probability zero in float terms
        r = rng.random((size, self.n))
        return self.support * (2.0 * r - 1.0)

    def raw_second_moment(self):
        """E[w w'] (not the centered covariance)."""
        if self.kind == "gaussian":
            return self.cov + np.outer(self.mean, self.mean)
        return np.eye(self.n) * (self.support ** 2 / 3.0)

    def mean_vector(self):
        if self.kind == "gaussian":
            return self.mean.copy()
        return np.zeros(self.n)

    def descriptor(self):
        d = {"kind": self.kind, "n": self.n}
        if self.kind == "gaussian":
            d["mean"] = [float(v) for v in self.mean]
            d["cov"] = [[float(v) for v in row] for row in self.cov]
        else:
            d["support"] = float(self.support)
        return d


def gaussian_noise(mean, cov) -> NoiseSpec:
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise NoiseError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
    factor = psd_factor(cov)
    spec = NoiseSpec("gaussian", mean.size, mean=mean, cov=cov)
    object.__setattr__(spec, "_factor", factor)
    return spec


def uniform_box_noise(n, support) -> NoiseSpec:
    if support <= 0:
        raise NoiseError("support must be positive")
    return NoiseSpec("uniform", n, support=float(support))


def sample_noise(noise: NoiseSpec, rng) -> np.ndarray:
    """One stage vector w_t."""
    return noise.sample(rng, 1)[0]

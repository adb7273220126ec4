"""Bounded basis families for the noise-feedback policy.

A basis maps one stage noise vector w in R^n to a feature vector e(w) in
R^d with d = n * index_count, stacking the basis elements in index-major
order.  Every component is bounded by `component_bound` in absolute value,
exactly (outputs are clipped at the bound, so floating-point roundoff can
never leak past it).  The built-in kinds are odd functions, which keeps
E[e(w)] = 0 under noise distributions symmetric about zero.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class BasisFamily:
    """Componentwise bounded feature map for one noise stage.

    kind            identifying string ("scaled_sigmoid", "saturation",
                    "fourier_sine", "custom")
    n               noise dimension per stage
    index_count     number of basis elements (|I|); stage feature dim is
                    n * index_count
    component_bound sup over w of |e(w)_j| for every component j (phi_max)
    vector_bound    the bound used by the norm constraints (script-E);
                    equals component_bound unless overridden
    odd             whether e(-w) = -e(w) holds exactly
    orthonormal     whether the elements form an orthonormal family in the
                    noise-weighted function space (Fourier sine is; the
                    scalar saturating kinds are not)
    """

    kind: str
    n: int
    index_count: int
    component_bound: float
    vector_bound: float
    odd: bool
    orthonormal: bool
    params: dict = field(default_factory=dict)
    _fn: Optional[Callable] = None

    @property
    def stage_dim(self):
        return self.n * self.index_count

    def eval_stage(self, w):
        """Feature vector for one stage noise; accepts (n,) or (batch, n)."""
        w = np.asarray(w, dtype=float)
        squeeze = w.ndim == 1
        if squeeze:
            w = w[None, :]
        if w.shape[-1] != self.n:
            raise BasisError(f"stage noise has dimension {w.shape[-1]}, expected {self.n}")
        out = self._fn(w, self.params)
        out = np.clip(out, -self.component_bound, self.component_bound)
        return out[0] if squeeze else out

    def eval_stacked(self, w, stages=None):
        """Apply the map to a stacked noise vector of `stages` blocks of n."""
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.size % self.n != 0:
            raise BasisError(f"stacked noise length {w.size} is not a multiple of n={self.n}")
        k = w.size // self.n
        if stages is not None and k != stages:
            raise BasisError(f"stacked noise has {k} stages, expected {stages}")
        if k == 0:
            return np.zeros(0)
        return self.eval_stage(w.reshape(k, self.n)).reshape(-1)

    def descriptor(self):
        return {"kind": self.kind, "n": self.n, "index_count": self.index_count,
                "component_bound": self.component_bound,
                "params": {k: float(v) for k, v in self.params.items()}}


def _sigmoid_fn(w, p):
    return p["alpha"] * w / np.sqrt(1.0 + p["beta"] * w * w)


def scaled_sigmoid(n, alpha=1.0, beta=1.0):
    """Componentwise xi -> alpha xi / sqrt(1 + beta xi^2); bound alpha/sqrt(beta)."""
    if alpha <= 0 or beta <= 0:
        raise BasisError("alpha and beta must be positive")
    bound = alpha / math.sqrt(beta)
    return BasisFamily("scaled_sigmoid", n, 1, bound, bound, odd=True,
                       orthonormal=False, params={"alpha": float(alpha), "beta": float(beta)},
                       _fn=_sigmoid_fn)


def standard_sigmoid(n):
    """xi -> xi/sqrt(1+xi^2), the unscaled sigmoid with unit bound."""
    return scaled_sigmoid(n, 1.0, 1.0)


def _saturation_fn(w, p):
    return np.sign(w) * np.minimum(np.abs(w), 1.0)


def standard_saturation(n):
    """xi -> sgn(xi) min(|xi|, 1)."""
    return BasisFamily("saturation", n, 1, 1.0, 1.0, odd=True,
                       orthonormal=False, params={}, _fn=_saturation_fn)


def _fourier_sine_fn(w, p):
    # index-major stacking: block nu holds sqrt(2/n) sin(pi nu w_j / a), j = 1..n
    a, modes, scale = p["support"], int(p["modes"]), p["scale"]
    batch = w.shape[0]
    nu = np.arange(1, modes + 1).reshape(1, modes, 1)
    vals = scale * np.sin(math.pi * nu * w[:, None, :] / a)
    return vals.reshape(batch, modes * w.shape[1])


def fourier_sine(n, modes, support):
    """Orthonormal sine family sqrt(2/n) sin(pi nu w_j / a) on [-a, a]^n."""
    if modes < 1:
        raise BasisError("modes must be >= 1")
    if support <= 0:
        raise BasisError("support must be positive")
    scale = math.sqrt(2.0 / n)
    return BasisFamily("fourier_sine", n, modes, scale, scale, odd=True,
                       orthonormal=True,
                       params={"modes": modes, "support": float(support),
                               "scale": scale},
                       _fn=_fourier_sine_fn)


def custom_basis(n, fn, index_count, component_bound, odd=False,
                 orthonormal=False, check_samples=1000, rng=None):
    """Wrap a user map w -> e(w) with a declared componentwise bound.

    The bound is spot-checked by sampling; evaluations are clipped at the
    declared bound afterwards regardless.
    """
    if component_bound <= 0:
        raise BasisError("component_bound must be positive")

    def wrapped(w, p):
        out = np.asarray([np.asarray(fn(row), dtype=float) for row in w])
        if out.shape[-1] != n * index_count:
            raise BasisError(
                f"custom basis returned dimension {out.shape[-1]}, expected {n * index_count}"
            )
        return out

    fam = BasisFamily("custom", n, index_count, float(component_bound),
                      float(component_bound), odd=odd, orthonormal=orthonormal,
                      params={}, _fn=wrapped)
    rng = rng or np.random.default_rng(0)
    probe = rng.normal(0.0, 10.0, size=(check_samples, n))
    raw = wrapped(probe, {})
    if np.max(np.abs(raw)) > component_bound * (1 + 1e-9):
        raise BasisError("sampled custom-basis values exceed the declared bound")
    return fam

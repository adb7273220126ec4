"""Finite-horizon lifting of a linear stochastic plant and quadratic cost.

The plant is x_{t+1} = A x_t + B u_t + w_t.  Over a horizon of N steps the
stacked state trajectory satisfies the affine identity

    x = Phi_A x0 + Phi_B u + Phi_D w,

where Phi_A stacks the powers of A, and Phi_B, Phi_D are the block
lower-triangular Toeplitz convolution operators of the input and noise
channels.  Everything here is dense: the horizons we care about stay in the
tens, so N*n is at most a few hundred rows.
"""

from dataclasses import dataclass

import numpy as np


class ModelError(ValueError):
    """Raised for dimension mismatches or invalid model data."""


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ModelError(f"{name} must be a 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelError(f"{name} contains non-finite entries")
    return a


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SystemModel:
    """Discrete-time linear plant x+ = a_mat x + b_mat u + w."""

    a_mat: np.ndarray
    b_mat: np.ndarray

    def __post_init__(self):
        a = _as_matrix(self.a_mat, "a_mat")
        b = _as_matrix(self.b_mat, "b_mat")
        if a.shape[0] != a.shape[1]:
            raise ModelError(f"a_mat must be square, got {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise ModelError(
                f"b_mat has {b.shape[0]} rows but the state dimension is {a.shape[0]}"
            )
        object.__setattr__(self, "a_mat", _freeze(a))
        object.__setattr__(self, "b_mat", _freeze(b))

    @property
    def n(self):
        return self.a_mat.shape[0]

    @property
    def m(self):
        return self.b_mat.shape[1]

    def step(self, x, u, w):
        """One plant step; `w` may be None for the noiseless system."""
        x = np.asarray(x, dtype=float)
        nxt = self.a_mat @ x + self.b_mat @ np.atleast_1d(np.asarray(u, dtype=float))
        if w is not None:
            nxt = nxt + np.asarray(w, dtype=float)
        return nxt


@dataclass(frozen=True)
class LiftedModel:
    """Stacked horizon-N maps: x = phi_a x0 + phi_b u + phi_d w."""

    phi_a: np.ndarray   # ((N+1) n, n)
    phi_b: np.ndarray   # ((N+1) n, N m)
    phi_d: np.ndarray   # ((N+1) n, N n)
    horizon: int
    n: int
    m: int

    def predict(self, x0, u, w):
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        w = np.asarray(w, dtype=float).reshape(-1)
        if x0.size != self.n:
            raise ModelError(f"x0 has length {x0.size}, expected {self.n}")
        if u.size != self.horizon * self.m:
            raise ModelError(f"u has length {u.size}, expected {self.horizon * self.m}")
        if w.size != self.horizon * self.n:
            raise ModelError(f"w has length {w.size}, expected {self.horizon * self.n}")
        return self.phi_a @ x0 + self.phi_b @ u + self.phi_d @ w


def build_lifted_dynamics(sys: SystemModel, horizon: int) -> LiftedModel:
    """Assemble the stacked maps for `horizon` steps of the plant.

    Block row k of phi_a is A^k; block (k, j) of phi_b is A^(k-1-j) B for
    j < k and zero otherwise, and phi_d has the same structure with B
    replaced by the identity.  The first block row of phi_b and phi_d is
    zero, which is exactly the causality of the lift.
    """
    if horizon < 1:
        raise ModelError(f"horizon must be >= 1, got {horizon}")
    n, m = sys.n, sys.m
    powers = [np.eye(n)]
    for _ in range(horizon):
        powers.append(sys.a_mat @ powers[-1])

    phi_a = np.vstack(powers)
    phi_b = np.zeros(((horizon + 1) * n, horizon * m))
    phi_d = np.zeros(((horizon + 1) * n, horizon * n))
    for k in range(1, horizon + 1):
        for j in range(k):
            blk = powers[k - 1 - j]
            phi_b[k * n:(k + 1) * n, j * m:(j + 1) * m] = blk @ sys.b_mat
            phi_d[k * n:(k + 1) * n, j * n:(j + 1) * n] = blk
    return LiftedModel(_freeze(phi_a), _freeze(phi_b), _freeze(phi_d),
                       horizon, n, m)


@dataclass(frozen=True)
class CostBlocks:
    """Block-diagonal stage weights: q_full over N+1 states, r_full over N inputs."""

    q_full: np.ndarray
    r_full: np.ndarray
    q_stages: tuple
    r_stages: tuple

    @property
    def horizon(self):
        return len(self.r_stages)


def _require_spd(mat, label):
    mat = _as_matrix(mat, label)
    if mat.shape[0] != mat.shape[1]:
        raise ModelError(f"{label} must be square, got {mat.shape}")
    if not np.array_equal(mat, mat.T):
        raise ModelError(f"{label} is not symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ModelError(f"{label} is not positive definite (Cholesky failed)")
    return mat


def build_cost_blocks(q_list, r_list) -> CostBlocks:
    """Assemble block-diagonal cost weights from per-stage SPD matrices.

    `q_list` holds N+1 state weights (terminal included), `r_list` holds N
    input weights.  Each block is Cholesky-checked; a failure reports the
    index of the offending block.
    """
    if len(q_list) < 2:
        raise ModelError("q_list needs at least two blocks (one stage plus terminal)")
    if len(r_list) != len(q_list) - 1:
        raise ModelError(
            f"r_list has {len(r_list)} blocks, expected {len(q_list) - 1}"
        )
    q_stages = tuple(_require_spd(np.atleast_2d(q), f"q_list[{i}]")
                     for i, q in enumerate(q_list))
    r_stages = tuple(_require_spd(np.atleast_2d(r), f"r_list[{i}]")
                     for i, r in enumerate(r_list))
    n = q_stages[0].shape[0]
    m = r_stages[0].shape[0]
    if any(q.shape[0] != n for q in q_stages):
        raise ModelError("state weights must share one dimension")
    if any(r.shape[0] != m for r in r_stages):
        raise ModelError("input weights must share one dimension")

    q_full = np.zeros((len(q_stages) * n, len(q_stages) * n))
    for i, q in enumerate(q_stages):
        q_full[i * n:(i + 1) * n, i * n:(i + 1) * n] = q
    r_full = np.zeros((len(r_stages) * m, len(r_stages) * m))
    for i, r in enumerate(r_stages):
        r_full[i * m:(i + 1) * m, i * m:(i + 1) * m] = r
    return CostBlocks(_freeze(q_full), _freeze(r_full), q_stages, r_stages)


def sample_cost(lifted: LiftedModel, cost: CostBlocks, x0, u, w) -> float:
    """Quadratic cost of one realization: x'Qx + u'Ru along the lifted path."""
    if cost.horizon != lifted.horizon:
        raise ModelError(
            f"cost horizon {cost.horizon} does not match lifted horizon {lifted.horizon}"
        )
    x = lifted.predict(x0, u, w)
    u = np.asarray(u, dtype=float).reshape(-1)
    return float(x @ cost.q_full @ x + u @ cost.r_full @ u)

"""Closed-loop receding-horizon simulation with seeded, pairable noise.

Every `n_control` steps a controller re-plans from the measured state and
applies its next `n_control` inputs.  Within a segment the synthesized
policy feeds back through the saturated features of the noises it has seen
so far; those noises are reconstructed from the recorded states rather than
read from the simulator, so the state-feedback equivalence of the policy is
exercised in the loop.

Noise is drawn block-wise from per-(realization, block) seeded streams.
The block layout is independent of any controller's segmentation, so two
controllers simulated with the same master seed see identical noise paths
(paired comparisons), and a run restarted at any recorded segment boundary
regenerates its suffix bit-exactly.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lqg import riccati_gains
from .model import CostBlocks, SystemModel, build_cost_blocks, build_lifted_dynamics
from .moments import Moments
from .noise import NoiseSpec
from .optimizer import assemble_qp, solve
from .policy import ConstraintSpec, control_at_stage, reconstruct_noise

NOISE_BLOCK = 64


class SimulationError(RuntimeError):
    pass


def noise_path(noise: NoiseSpec, master_seed, realization, t_steps,
               start_block=0):
    """Noise rows for one realization, shape (t_steps, n).

    Block b of 64 stages is drawn from the stream seeded by
    SeedSequence(master_seed, spawn_key=(realization, b)); random access at
    block granularity is what makes suffix regeneration exact.
    """
    blocks = []
    need = t_steps
    b = start_block
    while need > 0:
        seq = np.random.SeedSequence(master_seed, spawn_key=(realization, b))
        rng = np.random.default_rng(seq)
        blocks.append(noise.sample(rng, NOISE_BLOCK))
        need -= NOISE_BLOCK
        b += 1
    return np.concatenate(blocks, axis=0)[:t_steps]


def _stage_weights(q_stage, r_stage, n, m):
    q = np.atleast_2d(np.asarray(q_stage, dtype=float))
    r = np.atleast_2d(np.asarray(r_stage, dtype=float))
    if q.shape != (n, n) or r.shape != (m, m):
        raise SimulationError("running weights have wrong shapes")
    return q, r


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

@dataclass
class _Plan:
    params: object = None
    certified: bool = True


class RhcPolicyController:
    """Re-solves the policy program each segment; feedback via noise features.

    With `warm_start` the previous segment's solution seeds the next solve.
    That is deterministic but makes a restarted simulation re-plan from a
    cold start, so leave it off when exact suffix regeneration matters.
    """

    def __init__(self, sys: SystemModel, q_stage, r_stage, horizon, n_control,
                 spec: ConstraintSpec, basis, moments: Moments, q_term=None,
                 tol=1e-8, max_iter=50000, warm_start=False):
        if not 1 <= n_control <= horizon:
            raise SimulationError("need 1 <= n_control <= horizon")
        self.name = f"rhc-{horizon}-{n_control}"
        self.n_control = n_control
        self.spec = spec
        self.bound_p = spec.p
        self.u_max = spec.u_max
        q_stage = np.atleast_2d(np.asarray(q_stage, dtype=float))
        r_stage = np.atleast_2d(np.asarray(r_stage, dtype=float))
        q_term = q_stage if q_term is None else np.atleast_2d(np.asarray(q_term, dtype=float))
        cost = build_cost_blocks([q_stage] * horizon + [q_term], [r_stage] * horizon)
        lifted = build_lifted_dynamics(sys, horizon)
        self._sys = sys
        self._qp = assemble_qp(lifted, cost, moments.with_horizon(horizon),
                               np.zeros(sys.n), spec, basis)
        self._tol = tol
        self._max_iter = max_iter
        self._warm_start = warm_start
        self._warm = None
        self.solves = 0
        self.non_certified = 0

    def start_segment(self, x):
        report = solve(self._qp.with_x0(x), tol=self._tol,
                       max_iter=self._max_iter, init=self._warm)
        self.solves += 1
        if not report.certified:
            self.non_certified += 1
        if self._warm_start:
            self._warm = report.params
        return _Plan(report.params, report.certified)

    def stage_input(self, plan, offset, x, seg_states, seg_inputs):
        if offset == 0:
            return control_at_stage(plan.params, 0, np.zeros(0))
        noises = reconstruct_noise(self._sys, np.asarray(seg_states),
                                   np.asarray(seg_inputs))
        return control_at_stage(plan.params, offset, noises.reshape(-1))


class CeMpcController(RhcPolicyController):
    """Certainty-equivalent MPC: future noise pinned at zero, no feedback gain.

    Implemented as the same program with all moment blocks zeroed, which
    forces Theta = 0 and reduces the synthesis to a deterministic
    open-loop problem under the input bounds.
    """

    def __init__(self, sys, q_stage, r_stage, horizon, n_control, spec,
                 basis, q_term=None, tol=1e-8, max_iter=50000,
                 warm_start=False):
        d = basis.stage_dim
        zero = Moments(sys.n, d, horizon,
                       np.zeros((d, d)), np.zeros((sys.n, d)), np.zeros(d),
                       np.zeros(sys.n), np.zeros((sys.n, sys.n)), 0)
        super().__init__(sys, q_stage, r_stage, horizon, n_control, spec,
                         basis, zero, q_term=q_term, tol=tol,
                         max_iter=max_iter, warm_start=warm_start)
        self.name = f"ce-mpc-{horizon}-{n_control}"


class LqgController:
    """Classical finite-horizon LQ state feedback u_t = K_t x_t (unbounded)."""

    def __init__(self, sys: SystemModel, q_stage, r_stage, horizon,
                 n_control=None, q_term=None):
        q_stage = np.atleast_2d(np.asarray(q_stage, dtype=float))
        r_stage = np.atleast_2d(np.asarray(r_stage, dtype=float))
        q_term = q_stage if q_term is None else np.atleast_2d(np.asarray(q_term, dtype=float))
        self.gains, self.values = riccati_gains(
            sys, [q_stage] * horizon + [q_term], [r_stage] * horizon)
        self.n_control = horizon if n_control is None else n_control
        self.name = f"lqg-{horizon}-{self.n_control}"
        self.u_max = None
        self.bound_p = None

    def start_segment(self, x):
        return _Plan()

    def stage_input(self, plan, offset, x, seg_states, seg_inputs):
        return self.gains[offset] @ x


class SaturatedLqgController(LqgController):
    """LQ gains designed without bounds, clamped componentwise at +-u_max."""

    def __init__(self, sys, q_stage, r_stage, horizon, n_control, u_max,
                 q_term=None):
        super().__init__(sys, q_stage, r_stage, horizon, n_control, q_term)
        if u_max <= 0:
            raise SimulationError("u_max must be positive")
        self.u_max = float(u_max)
        self.bound_p = math.inf
        self.name = f"sat-lqg-{horizon}-{n_control}"

    def stage_input(self, plan, offset, x, seg_states, seg_inputs):
        return np.clip(self.gains[offset] @ x, -self.u_max, self.u_max)


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryBatch:
    """Recorded closed-loop realizations of one controller."""

    controller: str
    n_control: int
    master_seed: int
    states: np.ndarray       # (R, T+1, n)
    inputs: np.ndarray       # (R, T, m)
    stage_costs: np.ndarray  # (R, T)
    flagged: np.ndarray      # (R,) realizations with a non-certified solve
    u_max: Optional[float] = None
    bound_p: Optional[float] = None
    q_term: Optional[np.ndarray] = None

    @property
    def realizations(self):
        return self.states.shape[0]

    @property
    def t_steps(self):
        return self.inputs.shape[1]

    def cumulative_costs(self):
        """Total cost per realization (terminal term included when configured)."""
        total = self.stage_costs.sum(axis=1)
        if self.q_term is not None:
            xt = self.states[:, -1, :]
            total = total + np.einsum("ri,ij,rj->r", xt, self.q_term, xt)
        return total

    def cumulative_curve(self):
        """Running cost sum, shape (R, T)."""
        return np.cumsum(self.stage_costs, axis=1)

    def input_violations(self, slack=1e-12):
        """Count stage inputs beyond the hard bound (absolute + relative slack)."""
        if self.u_max is None:
            return 0
        if self.bound_p == math.inf:
            norms = np.abs(self.inputs).max(axis=2)
        elif self.bound_p == 1.0:
            norms = np.abs(self.inputs).sum(axis=2)
        else:
            norms = np.sqrt((self.inputs ** 2).sum(axis=2))
        limit = self.u_max * (1.0 + slack) + slack
        return int(np.count_nonzero(norms > limit))

    def max_input_norm(self):
        if self.bound_p == 1.0:
            return float(np.abs(self.inputs).sum(axis=2).max())
        if self.bound_p == 2.0:
            return float(np.sqrt((self.inputs ** 2).sum(axis=2)).max())
        return float(np.abs(self.inputs).max())


def run_receding_horizon(sys: SystemModel, q_stage, r_stage, controller,
                         noise: NoiseSpec, x0, t_steps, realizations,
                         master_seed, q_term=None,
                         start_state_per_realization=None) -> TrajectoryBatch:
    """Simulate `realizations` seeded closed-loop paths of one controller.

    Running cost is x'Qx + u'Ru with the supplied stage weights.  A final
    partial segment (t_steps not a multiple of n_control) simply applies
    the first elements of the last plan.  Realizations whose plans were not
    all certified are flagged; aggregation skips them.
    """
    n, m = sys.n, sys.m
    q_run, r_run = _stage_weights(q_stage, r_stage, n, m)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    nc = controller.n_control

    states = np.empty((realizations, t_steps + 1, n))
    inputs = np.empty((realizations, t_steps, m))
    costs = np.empty((realizations, t_steps))
    flagged = np.zeros(realizations, dtype=bool)

    for r in range(realizations):
        w_all = noise_path(noise, master_seed, r, t_steps)
        x = x0.copy()
        if start_state_per_realization is not None:
            x = np.asarray(start_state_per_realization[r], dtype=float).copy()
        states[r, 0] = x
        plan = None
        seg_start = 0
        for t in range(t_steps):
            if t % nc == 0:
                plan = controller.start_segment(x)
                seg_start = t
                if not plan.certified:
                    flagged[r] = True
            u = np.atleast_1d(controller.stage_input(
                plan, t - seg_start, x,
                states[r, seg_start:t + 1], inputs[r, seg_start:t]))
            inputs[r, t] = u
            costs[r, t] = float(x @ q_run @ x + u @ r_run @ u)
            x = sys.step(x, u, w_all[t])
            states[r, t + 1] = x

    q_term_arr = None
    if q_term is not None:
        q_term_arr = np.atleast_2d(np.asarray(q_term, dtype=float))
    return TrajectoryBatch(controller.name, nc, master_seed, states, inputs,
                           costs, flagged,
                           u_max=getattr(controller, "u_max", None),
                           bound_p=getattr(controller, "bound_p", None),
                           q_term=q_term_arr)


@dataclass
class Aggregate:
    """Summary statistics of one batch, optionally paired with a baseline."""

    controller: str
    n_valid: int
    n_flagged: int
    mean_cost: float
    std_cost: float
    mean_curve: np.ndarray          # (T,), running cost averaged over paths
    std_curve: np.ndarray
    second_moment: np.ndarray       # (T+1,), mean |x_t|^2
    second_moment_se: np.ndarray
    baseline: Optional[str] = None
    ratio_baseline_over_main_mean: Optional[float] = None
    ratio_baseline_over_main_std: Optional[float] = None
    ratio_main_over_baseline_mean: Optional[float] = None
    mean_cost_baseline: Optional[float] = None
    ratio_curve: Optional[np.ndarray] = None


def aggregate(batch: TrajectoryBatch, baseline: Optional[TrajectoryBatch] = None):
    """Mean/std of total costs, per-time state second moments, paired ratios.

    Paired statistics require the two batches to share the master seed and
    realization count (identical noise paths).
    """
    if batch.realizations == 0:
        raise SimulationError("empty batch")
    valid = ~batch.flagged
    if baseline is not None:
        if (baseline.master_seed != batch.master_seed
                or baseline.realizations != batch.realizations):
            raise SimulationError(
                "paired aggregation needs matching seeds and realization counts")
        valid = valid & ~baseline.flagged
    if not np.any(valid):
        raise SimulationError("all realizations flagged; nothing to aggregate")

    totals = batch.cumulative_costs()[valid]
    curves = batch.cumulative_curve()[valid]
    sq = (batch.states[valid] ** 2).sum(axis=2)
    n_valid = int(valid.sum())
    agg = Aggregate(
        controller=batch.controller,
        n_valid=n_valid,
        n_flagged=int(batch.flagged.sum()),
        mean_cost=float(totals.mean()),
        std_cost=float(totals.std(ddof=1)) if n_valid > 1 else 0.0,
        mean_curve=curves.mean(axis=0),
        std_curve=curves.std(axis=0, ddof=1) if n_valid > 1 else np.zeros(batch.t_steps),
        second_moment=sq.mean(axis=0),
        second_moment_se=(sq.std(axis=0, ddof=1) / math.sqrt(n_valid)
                          if n_valid > 1 else np.zeros(sq.shape[1])),
    )
    if baseline is not None:
        base_totals = baseline.cumulative_costs()[valid]
        ratios = base_totals / totals
        agg.baseline = baseline.controller
        agg.ratio_baseline_over_main_mean = float(ratios.mean())
        agg.ratio_baseline_over_main_std = (float(ratios.std(ddof=1))
                                            if n_valid > 1 else 0.0)
        agg.ratio_main_over_baseline_mean = float((totals / base_totals).mean())
        agg.mean_cost_baseline = float(base_totals.mean())
        base_curve = baseline.cumulative_curve()[valid].mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            agg.ratio_curve = np.where(base_curve > 0,
                                       agg.mean_curve / base_curve, np.nan)
    return agg

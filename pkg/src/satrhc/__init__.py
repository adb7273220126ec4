"""Hard-input-bounded stochastic receding-horizon control.

Synthesizes control policies that are affine in bounded (saturated)
functions of past noises, u = eta + Theta e(w), by solving a convex
quadratic program whose noise dependence enters only through off-line
moment matrices.  The resulting policies respect hard per-stage input
bounds for every noise realization, run in a receding-horizon loop against
classical baselines (LQG, saturated LQG, certainty-equivalent MPC), and,
for Schur-stable plants, come with an explicit mean-square-boundedness
certificate.
"""

from .basis import (
    BasisFamily,
    custom_basis,
    fourier_sine,
    scaled_sigmoid,
    standard_saturation,
    standard_sigmoid,
)
from .cache import inspect_cache, load_moments, save_moments
from .lqg import riccati_gains
from .model import (
    CostBlocks,
    LiftedModel,
    SystemModel,
    build_cost_blocks,
    build_lifted_dynamics,
    sample_cost,
)
from .moments import (
    Moments,
    closed_form_moments,
    closed_form_saturation_moments,
    closed_form_sigmoid_moments,
    closed_form_uniform_sine_moments,
    monte_carlo_moments,
)
from .noise import NoiseSpec, gaussian_noise, sample_noise, uniform_box_noise
from .optimizer import QpProblem, SolveReport, assemble_qp, solve
from .policy import (
    ConstraintSpec,
    PolicyParams,
    check_feasible,
    control_at_stage,
    control_sequence,
    reconstruct_noise,
    scale_to_feasible,
)
from .projections import project_params, project_stage, weighted_l1_projection
from .simulate import (
    CeMpcController,
    LqgController,
    RhcPolicyController,
    SaturatedLqgController,
    TrajectoryBatch,
    aggregate,
    run_receding_horizon,
)
from .stability import (
    SchurStabilityError,
    StabilityCertificate,
    certificate,
    drift_check,
    empirical_second_moment,
    solve_discrete_lyapunov,
)

__version__ = "0.1.0"

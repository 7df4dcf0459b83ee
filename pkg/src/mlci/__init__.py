"""Maximum likelihood constraint inference on grid-discretized dynamics."""

from .dynamics import (
    ContinuousTrajectory,
    DimSpec,
    IntegrationDivergedError,
    SystemSpec,
    deriv,
    integrate_segment,
    make_system,
    normalized_distance,
    pendulum,
    rollout,
    telescoping_pendulum,
)
from .gridmdp import (
    OUT_OF_BOUNDS,
    Box,
    GridSpec,
    HypothesisSet,
    TabularMdp,
    action_grid,
    build_hypotheses,
    build_mdp,
    build_or_load,
    cell_of,
    center_of,
    membership,
)
from .maxent import (
    BackwardMessages,
    ForwardResult,
    GoalUnreachableError,
    PlanningProblem,
    SampledTrajectory,
    SoftPolicy,
    backward_messages,
    control_penalty,
    forward_pass,
    sample_trajectory,
    soft_policy,
)
from .inference import (
    ConstraintInference,
    Demonstration,
    InferenceReport,
    demo_violation_probability,
    demo_violations,
    distribution_distance,
    feasible_set,
    posterior,
    rank_constraints,
)
from .demogen import (
    DemoProblem,
    IlqrResult,
    OptimizationDivergedError,
    generate_demos,
    ilqr_solve,
    read_demos,
    write_demos,
)
from .config import ExperimentConfig, config_from_dict, load_config

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"

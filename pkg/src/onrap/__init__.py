"""Occupancy-driven noise-resilient local path planner (ONRAP)."""

from .kinematics import (
    DomainError,
    PlanarState,
    VehicleGeometry,
    rollout,
    step,
    time_domain_oracle,
)
from .occupancy import (
    EgoGrid,
    FlowField,
    GridSpec,
    WorldScene,
    flow_measure,
    flow_smooth,
    flow_update,
    predict_occupancy,
    project_to_ego,
)
from .reference import (
    PoseBoundary,
    ReferencePath,
    inject_reference_noise,
    quintic_hermite,
    resample_to_steps,
    select_local_goal,
)
from .cost import (
    ObjectiveWeights,
    RiskParams,
    assemble_objective,
    grid_risk,
    lambda_grid_lower_bound,
    max_lateral_deviation,
    risk_kernel,
)
from .planner import (
    PlannerParams,
    PlanResult,
    default_planner_params,
    plan,
    solve_nlp,
    warm_start_shift,
)
from .simulator import (
    EpisodeMetrics,
    ScenarioConfig,
    discrete_curvature,
    run_episode,
    run_monte_carlo,
    success_of,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"

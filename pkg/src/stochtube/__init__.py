"""Probabilistic concentration tubes for contracting stochastic systems.

The pipeline runs system model, contraction metric with sampled rates,
schedule integrals, tube radii, Monte Carlo validation and set erosion
for planning.
"""

from .amgf import AmgfQuery, amgf_tail_radius, amgf_value, optimize_epsilon
from .bounds import (BoundCurve, BoundParams, ScheduleIntegrals, all_bounds, bound_isa_baseline,
                     bound_single_time, bound_trajectory, bound_trajectory_segmented,
                     compute_integrals)
from .config import RunConfig, load_config, shipped_config, with_overrides
from .contraction import (Box, MetricSchedule, estimate_rate_schedule, pointwise_rate,
                          riccati_tvlqr, verify_lmi)
from .harness import (build_problem, compare_bounds, run_config, run_experiment, run_rollouts,
                      validate_bound)
from .simulate import TrajectoryGrid, batch_rollouts, integrate_deterministic, integrate_sde
from .systems import InputSignal, SystemModel, builtin
from .tube import SafeSetSpec, project_tube_radius, verify_plan

__version__ = "0.1.0"

__all__ = [
    "AmgfQuery", "amgf_tail_radius", "amgf_value", "optimize_epsilon",
    "BoundCurve", "BoundParams", "ScheduleIntegrals", "all_bounds", "bound_isa_baseline",
    "bound_single_time", "bound_trajectory", "bound_trajectory_segmented", "compute_integrals",
    "RunConfig", "load_config", "shipped_config", "with_overrides",
    "build_problem", "compare_bounds", "run_config", "run_experiment", "run_rollouts", "validate_bound",
    "Box", "MetricSchedule", "estimate_rate_schedule", "pointwise_rate", "riccati_tvlqr",
    "verify_lmi", "TrajectoryGrid", "batch_rollouts", "integrate_deterministic", "integrate_sde",
    "InputSignal", "SystemModel", "builtin", "SafeSetSpec", "project_tube_radius", "verify_plan",
]

"""Particle/regression solvers for discounted infinite-horizon mean-field FBSDEs."""

__version__ = "0.1.0"

from .engine import (
    MeanFieldSolution,
    PathEnsemble,
    SolverConfig,
    TimeGrid,
    build_grid,
    delta0,
    phi_map,
    solve_fbsde_continuation,
    solve_mean_field,
    solve_pinned,
    weighted_norm_sq,
)
from .measures import EmpiricalMeasure, LawFlow, flow_distance, mean, moment2, w2_distance
from .models import (
    HamiltonianModel,
    ModelConstants,
    build_model,
    lq_constants,
    make_lq_model,
    make_model_from_costs,
    make_perturbed_lq_model,
)
from .assumptions import AssumptionReport, check_assumptions
from .noise import NoiseBundle, make_noise
from .oracle import LqOracle, lq_oracle

__all__ = [
    "AssumptionReport",
    "EmpiricalMeasure",
    "HamiltonianModel",
    "LawFlow",
    "LqOracle",
    "MeanFieldSolution",
    "ModelConstants",
    "NoiseBundle",
    "PathEnsemble",
    "SolverConfig",
    "TimeGrid",
    "build_grid",
    "build_model",
    "check_assumptions",
    "delta0",
    "flow_distance",
    "lq_constants",
    "lq_oracle",
    "make_lq_model",
    "make_model_from_costs",
    "make_noise",
    "make_perturbed_lq_model",
    "mean",
    "moment2",
    "phi_map",
    "solve_fbsde_continuation",
    "solve_mean_field",
    "solve_pinned",
    "w2_distance",
    "weighted_norm_sq",
]

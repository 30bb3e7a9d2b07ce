"""Approximate Bayesian inference after randomized selection queries.

The package turns a randomized selection event (lasso variants, marginal
screening, forward stepwise) into an affine reconstruction map plus a sign
and cube region, approximates the log probability of that event by smooth
convex optimization, and samples the resulting adjusted posterior with a
Langevin walk.
"""

from .barriers import (
    BarrierSpec,
    cube_barrier,
    cube_barrier_conjugate,
    log_cube_barrier,
    log_cube_barrier_conjugate,
    sign_barrier,
    sign_barrier_conjugate,
)
from .experiments import (
    ExperimentConfig,
    MetricsTable,
    fcr,
    parse_config_text,
    run_experiment,
    run_two_stage_experiment,
    target_ols,
)
from .models import GenerativeModel, Prior, Randomizer, estimate_noise_scale, sample_model_II
from .normalizer import (
    MCEstimate,
    NormalizerProblem,
    SolveResult,
    chernoff_dual_solve,
    dual_solve,
    log_inactive_volume,
    mc_selection_probability,
    multistage_solve,
    primal_full_solve,
    primal_reduced_solve,
    solve_normalizer,
)
from .optimize import SolverError
from .posterior import (
    PseudoPosterior,
    SamplerResult,
    chain_summaries,
    effective_sample_size,
    langevin_step,
    run_sampler,
    selective_map,
)
from .queries import (
    InversionMap,
    SelectionOutcome,
    SelectionRegion,
    carved_lasso_query,
    forward_stepwise_query,
    lasso_inversion_map,
    load_design_csv,
    marginal_screening_query,
    outcome_from_json,
    outcome_to_json,
    solve_randomized_lasso,
    theoretical_lambda,
)
from .serialize import dump_problem, load_problem, problem_from_dict, problem_to_dict

__version__ = "0.1.0"

__all__ = [
    "BarrierSpec",
    "ExperimentConfig",
    "GenerativeModel",
    "InversionMap",
    "MCEstimate",
    "MetricsTable",
    "NormalizerProblem",
    "Prior",
    "PseudoPosterior",
    "Randomizer",
    "SamplerResult",
    "SelectionOutcome",
    "SelectionRegion",
    "SolveResult",
    "SolverError",
    "carved_lasso_query",
    "chain_summaries",
    "chernoff_dual_solve",
    "cube_barrier",
    "cube_barrier_conjugate",
    "dual_solve",
    "dump_problem",
    "effective_sample_size",
    "estimate_noise_scale",
    "fcr",
    "forward_stepwise_query",
    "langevin_step",
    "lasso_inversion_map",
    "load_design_csv",
    "load_problem",
    "log_cube_barrier",
    "log_cube_barrier_conjugate",
    "log_inactive_volume",
    "marginal_screening_query",
    "mc_selection_probability",
    "multistage_solve",
    "outcome_from_json",
    "outcome_to_json",
    "parse_config_text",
    "primal_full_solve",
    "primal_reduced_solve",
    "problem_from_dict",
    "problem_to_dict",
    "run_experiment",
    "run_sampler",
    "run_two_stage_experiment",
    "sample_model_II",
    "selective_map",
    "sign_barrier",
    "sign_barrier_conjugate",
    "solve_normalizer",
    "solve_randomized_lasso",
    "target_ols",
    "theoretical_lambda",
]

"""Exit-time gap bounds for diffusions.

Simulate coupled first exits of one diffusion from two overlapping regions,
solve expected-exit (mean first passage) problems, and check the resulting
L1 bound E|tau(r1) - tau(r2)| <= max of the two boundary-restricted suprema.
"""
from .model import (
    Ball,
    Box,
    ConfigurationError,
    DiffusionModel,
    InitialCondition,
    Interval,
    Region,
    boundary_intersection_points,
    brownian_motion,
    closure_nested,
    constant_coefficient_model,
    drifted_brownian_motion,
)
from .exit_sim import (
    CoupledExitBatch,
    CoupledExitSample,
    MCEstimate,
    SimConfig,
    bridge_crossing_probability,
    default_t_max,
    estimate_mean_abs_gap,
    sample_coupled_exits,
    simulate_coupled_exit,
)
from .expected_exit import (
    ExpectedExitField,
    SupEstimate,
    closed_form_interval_bm,
    estimate_expected_exit_mc,
    solve_dirichlet_fd_1d,
    sup_expected_exit,
)
from .bound_harness import (
    IdentityReport,
    IdentityRow,
    Scenario,
    ScenarioFailure,
    TheoremReport,
    VERDICT_HOLDS,
    VERDICT_NOISE,
    VERDICT_VIOLATED,
    evaluate_theorem1,
    run_scenario_suite,
    verify_proof_identities,
)

__version__ = "0.1.0"

"""Stochastic value-function updates as Markov chains on value functions."""

from .ensemble import (
    CoupledEnsemble,
    ParticleEnsemble,
    burn_in_stationary,
    coupled_step,
    export_snapshot,
    init_ensemble,
    run_chain,
    step_ensemble,
)
from .library import builtin_mdp, random_mdp
from .mdp import (
    DiscreteDistribution,
    FiniteMdp,
    MdpError,
    Policy,
    bellman_optimality_backup,
    bellman_policy_backup,
    exact_policy_values,
    greedy_policy,
    load_mdp,
    policy_iteration,
    validate_mdp,
)
from .operators import (
    AlgorithmSpec,
    ExtendedPoint,
    apply_empirical_operator,
    contraction_factor,
    effective_affine_map,
    expected_target,
    noise_covariance,
    sample_return,
    synchronous_update,
    truncation_horizon,
)
from .opi import (
    PolicyKernel,
    check_probabilistic_improvement,
    check_reachability,
    enumerate_policies,
    estimate_policy_kernel,
    exact_policy_kernel,
    opi_step,
    policy_chain_stationary,
    simulate_opi,
)
from .rng import RngStream
from .stationary import (
    concentration_bound,
    control_bias_check,
    covariance_opnorm,
    covariance_report,
    empirical_concentration,
    estimate_noise_integral,
    solve_stationary_covariance,
    stationary_mean_check,
)
from .transport import coupled_distance, product_metric_d1, sup_norm, tv_distance_atoms, wasserstein_exact

__version__ = "0.1.0"

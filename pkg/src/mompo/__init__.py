"""Multi-objective policy optimization toolkit.

Per-objective policy evaluation, KL-budgeted distribution improvement via a
convex temperature dual, and trust-region policy fitting, with a scalarized
baseline, an advantage-based on-policy variant, desk-scale benchmark
environments, and Pareto/hypervolume analysis.
"""
from .critics import (
    CriticBank,
    DirectActionPenalty,
    QNetworkCritic,
    TabularQCritic,
    VNetworkCritic,
    exact_bandit_q,
    nstep_v_targets,
    retrace_targets,
    td0_update,
)
from .envs import (
    DeepSeaTreasure,
    PointMassRun,
    SimpleWorld,
    evaluate_policy,
    make_env,
    rollout,
    true_pareto_front,
)
from .improvement import (
    FitState,
    ImprovementBatch,
    TemperatureState,
    compute_weights,
    dual_grad,
    dual_value,
    empirical_kl,
    exact_fit_single_state,
    fit_policy,
    improvement_step,
    movmpo_estep,
    scalarized_improvement,
    solve_temperature,
)
from .metrics import ParetoSet, dominates, hypervolume, pareto_filter
from .policies import (
    DiagonalGaussianPolicy,
    ParametricCategoricalPolicy,
    TabularCategoricalPolicy,
    load_snapshot,
    save_snapshot,
)
from .replay import ReplayBuffer
from .runner import (
    ConfigError,
    NumericalAbort,
    PROFILES,
    expand_sweep,
    run_sweep,
    run_training,
)
from .types import (
    Box,
    Discrete,
    EnvSpec,
    PreferenceSpec,
    RewardVector,
    Trajectory,
    Transition,
    validate_preference,
)

__version__ = "0.1.0"

__all__ = [
    "Box", "ConfigError", "CriticBank", "DeepSeaTreasure", "DiagonalGaussianPolicy",
    "DirectActionPenalty", "Discrete", "EnvSpec", "FitState", "ImprovementBatch",
    "NumericalAbort", "PROFILES", "ParametricCategoricalPolicy", "ParetoSet",
    "PointMassRun", "PreferenceSpec", "QNetworkCritic", "ReplayBuffer", "RewardVector",
    "SimpleWorld", "TabularCategoricalPolicy", "TabularQCritic", "TemperatureState",
    "Trajectory", "Transition", "VNetworkCritic", "compute_weights", "dominates",
    "dual_grad", "dual_value", "empirical_kl", "evaluate_policy", "exact_bandit_q",
    "exact_fit_single_state", "expand_sweep", "fit_policy", "hypervolume",
    "improvement_step", "load_snapshot", "make_env", "movmpo_estep", "nstep_v_targets",
    "pareto_filter", "retrace_targets", "rollout", "run_sweep", "run_training",
    "save_snapshot", "scalarized_improvement", "solve_temperature", "td0_update",
    "true_pareto_front", "validate_preference",
]

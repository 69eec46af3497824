"""Budget-aware mean estimation that mixes a cheap and an expensive rater."""

from .calibration import (
    BurnInEstimate,
    PlattModel,
    combine_with_burnin,
    estimate_params_burnin,
    inverse_variance_combine,
    platt_fit,
    power_tune_lambda,
)
from .core import (
    P_MIN,
    EstimatorState,
    RaterCosts,
    Sample,
    SampleBlock,
    TrialRecord,
    TrialResult,
    active_increment,
    cost_of_policy,
    error_of_policy,
    run_trial,
    trial_stream,
    write_trace,
)
from .data import (
    DataError,
    ReplayDataset,
    ReplaySource,
    load_dataset,
    load_demo_dataset,
    quartile_split,
    save_dataset,
    transfer_split,
)
from .metrics import (
    BudgetCurve,
    CurvePoint,
    EffectiveBudget,
    bootstrap_ci,
    cost_savings,
    effective_budget,
    error_ratio,
    mse_over_trials,
)
from .policies import (
    Policy,
    PolicyParams,
    gamma_star,
    make_policy,
    optimal_random_rate,
    optimal_random_rate_integer,
    optimize_tau,
    policy_objective,
)
from .sampling_design import InputDesign, nu_of_x, optimal_input_distribution
from .synthetic import BernoulliSpec, GaussianSpec, SyntheticSource

__version__ = "0.1.0"

"""Training and verification tools for energy-tilted sequential samplers.

The package trains step-by-step generative samplers toward a tilted target
distribution (prior reweighted by exp(-energy/alpha)) with three families of
objectives -- squared trajectory-balance residuals, the proportional
path-consistency form, and score-function REINFORCE with a KL term -- and
ships exact tabular oracles to verify their fixed points and gradients.
"""

from .autodiff import (
    BatchLoss,
    EvaluationError,
    LayoutError,
    ParamStore,
    Tape,
    check_gradient,
    evaluate,
    gradient,
    value_and_gradient,
)
from .evalmetrics import (
    ModeHistogram,
    importance_log_z,
    logz_report,
    mode_histogram,
    read_samples_csv,
    tv_distance,
    write_samples_csv,
)
from .fixtures import gmm25_env, grid_means, t2b3
from .gmm import Gmm, GmmDiffusionEnv, OutOfHorizonError, cosine_schedule
from .objectives import (
    gradient_equivalence_check,
    reinforce_kl_offpolicy,
    reinforce_kl_rtbpaper,
    rtb_loss,
    rtb_residual,
    snis_weights,
    tpcl_loss,
    tpcl_residual,
)
from .oracle import (
    OracleTables,
    optimal_policy,
    oracle_tables,
    soft_values,
    terminal_marginal,
    tilted_target,
    wrong_tilted_target,
)
from .policy import GmmPolicy, TabularPolicy
from .tabular import (
    MalformedEnvError,
    TabularEnv,
    random_env,
    tabular_enumerate,
    two_terminal_env,
)
from .train import (
    ConfigError,
    DivergenceError,
    MetricsRow,
    TrainConfig,
    behavior_sample,
    config_from_dict,
    config_to_dict,
    load_checkpoint,
    metrics_to_csv,
    save_checkpoint,
)
from .trajectory import Trajectory

__all__ = [
    "BatchLoss",
    "ConfigError",
    "DivergenceError",
    "EvaluationError",
    "Gmm",
    "GmmDiffusionEnv",
    "GmmPolicy",
    "LayoutError",
    "MalformedEnvError",
    "MetricsRow",
    "ModeHistogram",
    "OracleTables",
    "OutOfHorizonError",
    "ParamStore",
    "TabularEnv",
    "TabularPolicy",
    "Tape",
    "TrainConfig",
    "Trajectory",
    "behavior_sample",
    "check_gradient",
    "config_from_dict",
    "config_to_dict",
    "cosine_schedule",
    "evaluate",
    "gmm25_env",
    "gradient",
    "gradient_equivalence_check",
    "grid_means",
    "importance_log_z",
    "load_checkpoint",
    "logz_report",
    "metrics_to_csv",
    "mode_histogram",
    "optimal_policy",
    "oracle_tables",
    "random_env",
    "read_samples_csv",
    "reinforce_kl_offpolicy",
    "reinforce_kl_rtbpaper",
    "rtb_loss",
    "rtb_residual",
    "save_checkpoint",
    "snis_weights",
    "soft_values",
    "t2b3",
    "tabular_enumerate",
    "terminal_marginal",
    "tilted_target",
    "tpcl_loss",
    "tpcl_residual",
    "tv_distance",
    "two_terminal_env",
    "value_and_gradient",
    "write_samples_csv",
    "wrong_tilted_target",
]

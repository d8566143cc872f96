"""Logistic stochastic best response equilibria and multi-agent inverse RL."""
from .airl import AirlConfig, DiscriminatorParams, SamplerPolicy, TrainState, train
from .errors import (
    ConvergenceError,
    GameValidationError,
    OptimizerAbort,
    UndefinedConditionalError,
    UndefinedMetricError,
)
from .evaluation import MetricReport, cross_play, occupancy_kl, pcc, reward_recovery_report, scc
from .game import (
    DemoSet,
    JointPolicy,
    MarkovGame,
    NormalFormGame,
    Trajectory,
    expected_return,
    generate_demos,
    rollout,
    validate_game,
)
from .mpl import FeatureMap, FitReport, RewardParams, fit_mpl, pl_gradient, pl_objective
from .solver import (
    LsbreConfig,
    LsbreSolution,
    normal_form_conditional,
    shaped_rewards,
    soft_best_response,
    solve_lsbre,
    stationary_exact,
    stationary_sampled,
    sweep_kernel,
)

__version__ = "0.1.0"

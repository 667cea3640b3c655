"""Gradient inversion against federated TD learning."""

from frlinv.attack.candidate import CandidateBatch, make_codec
from frlinv.attack.engine import (
    AttackConfig,
    AttackProblem,
    ReconstructionResult,
    gradient_matching_error,
    rgia_attack,
    run_attacks,
    total_objective,
)
from frlinv.attack.optim import OptimizerConfig
from frlinv.attack.priors import (
    RegWeights,
    StatePrior,
    TransitionModel,
    estimate_state_prior,
    reg_dynamics,
    reg_reward,
    reg_state,
    train_transition_model,
)

__all__ = [
    "AttackConfig",
    "AttackProblem",
    "CandidateBatch",
    "OptimizerConfig",
    "ReconstructionResult",
    "RegWeights",
    "StatePrior",
    "TransitionModel",
    "estimate_state_prior",
    "gradient_matching_error",
    "make_codec",
    "reg_dynamics",
    "reg_reward",
    "reg_state",
    "rgia_attack",
    "run_attacks",
    "total_objective",
    "train_transition_model",
]

"""Offline GRPO and online stepwise training for the parametric policy."""

from .objectives import (
    NumericalFailure,
    RolloutGroup,
    TrainConfig,
    Trajectory,
    clipped_term,
    group_advantages,
    grpo_objective,
    kl_divergence,
    offline_reward,
    policy_kl,
    stepwise_rewards,
    stpo_advantages,
    stpo_objective,
    trajectory_reward,
)
from .offline import ExpertSample, agreement, dataset_arrays, generate_expert_dataset, grpo_train, load_dataset, save_dataset
from .optim import TrainingDiverged

__all__ = [
    "ExpertSample",
    "NumericalFailure",
    "RolloutGroup",
    "TrainConfig",
    "TrainingDiverged",
    "Trajectory",
    "agreement",
    "clipped_term",
    "dataset_arrays",
    "generate_expert_dataset",
    "group_advantages",
    "grpo_objective",
    "grpo_train",
    "kl_divergence",
    "load_dataset",
    "offline_reward",
    "policy_kl",
    "save_dataset",
    "stepwise_rewards",
    "stpo_advantages",
    "stpo_objective",
    "trajectory_reward",
]

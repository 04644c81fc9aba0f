"""Decentralized actor-critic learning components."""

from .actor_critic import (
    Critic,
    GaussianPolicy,
    critic_value,
    entropy,
    make_critic,
    make_policy,
    policy_act,
    policy_mean,
    policy_update,
    td_update,
)
from .agent import LearnerConfig, MultiAgentLearner
from .checkpoint import load_checkpoint, save_checkpoint
from .mlp import MLP, init_mlp, mlp_backward, mlp_forward
from .noise import OUNoise, StepSchedule
from .replay import ReplayBuffer, Transition
from .tabular import TabularMDP, bellman_operator_oracle, value_iteration

__all__ = [
    "Critic",
    "GaussianPolicy",
    "LearnerConfig",
    "MLP",
    "MultiAgentLearner",
    "OUNoise",
    "ReplayBuffer",
    "StepSchedule",
    "TabularMDP",
    "Transition",
    "bellman_operator_oracle",
    "critic_value",
    "entropy",
    "init_mlp",
    "load_checkpoint",
    "make_critic",
    "make_policy",
    "mlp_backward",
    "mlp_forward",
    "policy_act",
    "policy_mean",
    "policy_update",
    "save_checkpoint",
    "td_update",
    "value_iteration",
]

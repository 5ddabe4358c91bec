"""deskrl: desk-scale off-policy RL with CrossQ, weight normalization, and
scalable update-to-data ratios, on self-contained continuous-control tasks."""

from .agent import Agent, AgentConfig
from .autodiff import ContractError, DomainError, NumericError, Tape, Tensor, stop_gradient
from .config import ConfigError, RunConfig, parse_config, validate_config
from .diagnostics import QBiasEstimate, bootstrap_ci, iqm, q_bias, weight_trace
from .envs import ENV_IDS, make_env, mc_return
from .harness import run_experiment, run_seed, sweep
from .layers import MLP, Adam, BatchNormLayer, LinearLayer, MLPSpec
from .replay import ReplayBuffer, TransitionBatch

__all__ = [
    "Agent",
    "AgentConfig",
    "Adam",
    "BatchNormLayer",
    "ConfigError",
    "ContractError",
    "DomainError",
    "ENV_IDS",
    "LinearLayer",
    "MLP",
    "MLPSpec",
    "NumericError",
    "QBiasEstimate",
    "ReplayBuffer",
    "RunConfig",
    "Tape",
    "Tensor",
    "TransitionBatch",
    "bootstrap_ci",
    "iqm",
    "make_env",
    "mc_return",
    "parse_config",
    "q_bias",
    "run_experiment",
    "run_seed",
    "stop_gradient",
    "sweep",
    "validate_config",
    "weight_trace",
]

__version__ = "0.1.0"

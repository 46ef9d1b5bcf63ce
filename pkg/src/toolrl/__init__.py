"""Token-level reinforcement learning for multi-turn, tool-using agents."""

from .errors import ToolRLError
from .rl_core import RLConfig
from .token_mdp import AgentState, Trajectory, Vocabulary
from .tool_env import EnvConfig, Limits, ToolEnv
from .trainer import AgentTrainer, RunConfig, evaluate, run_ablation, train

__all__ = [
    "AgentState",
    "AgentTrainer",
    "EnvConfig",
    "Limits",
    "RLConfig",
    "RunConfig",
    "ToolEnv",
    "ToolRLError",
    "Trajectory",
    "Vocabulary",
    "evaluate",
    "run_ablation",
    "train",
]

__version__ = "0.1.0"

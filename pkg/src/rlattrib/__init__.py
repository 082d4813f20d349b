"""Round-local data attribution and influence-based experience filtering for PPO."""

__version__ = "0.1.0"

from rlattrib.envs import make_env
from rlattrib.nn import PolicyValueParams, init_policy_value
from rlattrib.ppo import PpoConfig, RolloutBuffer, collect_rollout, ppo_update, evaluate

__all__ = [
    "PpoConfig",
    "PolicyValueParams",
    "RolloutBuffer",
    "collect_rollout",
    "evaluate",
    "init_policy_value",
    "make_env",
    "ppo_update",
]

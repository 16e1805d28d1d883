"""Person-following gridworld with learned world models and perspective-shifted influence estimates."""
from .config import Config, load_config
from .env import GridEnv, generate_map, render_observation, step
from .data import collect_episodes, load_dataset, save_dataset
from .world_model import FactoredBelief, WorldModel
from .perspective import Condition, apply_perspective_shift, estimate_influence, plan_imagined_actions
from .policy import InfluenceDQN, train_policy
from .experiment import bootstrap_ci, final_score, run_experiment

__all__ = [
    "Config", "load_config", "GridEnv", "generate_map", "render_observation", "step",
    "collect_episodes", "load_dataset", "save_dataset", "FactoredBelief", "WorldModel",
    "Condition", "apply_perspective_shift", "estimate_influence", "plan_imagined_actions",
    "InfluenceDQN", "train_policy", "bootstrap_ci", "final_score", "run_experiment",
]
__version__ = "0.1.0"

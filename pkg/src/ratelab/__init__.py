"""Desk-scale quadcopter rate-control lab.

Rotational dynamics, a PPO trainer for a small MLP rate controller, a PID
baseline with Ziegler-Nichols tuning, C code generation for the trained
network, and replay/comparison/timing tools.
"""

from .control import PidGains, mix_throttle, zn_tune_all
from .dynamics import AirframeModel, BodyState, step
from .env import EnvConfig, RateEnv, sample_task
from .trainer import PpoConfig, select_best, train

__all__ = [
    "AirframeModel",
    "BodyState",
    "EnvConfig",
    "PidGains",
    "PpoConfig",
    "RateEnv",
    "mix_throttle",
    "sample_task",
    "select_best",
    "step",
    "train",
    "zn_tune_all",
]

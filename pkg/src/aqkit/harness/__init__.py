"""Differentiable toy policy harness on a 2-D reaching task."""
from .task import ReachTask, rollout_success
from .policy import (PolicyArch, ToyPolicy, TrainConfig, init_policy, train_policy,
                     save_checkpoint, load_checkpoint, CheckpointFormatError,
                     TrainingDivergedError)

__all__ = ["ReachTask", "rollout_success", "PolicyArch", "ToyPolicy", "TrainConfig",
           "init_policy", "train_policy", "save_checkpoint", "load_checkpoint",
           "CheckpointFormatError", "TrainingDivergedError"]

"""Grid-world manipulation RL lab.

A deterministic block-grid simulator with push/pick/place primitives, a
pixel-wise convolutional Q approximator conditioned on the previous action's
prediction, progress-shaped Gaussian rewards, loss-adjusted exploration,
rank-prioritized replay, and a seeded training/evaluation harness with an
ablation ladder.
"""

from .gridsim import (Action, DoneReason, Observation, Primitive,
                      StepResult, TaskConfig, TaskKind, Workspace)
from .harness import Metrics, RunConfig, TrainReport

__version__ = "0.1.0"

__all__ = [
    "Action", "DoneReason", "Metrics", "Observation", "Primitive",
    "RunConfig", "StepResult", "TaskConfig", "TaskKind", "TrainReport",
    "Workspace", "__version__",
]

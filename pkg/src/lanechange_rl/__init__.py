"""Lane-change decision making: simulator, demonstration-aided Q learning, evaluation."""

import os

# The network's GEMMs are too skinny to profit from BLAS threads (measured
# slower at 2 threads than 1); one thread also keeps runs bit-reproducible
# across machines and lets seed runs parallelize as processes instead.
# Must be set before numpy initializes BLAS; respects explicit overrides.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from .ego_control import DecisionAction
from .mdp_env import LaneChangeEnv, Outcome, RewardWeights
from .traffic_world import IdmParams, RoadConfig, spawn_world

__all__ = [
    "DecisionAction",
    "IdmParams",
    "LaneChangeEnv",
    "Outcome",
    "RewardWeights",
    "RoadConfig",
    "spawn_world",
    "__version__",
]

"""Decentralized multi-task anomaly detection with shared pattern dictionaries.

Participants on a peer-to-peer graph jointly learn either a sparse Gaussian
graphical mixture or a variational autoencoder with a shared decoder.  Only
consensus-averaged statistics cross the network.
"""

from . import consensus, ggm, glasso, mtvae, privacy, topology
from .errors import (
    CollabDictError,
    ConditioningError,
    ConsensusError,
    ConvergenceError,
    ModelCollapseError,
    StageError,
    TrainingFault,
)

__version__ = "0.1.0"

__all__ = [
    "consensus",
    "ggm",
    "glasso",
    "mtvae",
    "privacy",
    "topology",
    "CollabDictError",
    "ConditioningError",
    "ConsensusError",
    "ConvergenceError",
    "ModelCollapseError",
    "StageError",
    "TrainingFault",
]

"""FedCache: personalized federated learning through a server-side knowledge cache."""

from .errors import (
    ConflictError,
    FedCacheError,
    FormatError,
    InvalidArgument,
    InvariantViolation,
    NotFoundError,
    ParseError,
    StateError,
)
from .federation import ExperimentConfig, run, run_experiment
from .knowledge_cache import KnowledgeCache
from .metrics import MetricsReport

__version__ = "0.1.0"

__all__ = [
    "ConflictError",
    "ExperimentConfig",
    "FedCacheError",
    "FormatError",
    "InvalidArgument",
    "InvariantViolation",
    "KnowledgeCache",
    "MetricsReport",
    "NotFoundError",
    "ParseError",
    "StateError",
    "run",
    "run_experiment",
]

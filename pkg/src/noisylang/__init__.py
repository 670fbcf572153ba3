"""Compositional languages under noisy channels: exact optimality checks,
compositionality metrics and a small emergent-communication simulator."""

from .channel import ChannelSpec, NumericError
from .lang import DomainError, FeaturePermutation, FeatureSpace, InstanceTooLarge, Language, is_compositional
from .metrics import MessageLog, MetricsReport, compute_metrics, expected_topo_random
from .oracle import PenaltyH, PreconditionError, verify_optimality

__all__ = [
    "ChannelSpec",
    "DomainError",
    "FeaturePermutation",
    "FeatureSpace",
    "InstanceTooLarge",
    "Language",
    "MessageLog",
    "MetricsReport",
    "NumericError",
    "PenaltyH",
    "PreconditionError",
    "compute_metrics",
    "expected_topo_random",
    "is_compositional",
    "verify_optimality",
]
__version__ = "0.1.0"

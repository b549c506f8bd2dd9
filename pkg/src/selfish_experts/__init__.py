"""Incentive-compatible weight-update rules for prediction with selfish experts."""

from .algorithms import AlgorithmConfig, ExpertState
from .harness import RegretReport, RunConfig, run
from .scoring import (GapReport, ScoringRule, builtin, normalize, properness_check,
                      theoretical_lower_bound)

__all__ = [
    "AlgorithmConfig",
    "ExpertState",
    "GapReport",
    "RegretReport",
    "RunConfig",
    "ScoringRule",
    "builtin",
    "normalize",
    "properness_check",
    "run",
    "theoretical_lower_bound",
]

__version__ = "0.1.0"

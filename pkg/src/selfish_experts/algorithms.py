"""Deterministic weighted majority and theta-randomized weighted majority.

Weights are kept as natural logarithms so that long horizons do not
underflow; every decision is made on weights rescaled by the current
maximum, which leaves the decision unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from .scoring import ScoringRule

__all__ = [
    "DETERMINISTIC",
    "THETA_RWM",
    "TIE_BREAKS",
    "ExpertState",
    "AlgorithmConfig",
    "RoundRecord",
    "weighted_masses",
    "weighted_mean",
    "wm_decision",
    "wm_predict",
    "theta_clamp",
    "theta_rwm_predict",
    "predict",
    "update_weights",
    "potential",
    "log_potential",
    "logsumexp_rows",
    "resolve_eta",
]

DETERMINISTIC = "deterministic_wm"
THETA_RWM = "theta_rwm"
TIE_BREAKS = ("choose_one", "choose_zero")


@dataclass
class ExpertState:
    """Per-expert bookkeeping, one array entry per expert.

    ``true_loss`` accumulates ``|belief - r|`` and ``reported_loss``
    accumulates ``|report - r|``.
    """

    log_weights: np.ndarray
    beliefs: np.ndarray
    reports: np.ndarray
    true_loss: np.ndarray
    reported_loss: np.ndarray

    @classmethod
    def initial(cls, n: int) -> "ExpertState":
        if n < 1:
            raise ValueError("need at least one expert")
        z = np.zeros(n)
        return cls(z.copy(), np.full(n, 0.5), np.full(n, 0.5), z.copy(), z.copy())

    @property
    def n(self) -> int:
        return self.log_weights.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def copy(self) -> "ExpertState":
        return ExpertState(self.log_weights.copy(), self.beliefs.copy(), self.reports.copy(),
                           self.true_loss.copy(), self.reported_loss.copy())


@dataclass(frozen=True)
class AlgorithmConfig:
    rule: ScoringRule
    mode: str = DETERMINISTIC
    theta: float = 0.0
    tie_break: str = "choose_one"
    sample: bool = False  # draw a Bernoulli(q) decision instead of expected loss

    def __post_init__(self):
        if self.mode not in (DETERMINISTIC, THETA_RWM):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (0.0 <= self.theta <= 0.5):
            raise ValueError(f"theta must lie in [0, 1/2], got {self.theta}")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"unknown tie break {self.tie_break!r}")

    @property
    def randomized(self) -> bool:
        return self.mode == THETA_RWM


@dataclass
class RoundRecord:
    t: int
    reports: np.ndarray
    beliefs: np.ndarray
    q: float
    r: int
    alg_loss: float
    potential: float  # sum of weights after this round's update
    log_potential: float
    true_losses: np.ndarray
    reported_losses: np.ndarray
    log_weights: Optional[np.ndarray] = field(default=None, repr=False)
    cum_reported_loss: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "q": self.q,
            "r": self.r,
            "alg_loss": self.alg_loss,
            "potential": self.potential,
            "reports": [float(x) for x in self.reports],
            "beliefs": [float(x) for x in self.beliefs],
        }


def _relative_weights(log_weights: np.ndarray) -> np.ndarray:
    if log_weights.size == 0:
        raise ValueError("empty expert set")
    return np.exp(log_weights - log_weights.max())


def weighted_masses(log_weights: np.ndarray, reports: np.ndarray) -> tuple[float, float]:
    """Weight on outcome 1 and on outcome 0, up to a common positive factor."""
    w = _relative_weights(np.asarray(log_weights, dtype=float))
    p = np.asarray(reports, dtype=float)
    return float(np.sum(w * p)), float(np.sum(w * (1.0 - p)))


def weighted_mean(log_weights: np.ndarray, reports: np.ndarray) -> float:
    w = _relative_weights(np.asarray(log_weights, dtype=float))
    return float(np.sum(w * np.asarray(reports, dtype=float)) / np.sum(w))


def wm_decision(log_weights, reports, tie_break: str = "choose_one") -> int:
    # comparing the two masses directly keeps constructed ties exact
    one, zero = weighted_masses(log_weights, reports)
    if one > zero:
        return 1
    if one < zero:
        return 0
    return 1 if tie_break == "choose_one" else 0


def wm_predict(state: ExpertState, tie_break: str = "choose_one") -> int:
    return wm_decision(state.log_weights, state.reports, tie_break)


def theta_clamp(mean: float, theta: float) -> float:
    if mean <= theta:
        return 0.0
    if mean <= 1.0 - theta:
        return mean
    return 1.0


def theta_rwm_predict(state: ExpertState, theta: float) -> float:
    """Probability of predicting 1 under theta-randomized weighted majority."""
    return theta_clamp(weighted_mean(state.log_weights, state.reports), theta)


def predict(config: AlgorithmConfig, state: ExpertState) -> float:
    if config.randomized:
        return theta_rwm_predict(state, config.theta)
    return float(wm_predict(state, config.tie_break))


def update_weights(rule: ScoringRule, state: ExpertState, realization: int) -> ExpertState:
    """Multiply every weight by ``rule(report, r)`` and accumulate losses in place."""
    factors = np.asarray(rule.score(state.reports, realization), dtype=float)
    if np.any(factors <= 0.0) or not np.all(np.isfinite(factors)):
        raise ValueError(f"rule {rule.name} produced a non-positive update factor {factors}")
    state.log_weights = state.log_weights + np.log(factors)
    state.reported_loss = state.reported_loss + np.abs(state.reports - realization)
    state.true_loss = state.true_loss + np.abs(state.beliefs - realization)
    return state


def logsumexp_rows(log_weights: np.ndarray) -> np.ndarray:
    """log of the summed weights along the last axis, shifted by the maximum."""
    lw = np.asarray(log_weights, dtype=float)
    top = lw.max(axis=-1)
    return top + np.log(np.sum(np.exp(lw - top[..., None]), axis=-1))


def log_potential(state_or_log_weights) -> float:
    lw = getattr(state_or_log_weights, "log_weights", state_or_log_weights)
    return float(logsumexp_rows(lw))


def potential(state_or_log_weights) -> float:
    return math.exp(log_potential(state_or_log_weights))


def resolve_eta(schedule: str, eta: Optional[float], n: int, horizon: int) -> float:
    """Learning rate for ``fixed`` or ``sqrt_horizon`` schedules."""
    if schedule == "fixed":
        if eta is None or not (0.0 < eta < 0.5):
            raise ValueError(f"fixed learning rate must lie in (0, 1/2), got {eta}")
        return float(eta)
    if schedule == "sqrt_horizon":
        return min(0.49, math.sqrt(math.log(max(n, 2)) / horizon))
    raise ValueError(f"unknown eta schedule {schedule!r}")

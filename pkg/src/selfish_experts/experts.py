"""Expert reporting policies: honest, or myopically strategic under a rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scoring import TRUTHFUL_TOL, ScoringRule, rationality_many

__all__ = ["HONEST", "STRATEGIC", "CACHE_STEP", "ExpertPolicy", "make_policy", "report"]

HONEST = "honest"
STRATEGIC = "strategic"
CACHE_STEP = 1e-4


@dataclass(frozen=True)
class ExpertPolicy:
    kind: str
    rule_under_play: Optional[ScoringRule] = None
    rationality_cache: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    truthful: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.kind not in (HONEST, STRATEGIC):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == STRATEGIC:
            if self.rule_under_play is None:
                raise ValueError("strategic policy needs the rule under play")
            if self.rationality_cache is None:
                nodes = np.linspace(0.0, 1.0, int(round(1.0 / CACHE_STEP)) + 1)
                cache = rationality_many(self.rule_under_play, nodes)
                cache.setflags(write=False)
                object.__setattr__(self, "rationality_cache", cache)
            # a best response that is the identity on every node means truth-telling
            nodes = np.linspace(0.0, 1.0, self.rationality_cache.size)
            object.__setattr__(self, "truthful",
                               bool(np.max(np.abs(self.rationality_cache - nodes)) <= TRUTHFUL_TOL))

    def report(self, beliefs):
        """Report(s) for belief(s); strategic lookups use the nearest cache node."""
        b = np.asarray(beliefs, dtype=float)
        if np.any((b < 0.0) | (b > 1.0)):
            raise ValueError("beliefs must lie in [0, 1]")
        if self.kind == HONEST or self.truthful:
            out = b.copy()
        else:
            idx = np.rint(b / CACHE_STEP).astype(np.int64)
            out = self.rationality_cache[idx]
        if out.ndim == 0:
            return float(out)
        return out


_POLICY_CACHE: dict = {}


def make_policy(kind: str, rule: Optional[ScoringRule] = None) -> ExpertPolicy:
    """Build a policy; strategic policies are memoized per rule object."""
    if kind == HONEST:
        return ExpertPolicy(HONEST)
    key = (kind, id(rule))
    hit = _POLICY_CACHE.get(key)
    if hit is None or hit.rule_under_play is not rule:
        hit = ExpertPolicy(kind, rule)
        _POLICY_CACHE[key] = hit
    return hit


def report(policy: ExpertPolicy, b):
    return policy.report(b)

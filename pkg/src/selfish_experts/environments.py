"""Belief and realization sources: adversarial lower-bound instances and an HMM.

Adaptive generators see the algorithm's committed decision through the
realization rule ``OPPOSITE``: the harness resolves it to ``1 - decision``
after the algorithm has predicted. When the beliefs themselves depend on
the realization (the reports do not), a step carries a second belief
vector for the ``r = 1`` branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .algorithms import AlgorithmConfig, ExpertState, wm_decision
from .scoring import (ScoringRule, asymmetry_params, normalize, rationality,
                      theoretical_lower_bound)

__all__ = [
    "OPPOSITE",
    "ENVIRONMENT_NAMES",
    "EnvironmentStep",
    "HmmParams",
    "LowerBoundParams",
    "DecisionOracle",
    "UnsupportedError",
    "Environment",
    "StandardLowerBound",
    "SymmetricLowerBound",
    "GreedyLowerBound",
    "AsymmetricLowerBound",
    "NonmonotoneLowerBound",
    "HmmEnvironment",
    "RandomEnvironment",
    "standard_lb_step",
    "symmetric_phase_length",
    "symmetric_lb_step",
    "greedy_lb_step",
    "asymmetric_lb_step",
    "nonmonotone_lb_step",
    "hmm_step",
    "sample_hmm",
    "make_environment",
]

OPPOSITE = None
ENVIRONMENT_NAMES = ("std-lb", "sym-lb", "greedy-lb", "asym-lb", "nonmono-lb", "hmm")


class UnsupportedError(RuntimeError):
    """The generator cannot drive this algorithm (e.g. needs a deterministic oracle)."""


@dataclass(frozen=True)
class EnvironmentStep:
    beliefs: np.ndarray
    realization: Optional[int] = OPPOSITE
    beliefs_if_one: Optional[np.ndarray] = None

    @property
    def adaptive(self) -> bool:
        return self.realization is OPPOSITE

    def beliefs_for(self, r: int) -> np.ndarray:
        if r == 1 and self.beliefs_if_one is not None:
            return self.beliefs_if_one
        return self.beliefs


def _step(beliefs, realization=OPPOSITE, beliefs_if_one=None) -> EnvironmentStep:
    b1 = None if beliefs_if_one is None else np.asarray(beliefs_if_one, dtype=float)
    return EnvironmentStep(np.asarray(beliefs, dtype=float), realization, b1)


@dataclass(frozen=True)
class HmmParams:
    n_experts: int = 10
    p_transition: float = 0.1
    exp_scale: float = 5.0
    bad_state_low: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("need at least one expert")
        if not (0.0 <= self.p_transition <= 1.0):
            raise ValueError("transition probability must lie in [0, 1]")
        if not self.exp_scale > 0:
            raise ValueError("exp_scale must be positive")
        if not (0.0 <= self.bad_state_low <= 1.0):
            raise ValueError("bad_state_low must lie in [0, 1]")


@dataclass(frozen=True)
class LowerBoundParams:
    variant: str
    gamma_or_mu: Optional[float] = None
    use_rounded_inverse: bool = False
    epsilon: Optional[float] = None
    horizon: int = 10_000

    def __post_init__(self):
        if self.epsilon is not None and not (0.0 < self.epsilon < 0.5):
            raise ValueError(f"epsilon must lie in (0, 1/2), got {self.epsilon}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")


class DecisionOracle:
    """What the deterministic algorithm would decide for hypothetical beliefs."""

    def __init__(self, config: AlgorithmConfig, report_fn):
        self.config = config
        self.report_fn = report_fn

    def decide(self, log_weights: np.ndarray, beliefs) -> int:
        if self.config.randomized:
            raise UnsupportedError("decision oracle needs a deterministic algorithm")
        return wm_decision(log_weights, self.report_fn(np.asarray(beliefs, dtype=float)),
                           self.config.tie_break)

    def advance(self, log_weights: np.ndarray, beliefs, r: int) -> np.ndarray:
        reports = self.report_fn(np.asarray(beliefs, dtype=float))
        return log_weights + np.log(np.asarray(self.config.rule.score(reports, r)))


# ---------------------------------------------------------------------------
# Step functions


def standard_lb_step(alg_decision: int, epsilon: float) -> EnvironmentStep:
    """Two threshold-rounding experts whose reports are always (0, 1)."""
    r = 1 - int(alg_decision)
    if r == 1:
        return _step([0.5 - epsilon, 1.0], r)
    return _step([0.0, 0.5 + epsilon], r)


def symmetric_phase_length(gamma: float, horizon: int, rounded: bool) -> int:
    """Length of the alternating phase of the symmetric instance.

    Rounded: ``2k T / (2k + 1)`` with ``k = ceil(1/gamma)``, T a multiple of
    ``2k + 1``. Unrounded: ``2 T / (2 + gamma)`` to the nearest round.
    """
    if not gamma > 0:
        raise ValueError(f"gap must be positive, got {gamma}")
    if rounded:
        from .scoring import _ceil_inverse
        k = _ceil_inverse(gamma)
        if horizon % (2 * k + 1):
            raise ValueError(f"horizon {horizon} is not a multiple of {2 * k + 1}")
        return 2 * k * horizon // (2 * k + 1)
    return int(round(2.0 * horizon / (2.0 + gamma)))


def symmetric_lb_step(t: int, phase_length: int) -> EnvironmentStep:
    if t <= phase_length:
        return _step([0.5, 0.0, 1.0])
    return _step([1.0, 0.0, 0.5], 0)


_PUNISH_A = np.array([0.0, 1.0, 0.5])
_PUNISH_B = np.array([0.0, 0.5, 1.0])
_NORMAL = np.array([0.5, 0.0, 1.0])


def greedy_lb_step(log_weights: np.ndarray, oracle: DecisionOracle,
                   rounds_left: int) -> tuple[EnvironmentStep, bool]:
    """One step of the greedy instance; returns (step, punish block started).

    The punish block is issued only when the algorithm would follow the
    uninformative expert e0 on both of its rounds.
    """
    if rounds_left >= 2 and oracle.decide(log_weights, _PUNISH_A) == 0:
        after = oracle.advance(log_weights, _PUNISH_A, 1)
        if oracle.decide(after, _PUNISH_B) == 0:
            return _step(_PUNISH_A, 1), True
    return _step(_NORMAL), False


@dataclass(frozen=True)
class _AsymFrame:
    flip: bool      # outcomes renamed so that f(0,0) = 1
    mirrored: bool  # heavier expert swaps to the opposite report


def _asym_frame(rule: ScoringRule, mirrored: bool = False, tol: float = 1e-9) -> _AsymFrame:
    norm = normalize(rule)
    c, d = asymmetry_params(norm)
    if c == 1.0 and d == 0.0:
        raise ValueError(f"{rule.name} is symmetric at the corners; the asymmetric instance is vacuous")
    return _AsymFrame(abs(norm.corners()[(0, 0)] - 1.0) > tol, mirrored)


def asymmetric_lb_step(log_weights: np.ndarray, frame: _AsymFrame) -> EnvironmentStep:
    """Expert 0 reports 0 and expert 1 reports 1 (in the renamed frame).

    Fixed opposite reports already separate loss from weight whichever of
    f(0,1), f(1,0) is the mild penalty, since swapping the experts swaps the
    two cases. The mirrored variant swaps the reports to (1, 0) whenever
    expert 0 is strictly heavier.
    """
    reports = np.array([0.0, 1.0])
    if frame.mirrored and log_weights[0] > log_weights[1]:
        reports = np.array([1.0, 0.0])
    if frame.flip:
        reports = 1.0 - reports
    return _step(reports)


def nonmonotone_lb_step(log_weights: np.ndarray, witness: "_Witness") -> EnvironmentStep:
    if witness.equal_reports:
        return _step([witness.b0, witness.b1], OPPOSITE, [witness.b0, witness.b2])
    w = np.exp(log_weights - log_weights.max())
    mean = (w[0] * witness.pi0 + w[1] * witness.pi2) / (w[0] + w[1])
    return _step([witness.b0, witness.b1 if mean >= 0.5 else witness.b2])


def hmm_step(rng: np.random.Generator, states: np.ndarray,
             params: HmmParams = HmmParams()) -> tuple[EnvironmentStep, np.ndarray]:
    """One HMM round from a single generator; ``states`` is True for good.

    Returns the step (fixed realization) and the next hidden states.
    """
    states = np.asarray(states, dtype=bool)
    r = int(rng.integers(0, 2))
    good = np.minimum(rng.exponential(1.0, states.size) / params.exp_scale, 1.0)
    bad = rng.uniform(params.bad_state_low, 1.0, states.size)
    beliefs = np.where(states, good, bad)
    if r == 1:
        beliefs = 1.0 - beliefs
    flips = rng.random(states.size) < params.p_transition
    return _step(beliefs, r), states ^ flips


def sample_hmm(params: HmmParams, horizon: int):
    """Whole HMM path: (beliefs T x n, realizations T, good-state flags T x n).

    Realizations come from the first spawned substream and expert i from
    substream i + 1, so a path is reproducible expert by expert. Initial
    states are drawn from the stationary distribution (fair coin).
    """
    seqs = np.random.SeedSequence(params.seed).spawn(params.n_experts + 1)
    r = np.random.Generator(np.random.PCG64(seqs[0])).integers(0, 2, horizon)
    beliefs = np.empty((horizon, params.n_experts))
    good = np.empty((horizon, params.n_experts), dtype=bool)
    for i, seq in enumerate(seqs[1:]):
        rng = np.random.Generator(np.random.PCG64(seq))
        start = rng.random() < 0.5
        flips = rng.random(horizon) < params.p_transition
        switched = np.concatenate(([0], np.cumsum(flips[:-1]))) % 2 == 1
        good[:, i] = np.logical_xor(start, switched)
        g = np.minimum(rng.exponential(1.0, horizon) / params.exp_scale, 1.0)
        u = rng.uniform(params.bad_state_low, 1.0, horizon)
        beliefs[:, i] = np.where(good[:, i], g, u)
    beliefs = np.where(r[:, None] == 1, 1.0 - beliefs, beliefs)
    return beliefs, r, good


# ---------------------------------------------------------------------------
# Stateful generators used by the harness


class Environment:
    name = "environment"
    n_experts = 0
    oblivious = False
    needs_oracle = False

    def reset(self, horizon: int, seed: int = 0) -> None:
        self.horizon = horizon

    def propose(self, t: int, state: ExpertState,
                oracle: Optional[DecisionOracle]) -> EnvironmentStep:
        raise NotImplementedError

    def path(self):
        """Pre-drawn (beliefs, realizations) for oblivious environments."""
        raise NotImplementedError


class StandardLowerBound(Environment):
    name = "std-lb"
    n_experts = 2

    def __init__(self, epsilon: Optional[float] = None):
        if epsilon is not None and not (0.0 < epsilon < 0.5):
            raise ValueError(f"epsilon must lie in (0, 1/2), got {epsilon}")
        self.epsilon = epsilon

    def reset(self, horizon, seed=0):
        super().reset(horizon, seed)
        # default epsilon = 1/T; capped to stay inside (0, 1/2)
        self._eps = self.epsilon if self.epsilon is not None else min(1.0 / horizon, 0.25)

    def propose(self, t, state, oracle):
        zero, one = standard_lb_step(1, self._eps), standard_lb_step(0, self._eps)
        return _step(zero.beliefs, OPPOSITE, one.beliefs)


class SymmetricLowerBound(Environment):
    name = "sym-lb"
    n_experts = 3

    def __init__(self, gamma: float, rounded: bool = False):
        self.gamma = float(gamma)
        self.rounded = rounded

    def reset(self, horizon, seed=0):
        super().reset(horizon, seed)
        self.phase_length = symmetric_phase_length(self.gamma, horizon, self.rounded)

    def propose(self, t, state, oracle):
        return symmetric_lb_step(t, self.phase_length)


class GreedyLowerBound(Environment):
    name = "greedy-lb"
    n_experts = 3
    needs_oracle = True

    def reset(self, horizon, seed=0):
        super().reset(horizon, seed)
        self._pending = False
        self.punish_blocks = 0

    def propose(self, t, state, oracle):
        if oracle is None:
            raise UnsupportedError("greedy instance needs a decision oracle")
        if self._pending:
            self._pending = False
            return _step(_PUNISH_B, 1)
        step, punish = greedy_lb_step(state.log_weights, oracle, self.horizon - t + 1)
        if punish:
            self._pending = True
            self.punish_blocks += 1
        return step


class AsymmetricLowerBound(Environment):
    name = "asym-lb"
    n_experts = 2

    def __init__(self, rule: ScoringRule, mirrored: bool = False):
        self.frame = _asym_frame(rule, mirrored)

    def propose(self, t, state, oracle):
        return asymmetric_lb_step(state.log_weights, self.frame)


@dataclass(frozen=True)
class _Witness:
    b0: float
    b1: float
    b2: float
    pi0: float
    pi1: float
    pi2: float

    @property
    def equal_reports(self) -> bool:
        return abs(self.pi1 - self.pi2) <= 1e-6


class NonmonotoneLowerBound(Environment):
    name = "nonmono-lb"
    n_experts = 2

    def __init__(self, rule: ScoringRule, b1: float = 0.51, b2: float = 0.53):
        if not (0.0 <= b1 < b2 <= 1.0):
            raise ValueError(f"need 0 <= b1 < b2 <= 1, got ({b1}, {b2})")
        pi1, pi2 = rationality(rule, b1), rationality(rule, b2)
        if pi1 < pi2 - 1e-6:
            raise ValueError(
                f"({b1}, {b2}) is not a non-monotonicity witness for {rule.name}: "
                f"rho(b1)={pi1:.6g} < rho(b2)={pi2:.6g}")
        b0 = 1.0 - (b1 + b2) / 2.0
        self.witness = _Witness(b0, b1, b2, rationality(rule, b0), pi1, pi2)

    def propose(self, t, state, oracle):
        return nonmonotone_lb_step(state.log_weights, self.witness)


class HmmEnvironment(Environment):
    name = "hmm"
    oblivious = True

    def __init__(self, params: HmmParams = HmmParams()):
        self.params = params
        self.n_experts = params.n_experts

    def reset(self, horizon, seed=None):
        super().reset(horizon, seed)
        params = self.params if seed is None else _replace_seed(self.params, seed)
        self._beliefs, self._r, self.good = sample_hmm(params, horizon)

    def propose(self, t, state, oracle):
        return _step(self._beliefs[t - 1], int(self._r[t - 1]))

    def path(self):
        return self._beliefs, self._r


def _replace_seed(params: HmmParams, seed: int) -> HmmParams:
    from dataclasses import replace
    return replace(params, seed=seed)


class RandomEnvironment(Environment):
    """Fuzzing source: random beliefs, realization adversarial or Bernoulli.

    Beliefs mix uniform draws with extreme and half values so that ties and
    boundary reports occur.
    """

    name = "random"

    def __init__(self, n_experts: int = 3, p_adversarial: float = 0.5):
        self.n_experts = n_experts
        self.p_adversarial = p_adversarial

    def reset(self, horizon, seed=0):
        super().reset(horizon, seed)
        self.rng = np.random.default_rng(seed)

    def propose(self, t, state, oracle):
        n = self.n_experts
        kind = self.rng.random(n)
        beliefs = np.where(kind < 0.2, self.rng.integers(0, 2, n).astype(float),
                           np.where(kind < 0.3, 0.5, self.rng.random(n)))
        if self.rng.random() < self.p_adversarial:
            return _step(beliefs)
        return _step(beliefs, int(self.rng.random() < beliefs.mean()))


def make_environment(name: str, rule: Optional[ScoringRule] = None, **params) -> Environment:
    """Build a generator from its selection string.

    Parameters by name: ``std-lb`` epsilon; ``sym-lb`` gamma, rounded;
    ``nonmono-lb`` b1, b2; ``hmm`` any :class:`HmmParams` field; ``random``
    n_experts, p_adversarial. Gaps default to the rule's own gap.
    """
    if name == "std-lb":
        return StandardLowerBound(params.pop("epsilon", None), **params)
    if name == "sym-lb":
        gamma = params.pop("gamma", None)
        if gamma is None:
            report = theoretical_lower_bound(normalize(_need(rule, name)), check_properness=False)
            gamma = report.gamma if report.gamma is not None else report.mu
            if gamma is None:
                raise ValueError(f"{rule.name} has neither a symmetric nor a semi-symmetric gap")
        return SymmetricLowerBound(gamma, **params)
    if name == "greedy-lb":
        return GreedyLowerBound(**params)
    if name == "asym-lb":
        return AsymmetricLowerBound(_need(rule, name), **params)
    if name == "nonmono-lb":
        return NonmonotoneLowerBound(_need(rule, name), **params)
    if name == "hmm":
        return HmmEnvironment(HmmParams(**params))
    if name == "random":
        return RandomEnvironment(**params)
    raise ValueError(f"unknown environment {name!r}; expected one of {', '.join(ENVIRONMENT_NAMES)}")


def _need(rule, name):
    if rule is None:
        raise ValueError(f"environment {name} needs the rule under play")
    return rule

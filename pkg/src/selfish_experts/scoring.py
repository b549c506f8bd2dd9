"""Binary scoring rules used as multiplicative weight-update factors.

A rule maps a report ``p`` in [0, 1] and a realization ``r`` in {0, 1} to a
real score. Rules used to update weights must be strictly positive; raw
scoring rules (Brier score, the plain spherical score, Beta-family losses)
may be negative and are only meant for analysis or for building a
positive family member via :func:`normalize` and :func:`family_member`.

Higher scores are better throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

__all__ = [
    "ScoringRule",
    "NormalizedRule",
    "GapReport",
    "PropernessResult",
    "NotSymmetricError",
    "QuadratureError",
    "RULE_IDS",
    "builtin",
    "rule_from_id",
    "beta_score",
    "beta_rule",
    "brier_score",
    "spherical_score",
    "normalize",
    "family_member",
    "is_symmetric",
    "gap_symmetric",
    "gap_semi_symmetric",
    "asymmetry_params",
    "properness_check",
    "rationality",
    "rationality_many",
    "theoretical_lower_bound",
]

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

RULE_IDS = ("standard", "quadratic", "spherical", "brier", "hedge", "beta:<alpha>")

_ALIASES = {
    "standard": "standard",
    "standard_absolute": "standard",
    "quadratic": "quadratic",
    "spherical": "spherical",
    "brier": "brier",
    "brier_update": "brier",
    "hedge": "hedge",
}

SYMMETRY_GRID = 1e-3
SYMMETRY_TOL = 1e-9
CORNER_TOL = 1e-9
ARGMAX_GRID = 1e-3
ARGMAX_TOL = 1e-6
TRUTHFUL_TOL = 1e-4

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class NotSymmetricError(ValueError):
    """The rule fails the symmetry (or corner) precondition of a gap."""


class QuadratureError(ArithmeticError):
    """Incomplete-beta evaluation returned a non-finite value."""


@dataclass(frozen=True)
class ScoringRule:
    """A score function on [0, 1] x {0, 1} plus its metadata.

    ``eta`` is ``None`` for raw rules that are not a weight-update factor.
    ``score`` broadcasts over numpy arrays and returns a float for scalar
    input.
    """

    name: str
    score_fn: ScoreFn = field(repr=False, compare=False)
    eta: Optional[float] = None
    claimed_ic: bool = False
    # exact normalized generator, when the rule is a known family member
    generator: Optional[ScoreFn] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.eta is not None and not (0.0 < self.eta < 1.0):
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")

    def score(self, p, r):
        out = self.score_fn(np.asarray(p, dtype=float), np.asarray(r))
        if np.ndim(out) == 0:
            return float(out)
        return out

    __call__ = score


@dataclass(frozen=True)
class NormalizedRule:
    """``(base - a) / b`` rescaled so the worst corner is 0 and the best is 1."""

    base: ScoringRule
    a: float
    b: float

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"normalization scale must be positive, got {self.b}")

    @property
    def name(self) -> str:
        return self.base.name

    def score(self, p, r):
        if self.base.generator is not None:
            out = self.base.generator(np.asarray(p, dtype=float), np.asarray(r))
        else:
            out = (np.asarray(self.base.score(p, r)) - self.a) / self.b
        if np.ndim(out) == 0:
            return float(out)
        return out

    __call__ = score

    def corners(self) -> dict[tuple[int, int], float]:
        return {(p, r): self.score(float(p), r) for p in (0, 1) for r in (0, 1)}


@dataclass(frozen=True)
class GapReport:
    gamma: Optional[float]
    mu: Optional[float]
    c: float
    d: float
    symmetric: bool
    semi_symmetric: bool
    lower_bound_rounded: float
    lower_bound_unrounded: float

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "mu": self.mu,
            "c": self.c,
            "d": self.d,
            "lb_rounded": self.lower_bound_rounded,
            "lb_unrounded": self.lower_bound_unrounded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class PropernessResult:
    proper: bool
    witness: Optional[tuple[float, float]] = None
    max_deviation: float = 0.0

    def __bool__(self) -> bool:
        return self.proper


# ---------------------------------------------------------------------------
# Built-in rules


def _check_eta(eta: float) -> float:
    eta = float(eta)
    if not (0.0 < eta < 0.5):
        raise ValueError(f"learning rate must lie in (0, 1/2), got {eta}")
    return eta


def _abs_loss(p, r):
    return np.abs(p - r)


def _sphere_norm(p):
    return np.sqrt(p * p + (1.0 - p) * (1.0 - p))


def spherical_score() -> ScoringRule:
    """Plain spherical score ``(1 - |p - r|) / ||(p, 1 - p)||``."""
    return ScoringRule(
        "spherical_score",
        lambda p, r: (1.0 - _abs_loss(p, r)) / _sphere_norm(p),
        claimed_ic=True,
    )


def brier_score() -> ScoringRule:
    """Brier score ``2 p_r - (p^2 + (1 - p)^2)``."""

    def fn(p, r):
        p_r = p * r + (1.0 - p) * (1.0 - r)
        return 2.0 * p_r - (p * p + (1.0 - p) * (1.0 - p))

    return ScoringRule("brier_score", fn, claimed_ic=True)


def builtin(name: str, eta: float) -> ScoringRule:
    """Weight-update rule ``name`` with learning rate ``eta``.

    Accepted names are the identifiers ``standard``, ``quadratic``,
    ``spherical``, ``brier``, ``hedge`` and ``beta:<alpha>`` plus the long
    forms ``standard_absolute`` and ``brier_update``.
    """
    eta = _check_eta(eta)
    if name.startswith("beta"):
        return beta_rule(_parse_beta_alpha(name), eta)
    key = _ALIASES.get(name)
    if key is None:
        raise ValueError(f"unknown rule {name!r}; expected one of {', '.join(RULE_IDS)}")

    gen = None
    if key == "standard":
        fn = lambda p, r: 1.0 - eta * _abs_loss(p, r)
        gen = lambda p, r: 1.0 - _abs_loss(p, r)
        ic = False
    elif key == "quadratic":
        fn = lambda p, r: 1.0 - eta * (p - r) ** 2
        gen = lambda p, r: 1.0 - (p - r) ** 2
        ic = True
    elif key == "spherical":
        fn = lambda p, r: 1.0 - eta * (1.0 - (1.0 - _abs_loss(p, r)) / _sphere_norm(p))
        gen = lambda p, r: (1.0 - _abs_loss(p, r)) / _sphere_norm(p)
        ic = True
    elif key == "brier":
        fn = lambda p, r: 1.0 - eta * (
            (p * p + (1.0 - p) * (1.0 - p) + 1.0) / 2.0 - (1.0 - _abs_loss(p, r))
        )
        gen = lambda p, r: 1.0 - (
            (p * p + (1.0 - p) * (1.0 - p) + 1.0) / 2.0 - (1.0 - _abs_loss(p, r))
        )
        ic = True
    else:
        fn = lambda p, r: np.exp(-eta * _abs_loss(p, r))
        ic = False
    return ScoringRule(key, fn, eta=eta, claimed_ic=ic, generator=gen)


def _parse_beta_alpha(name: str) -> float:
    # beta:0.5 (identifier) or beta(0.5) (long form)
    body = name[4:]
    if body.startswith(":"):
        text = body[1:]
    elif body.startswith("(") and body.endswith(")"):
        text = body[1:-1]
    else:
        raise ValueError(f"unknown rule {name!r}; use beta:<alpha>")
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"bad beta parameter in {name!r}") from None


def rule_from_id(identifier: str, eta: float) -> ScoringRule:
    """Alias of :func:`builtin` keyed by the external identifier strings."""
    return builtin(identifier, eta)


# ---------------------------------------------------------------------------
# Beta family


def beta_score(alpha: float) -> ScoringRule:
    """Raw Beta(alpha, alpha) scoring rule (negative partial losses).

    With weight ``c^(alpha-1) (1-c)^(alpha-1)`` the partial losses are
    ``L1(p) = int_p^1 c^(alpha-1) (1-c)^alpha dc`` and
    ``L0(p) = int_0^p c^alpha (1-c)^(alpha-1) dc``; the score is
    ``-L1(p)`` when r = 1 and ``-L0(p)`` when r = 0. Both are evaluated with
    the regularized incomplete beta function. ``L0(p) = L1(1 - p)``, so the
    rule is symmetric by construction.
    """
    alpha = float(alpha)
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"beta parameter must lie in (0, 1], got {alpha}")
    total = float(special.beta(alpha, alpha + 1.0))

    def loss_one(p):
        # int_p^1 c^(a-1)(1-c)^a dc = B(a, a+1) * (1 - I_p(a, a+1))
        val = total * special.betaincc(alpha, alpha + 1.0, p)
        if not np.all(np.isfinite(val)):
            raise QuadratureError(f"incomplete beta failed for alpha={alpha}")
        return val

    def fn(p, r):
        return -np.where(r == 1, loss_one(p), loss_one(1.0 - p))

    return ScoringRule(f"beta:{alpha:g}", fn, claimed_ic=True)


def beta_rule(alpha: float, eta: float = 0.1) -> ScoringRule:
    """Positive Beta-family weight update ``1 + eta (f_norm - 1)``."""
    eta = _check_eta(eta)
    return family_member(normalize(beta_score(alpha)), 1.0, eta)


# ---------------------------------------------------------------------------
# Normalization and the generated family


def normalize(rule: ScoringRule) -> NormalizedRule:
    corners = {(p, r): rule.score(float(p), r) for p in (0, 1) for r in (0, 1)}
    half = [rule.score(0.5, r) for r in (0, 1)]
    if not all(math.isfinite(v) for v in list(corners.values()) + half):
        raise ValueError(f"rule {rule.name} is not finite at the corners")
    a = min(corners[(0, 1)], corners[(1, 0)])
    b = max(corners[(0, 0)], corners[(1, 1)]) - a
    if not b > 0:
        raise ValueError(f"rule {rule.name} is degenerate (scale {b} <= 0)")
    return NormalizedRule(rule, a, b)


def family_member(norm: NormalizedRule, a: float, eta: float) -> ScoringRule:
    """Rule ``a * (1 + eta * (f_norm(p, r) - 1))`` of the generated family."""
    if not a > 0:
        raise ValueError(f"family scale must be positive, got {a}")
    if not (0.0 < eta < 1.0):
        raise ValueError(f"family learning rate must lie in (0, 1), got {eta}")
    a = float(a)
    eta = float(eta)

    def fn(p, r):
        return a * (1.0 + eta * (norm.score(p, r) - 1.0))

    return ScoringRule(norm.name, fn, eta=eta, claimed_ic=norm.base.claimed_ic,
                       generator=norm.score)


# ---------------------------------------------------------------------------
# Gap analysis


def is_symmetric(norm: NormalizedRule, grid_step: float = SYMMETRY_GRID,
                 tol: float = SYMMETRY_TOL) -> bool:
    p = np.linspace(0.0, 1.0, int(round(1.0 / grid_step)) + 1)
    diff = np.asarray(norm.score(p, 0)) - np.asarray(norm.score(1.0 - p, 1))
    return bool(np.max(np.abs(diff)) <= tol)


def _has_unit_corners(norm: NormalizedRule, tol: float = CORNER_TOL) -> bool:
    c = norm.corners()
    return (abs(c[(0, 0)] - 1) <= tol and abs(c[(1, 1)] - 1) <= tol
            and abs(c[(0, 1)]) <= tol and abs(c[(1, 0)]) <= tol)


def gap_symmetric(norm: NormalizedRule) -> float:
    """``f(1/2, 1) - 1/2`` for a symmetric normalized rule."""
    if not is_symmetric(norm):
        raise NotSymmetricError(f"{norm.name} is not symmetric")
    return norm.score(0.5, 1) - 0.5


def gap_semi_symmetric(norm: NormalizedRule) -> float:
    """Mean of the two half-report scores minus 1/2; needs 0/1 corners."""
    if not _has_unit_corners(norm):
        raise NotSymmetricError(f"{norm.name} does not have 0/1 corners")
    return 0.5 * (norm.score(0.5, 0) + norm.score(0.5, 1)) - 0.5


def asymmetry_params(norm: NormalizedRule) -> tuple[float, float]:
    corners = norm.corners()
    c = 1.0 - max(corners[(0, 1)], corners[(1, 0)])
    d = 1.0 - min(corners[(0, 0)], corners[(1, 1)])
    # snap quadrature noise at the corners
    c = 1.0 if abs(c - 1.0) <= CORNER_TOL else c
    d = 0.0 if abs(d) <= CORNER_TOL else d
    if not c > d:
        raise ValueError(f"{norm.name}: c={c} <= d={d}, not strictly proper")
    return c, d


# ---------------------------------------------------------------------------
# Best responses


def _expected(rule, beliefs, reports):
    return beliefs * rule.score(reports, 1) + (1.0 - beliefs) * rule.score(reports, 0)


def _grid_scan(rule, beliefs, grid_step, chunk=1024):
    """First grid maximizer, its value, and whether it is the unique maximizer.

    Uniqueness compares against the best grid report more than two grid
    steps away; relative slack 1e-12 absorbs summation-order noise.
    """
    grid = np.linspace(0.0, 1.0, int(round(1.0 / grid_step)) + 1)
    f1 = np.asarray(rule.score(grid, 1), dtype=float)
    f0 = np.asarray(rule.score(grid, 0), dtype=float)
    best = np.empty_like(beliefs)
    value = np.empty_like(beliefs)
    unique = np.empty(beliefs.shape, dtype=bool)
    for lo in range(0, beliefs.size, chunk):
        b = beliefs[lo:lo + chunk, None]
        exp = b * f1[None, :] + (1.0 - b) * f0[None, :]
        idx = np.argmax(exp, axis=1)
        rows = np.arange(idx.size)
        top = exp[rows, idx]
        far = np.abs(grid[None, :] - grid[idx][:, None]) > 2.5 * grid_step
        runner_up = np.where(far, exp, -np.inf).max(axis=1)
        best[lo:lo + chunk] = grid[idx]
        value[lo:lo + chunk] = top
        unique[lo:lo + chunk] = top - runner_up > 1e-12 * np.maximum(1.0, np.abs(top))
    return best, value, unique


def _best_responses(rule, beliefs: np.ndarray, grid_step: float = ARGMAX_GRID):
    """Grid scan plus golden-section refinement, vectorized over beliefs.

    Returns (argmax, max value, unique flag). Grid ties go to the smallest
    report; the refined point only replaces the grid point when strictly
    better.
    """
    beliefs = np.asarray(beliefs, dtype=float)
    best, value, unique = _grid_scan(rule, beliefs, grid_step)

    left = np.clip(best - grid_step, 0.0, 1.0)
    right = np.clip(best + grid_step, 0.0, 1.0)
    x1 = right - _INV_PHI * (right - left)
    x2 = left + _INV_PHI * (right - left)
    v1 = _expected(rule, beliefs, x1)
    v2 = _expected(rule, beliefs, x2)
    while np.max(right - left) > ARGMAX_TOL:
        go_left = v1 >= v2  # ties keep the left part
        left = np.where(go_left, left, x1)
        right = np.where(go_left, x2, right)
        span = _INV_PHI * (right - left)
        x1, x2 = np.where(go_left, right - span, x2), np.where(go_left, x1, left + span)
        fresh = _expected(rule, beliefs, np.where(go_left, x1, x2))
        v1, v2 = np.where(go_left, fresh, v2), np.where(go_left, v1, fresh)
    mid = 0.5 * (left + right)
    v_mid = _expected(rule, beliefs, mid)
    better = v_mid > value
    return np.where(better, mid, best), np.where(better, v_mid, value), unique


def rationality(rule: ScoringRule, b: float) -> float:
    """Report maximizing the expected score of an expert with belief ``b``.

    Ties go to the smallest maximizing report.
    """
    if not (0.0 <= b <= 1.0):
        raise ValueError(f"belief must lie in [0, 1], got {b}")
    return float(_best_responses(rule, np.array([float(b)]))[0][0])


def rationality_many(rule: ScoringRule, beliefs) -> np.ndarray:
    return _best_responses(rule, np.asarray(beliefs, dtype=float))[0]


def properness_check(rule: ScoringRule, grid_step: float = 1e-2) -> PropernessResult:
    """Grid test of (strict) properness.

    Passes iff the best response is within 1e-4 of the belief for every
    grid belief. On failure the witness is the belief whose best response
    deviates most from it among beliefs where misreporting is strictly
    better than the truth and the best response is unique (falling back to
    all failing beliefs), smallest belief first on ties. For threshold rules
    this is the grid belief just below 1/2.
    """
    if not (1e-4 <= grid_step <= 1e-2):
        raise ValueError(f"grid_step must lie in [1e-4, 1e-2], got {grid_step}")
    beliefs = np.linspace(0.0, 1.0, int(round(1.0 / grid_step)) + 1)
    best, value, unique = _best_responses(rule, beliefs)
    dev = np.abs(best - beliefs)
    failing = dev > TRUTHFUL_TOL
    if not failing.any():
        return PropernessResult(True, None, float(dev.max()))
    truthful = _expected(rule, beliefs, beliefs)
    strict = failing & unique & (value - truthful > 1e-12 * np.maximum(1.0, np.abs(value)))
    pool = strict if strict.any() else failing
    cand = np.where(pool, dev, -1.0)
    i = int(np.argmax(cand))
    return PropernessResult(False, (float(beliefs[i]), float(best[i])), float(dev.max()))


# ---------------------------------------------------------------------------
# Lower-bound constants


def _ceil_inverse(gap: float) -> int:
    """``ceil(1 / gap)`` that does not round 1/0.25000000000000003 up to 5."""
    inv = 1.0 / gap
    nearest = round(inv)
    if abs(inv - nearest) <= 1e-9 * max(1.0, inv):
        return int(nearest)
    return math.ceil(inv)


def theoretical_lower_bound(norm: NormalizedRule, check_properness: bool = True) -> GapReport:
    """Worst-case ratio constant for deterministic WM with this rule family."""
    if check_properness:
        verdict = properness_check(norm.base)
        if not verdict.proper:
            raise ValueError(f"{norm.name} is not strictly proper (witness {verdict.witness})")
    c, d = asymmetry_params(norm)
    if is_symmetric(norm):
        gamma = gap_symmetric(norm)
        return GapReport(gamma, gamma, c, d, True, True,
                         2.0 + 1.0 / _ceil_inverse(gamma), 2.0 + gamma)
    if _has_unit_corners(norm):
        mu = gap_semi_symmetric(norm)
        return GapReport(None, mu, c, d, False, True,
                         2.0 + 1.0 / _ceil_inverse(mu), 2.0 + mu)
    bound = 2.0 + max((1.0 - c) / (2.0 * c), d / (4.0 * (1.0 - d)))
    return GapReport(None, None, c, d, False, False, bound, bound)

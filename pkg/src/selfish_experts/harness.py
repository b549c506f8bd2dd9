"""Run orchestration: environment -> policies -> algorithm -> audits -> report.

Oblivious environments (the HMM) take a vectorized path that computes the
whole weight trajectory with cumulative sums; every other environment is
stepped round by round because its beliefs or realizations react to the
algorithm.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .algorithms import (DETERMINISTIC, THETA_RWM, AlgorithmConfig, ExpertState, RoundRecord,
                         log_potential, logsumexp_rows, resolve_eta, theta_clamp, update_weights,
                         weighted_masses, weighted_mean)
from .environments import DecisionOracle, Environment, make_environment
from .experts import HONEST, STRATEGIC, ExpertPolicy, make_policy
from .scoring import ScoringRule, builtin, family_member, normalize

__all__ = [
    "AUDITS",
    "AuditViolation",
    "RunConfig",
    "RegretReport",
    "ReplicaResult",
    "RunResult",
    "PolicyPanel",
    "build_rule",
    "run",
    "run_replica",
    "invariant_audit",
    "randomized_floor_check",
    "ratio",
]

log = logging.getLogger(__name__)

AUDITS = frozenset({"potential_drop", "weight_floor", "monotone"})

SPHERICAL_DROP = (2.0 - math.sqrt(2.0)) / 2.0
BRIER_THETA = 0.382
BRIER_CONSTANT = 2.62
REL_SLACK = 1e-9


class AuditViolation(AssertionError):
    def __init__(self, t: int, messages: Sequence[str]):
        self.t = t
        self.messages = list(messages)
        super().__init__(f"round {t}: " + "; ".join(self.messages))


@dataclass(frozen=True)
class RunConfig:
    rule: Union[str, ScoringRule] = "spherical"
    eta: Optional[float] = 0.1
    eta_schedule: str = "fixed"
    mode: str = DETERMINISTIC
    theta: float = 0.0
    tie_break: str = "choose_one"
    sample: bool = False
    family_scale: float = 1.0
    environment: str = "hmm"
    env_params: dict = field(default_factory=dict)
    policy: Union[str, tuple] = HONEST
    horizon: int = 1000
    replicas: int = 1
    seed: int = 0
    audit: frozenset = frozenset()
    fail_fast: bool = True
    keep_records: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.replicas < 1:
            raise ValueError("replicas must be at least 1")
        unknown = set(self.audit) - AUDITS
        if unknown:
            raise ValueError(f"unknown audit identifiers {sorted(unknown)}")
        object.__setattr__(self, "audit", frozenset(self.audit))
        if not isinstance(self.policy, str):
            object.__setattr__(self, "policy", tuple(self.policy))

    @property
    def rule_key(self) -> str:
        if isinstance(self.rule, ScoringRule):
            return self.rule.name
        return {"standard_absolute": "standard", "brier_update": "brier"}.get(self.rule, self.rule)


@dataclass
class RegretReport:
    M_T: float
    m_true: np.ndarray
    m_reported: np.ndarray
    ratio_true: float
    ratio_reported: float
    bound_checks: dict
    replicas: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "M_T": self.M_T,
            "m_true": [float(x) for x in self.m_true],
            "m_reported": [float(x) for x in self.m_reported],
            "ratio_true": _finite_or_none(self.ratio_true),
            "ratio_reported": _finite_or_none(self.ratio_reported),
            "ratio_true_infinite": math.isinf(self.ratio_true),
            "bound_checks": dict(self.bound_checks),
        }
        if self.replicas:
            out["replicas"] = [rep.to_dict() for rep in self.replicas]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _finite_or_none(x: float):
    return None if math.isinf(x) or math.isnan(x) else float(x)


def ratio(total: float, best: float) -> float:
    """``total / best`` with the best-expert-has-zero-loss case flagged as inf."""
    if best > 0:
        return total / best
    return math.inf if total > 0 else math.nan


@dataclass
class ReplicaResult:
    seed: int
    q: np.ndarray
    r: np.ndarray
    alg_loss: np.ndarray
    log_potential: np.ndarray
    best_true: np.ndarray       # running min of cumulative true loss, per round
    best_reported: np.ndarray
    final: ExpertState
    report: RegretReport
    violations: list = field(default_factory=list)
    records: Optional[list] = None

    def ratio_curve(self) -> np.ndarray:
        cum = np.cumsum(self.alg_loss)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = cum / self.best_true
        return np.where(self.best_true > 0, out, np.inf)


@dataclass
class RunResult:
    config: RunConfig
    replicas: list
    report: RegretReport

    @property
    def records(self) -> list:
        return self.replicas[0].records or []

    def ratio_curve(self) -> np.ndarray:
        """Per-round mean over replicas of the time-averaged ratio."""
        return np.mean([rep.ratio_curve() for rep in self.replicas], axis=0)

    def write_jsonl(self, path, replica: int = 0) -> None:
        with open(path, "w") as fh:
            for rec in self.replicas[replica].records or []:
                fh.write(json.dumps(rec.to_json_dict()) + "\n")


class PolicyPanel:
    """Per-expert reporting policies applied to a belief vector (or matrix)."""

    def __init__(self, policies: Sequence[ExpertPolicy]):
        self.policies = list(policies)
        self.uniform = all(p is self.policies[0] for p in self.policies)

    @classmethod
    def build(cls, spec, n: int, rule: ScoringRule) -> "PolicyPanel":
        kinds = [spec] * n if isinstance(spec, str) else list(spec)
        if len(kinds) != n:
            raise ValueError(f"{len(kinds)} policies for {n} experts")
        return cls([make_policy(k, rule if k == STRATEGIC else None) for k in kinds])

    def reports(self, beliefs: np.ndarray) -> np.ndarray:
        b = np.asarray(beliefs, dtype=float)
        if self.uniform:
            return np.asarray(self.policies[0].report(b), dtype=float)
        out = np.empty_like(b)
        for i, pol in enumerate(self.policies):
            out[..., i] = pol.report(b[..., i])
        return out


def build_rule(config: RunConfig, n: int) -> ScoringRule:
    if isinstance(config.rule, ScoringRule):
        return config.rule
    eta = resolve_eta(config.eta_schedule, config.eta, n, config.horizon)
    return _cached_rule(config.rule, eta, config.family_scale)


@lru_cache(maxsize=64)
def _cached_rule(name: str, eta: float, family_scale: float) -> ScoringRule:
    # one object per (rule, eta) so strategic rationality tables are shared by replicas
    rule = builtin(name, eta)
    if family_scale != 1.0:
        rule = family_member(normalize(rule), family_scale, eta)
    return rule


def _environment(config: RunConfig, rule: ScoringRule) -> Environment:
    return make_environment(config.environment, rule, **dict(config.env_params))


def _replica_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# Audits


def _drop_coefficient(config: RunConfig, eta: float) -> Optional[float]:
    """c with Phi' <= (1 - c * alg_loss) Phi, when a proof supplies one."""
    if config.family_scale != 1.0:
        return None
    if config.rule_key == "spherical" and config.mode == DETERMINISTIC:
        return SPHERICAL_DROP * eta
    if (config.rule_key in ("brier", "quadratic") and config.mode == THETA_RWM
            and config.theta >= BRIER_THETA):
        return eta / BRIER_CONSTANT
    return None


_FLOOR_RULES = ("standard", "spherical", "brier", "quadratic", "hedge")


def invariant_audit(prev: Optional[RoundRecord], cur: RoundRecord, config: RunConfig,
                    eta: float, n: int) -> list:
    """Violated proof inequalities between two consecutive records.

    ``prev`` is None for the first round (initial potential n).
    """
    out = []
    prev_logphi = math.log(n) if prev is None else prev.log_potential
    slack = math.log1p(REL_SLACK)
    audits = config.audit
    if "potential_drop" in audits:
        coef = _drop_coefficient(config, eta)
        if coef is not None:
            loss = cur.alg_loss if config.mode == THETA_RWM else float(cur.alg_loss >= 1.0)
            if loss > 0:
                bound = prev_logphi + math.log1p(-coef * loss)
                if cur.log_potential > bound + slack:
                    out.append(f"potential_drop: log Phi {cur.log_potential:.12g} > {bound:.12g}")
    if ("weight_floor" in audits and config.rule_key in _FLOOR_RULES
            and config.family_scale == 1.0 and cur.log_weights is not None):
        floor = cur.cum_reported_loss * math.log1p(-eta)
        bad = cur.log_weights < floor - REL_SLACK * np.maximum(1.0, np.abs(floor))
        if bad.any():
            out.append(f"weight_floor: experts {np.flatnonzero(bad).tolist()}")
    if "monotone" in audits:
        if not (0.0 <= cur.alg_loss <= 1.0):
            out.append(f"monotone: alg_loss {cur.alg_loss} outside [0, 1]")
        for name, inc in (("true", cur.true_losses), ("reported", cur.reported_losses)):
            if np.any(inc < 0.0) or np.any(inc > 1.0):
                out.append(f"monotone: {name} loss increment outside [0, 1]")
        if config.family_scale == 1.0 and config.rule_key in _FLOOR_RULES:
            if cur.log_potential > prev_logphi + slack:
                out.append("monotone: potential increased")
    return out


def _bound_checks(config: RunConfig, eta: float, n: int, M: float,
                  m_reported: np.ndarray) -> dict:
    best = float(m_reported.min())
    checks = {}
    if config.family_scale != 1.0:
        return checks
    if config.rule_key == "spherical" and config.mode == DETERMINISTIC:
        checks["thm3.2"] = M <= (2.0 / (2.0 - math.sqrt(2.0))) * (
            (1.0 + eta) * best + math.log(n) / eta) + 1e-9
    if (config.rule_key in ("brier", "quadratic") and config.mode == THETA_RWM
            and config.theta >= BRIER_THETA):
        checks["thm6.2"] = M <= BRIER_CONSTANT * ((1.0 + eta) * best + math.log(n) / eta) + 1e-9
    if config.rule_key == "standard" and config.mode == DETERMINISTIC:
        checks["wm_reported"] = M <= 2.0 * (1.0 + eta) * best + 2.0 * math.log(n) / eta + 1e-9
    return checks


# ---------------------------------------------------------------------------
# Replica execution


def run_replica(config: RunConfig, k: int = 0) -> ReplicaResult:
    seed = _replica_seed(config.seed, k)
    if isinstance(config.rule, ScoringRule):
        rule = config.rule
        env = _environment(config, rule)
        n = env.n_experts
    else:
        probe = builtin(config.rule, 0.25)  # gaps and rationality do not depend on eta
        env = _environment(config, probe)
        n = env.n_experts
        rule = build_rule(config, n)
        if config.environment in ("sym-lb", "asym-lb", "nonmono-lb"):
            env = _environment(config, rule)
    eta = rule.eta if rule.eta is not None else config.eta
    alg = AlgorithmConfig(rule, config.mode, config.theta, config.tie_break, config.sample)
    panel = PolicyPanel.build(config.policy, n, rule)
    env.reset(config.horizon, seed)
    if env.oblivious and not config.sample and not config.keep_records:
        result = _run_vectorized(config, env, alg, panel, n, eta, seed)
    else:
        result = _run_stepwise(config, env, alg, panel, n, eta, seed)
    return result


def _run_stepwise(config, env, alg, panel, n, eta, seed) -> ReplicaResult:
    T = config.horizon
    state = ExpertState.initial(n)
    oracle = None if alg.randomized else DecisionOracle(alg, panel.reports)
    rng = np.random.default_rng(seed) if alg.sample else None
    q_arr = np.empty(T)
    r_arr = np.empty(T, dtype=np.int64)
    loss_arr = np.empty(T)
    logphi_arr = np.empty(T)
    best_true = np.empty(T)
    best_rep = np.empty(T)
    records = [] if config.keep_records else None
    violations = []
    prev = None
    for t in range(1, T + 1):
        step = env.propose(t, state, oracle)
        reports = panel.reports(step.beliefs_for(0))
        if step.beliefs_if_one is not None:
            other = panel.reports(step.beliefs_if_one)
            if np.max(np.abs(other - reports)) > 1e-4:
                raise ValueError(f"round {t}: {env.name} beliefs do not pin down the reports")
        state.reports = reports
        if alg.randomized:
            mean = weighted_mean(state.log_weights, reports)
            q = theta_clamp(mean, alg.theta)
            if rng is not None:
                q = float(rng.random() < q)
            threshold_r = 0 if mean > 0.5 else 1
        else:
            one, zero = weighted_masses(state.log_weights, reports)
            q = float(one > zero or (one == zero and alg.tie_break == "choose_one"))
            threshold_r = 1 - int(q)
        r = threshold_r if step.adaptive else int(step.realization)
        state.beliefs = np.asarray(step.beliefs_for(r), dtype=float)
        true_inc = np.abs(state.beliefs - r)
        rep_inc = np.abs(reports - r)
        update_weights(alg.rule, state, r)
        logphi = log_potential(state)
        alg_loss = abs(q - r)
        i = t - 1
        q_arr[i], r_arr[i], loss_arr[i], logphi_arr[i] = q, r, alg_loss, logphi
        best_true[i] = state.true_loss.min()
        best_rep[i] = state.reported_loss.min()
        if config.audit or records is not None:
            rec = RoundRecord(t, reports.copy(), state.beliefs.copy(), q, r, alg_loss,
                              math.exp(logphi), logphi, true_inc, rep_inc,
                              state.log_weights.copy(), state.reported_loss.copy())
            if config.audit:
                found = invariant_audit(prev, rec, config, eta, n)
                if found:
                    if config.fail_fast:
                        raise AuditViolation(t, found)
                    log.warning("round %d: %s", t, "; ".join(found))
                    violations.append((t, found))
            if records is not None:
                records.append(rec)
            prev = rec
    report = _replica_report(config, eta, n, loss_arr, state)
    return ReplicaResult(seed, q_arr, r_arr, loss_arr, logphi_arr, best_true, best_rep,
                         state, report, violations, records)


def _run_vectorized(config, env, alg, panel, n, eta, seed) -> ReplicaResult:
    beliefs, r = env.path()
    T = config.horizon
    beliefs = beliefs[:T]
    r = np.asarray(r[:T], dtype=np.int64)
    reports = panel.reports(beliefs)
    factors = np.asarray(alg.rule.score(reports, r[:, None]), dtype=float)
    if np.any(factors <= 0.0) or not np.all(np.isfinite(factors)):
        raise ValueError(f"rule {alg.rule.name} produced a non-positive update factor")
    after = np.cumsum(np.log(factors), axis=0)
    before = np.vstack([np.zeros((1, n)), after[:-1]])
    w = np.exp(before - before.max(axis=1, keepdims=True))
    if alg.randomized:
        mean = np.sum(w * reports, axis=1) / np.sum(w, axis=1)
        q = np.where(mean <= alg.theta, 0.0, np.where(mean <= 1.0 - alg.theta, mean, 1.0))
    else:
        one = np.sum(w * reports, axis=1)
        zero = np.sum(w * (1.0 - reports), axis=1)
        tie = 1.0 if alg.tie_break == "choose_one" else 0.0
        q = np.where(one > zero, 1.0, np.where(one < zero, 0.0, tie))
    loss = np.abs(q - r)
    true_inc = np.abs(beliefs - r[:, None])
    rep_inc = np.abs(reports - r[:, None])
    cum_true = np.cumsum(true_inc, axis=0)
    cum_rep = np.cumsum(rep_inc, axis=0)
    logphi = logsumexp_rows(after)
    violations = []
    if config.audit:
        violations = _audit_vectorized(config, eta, n, loss, logphi, after, cum_rep,
                                       true_inc, rep_inc)
        if violations and config.fail_fast:
            raise AuditViolation(*violations[0])
    final = ExpertState(after[-1].copy(), beliefs[-1].copy(), reports[-1].copy(),
                        cum_true[-1].copy(), cum_rep[-1].copy())
    report = _replica_report(config, eta, n, loss, final)
    return ReplicaResult(seed, q, r, loss, logphi, cum_true.min(axis=1), cum_rep.min(axis=1),
                         final, report, violations, None)


def _audit_vectorized(config, eta, n, loss, logphi, log_weights, cum_rep, true_inc, rep_inc):
    slack = math.log1p(REL_SLACK)
    prev = np.concatenate(([math.log(n)], logphi[:-1]))
    bad = {}

    def flag(mask, message):
        for t in np.flatnonzero(mask)[:1]:
            bad.setdefault(int(t) + 1, []).append(message)

    audits = config.audit
    if "potential_drop" in audits:
        coef = _drop_coefficient(config, eta)
        if coef is not None:
            eff = loss if config.mode == THETA_RWM else (loss >= 1.0).astype(float)
            bound = prev + np.log1p(-coef * eff)
            flag((eff > 0) & (logphi > bound + slack), "potential_drop")
    if ("weight_floor" in audits and config.rule_key in _FLOOR_RULES
            and config.family_scale == 1.0):
        floor = cum_rep * math.log1p(-eta)
        flag(np.any(log_weights < floor - REL_SLACK * np.maximum(1.0, np.abs(floor)), axis=1),
             "weight_floor")
    if "monotone" in audits:
        flag((loss < 0) | (loss > 1), "monotone: alg_loss outside [0, 1]")
        flag(np.any((true_inc < 0) | (true_inc > 1) | (rep_inc < 0) | (rep_inc > 1), axis=1),
             "monotone: loss increment outside [0, 1]")
        if config.family_scale == 1.0 and config.rule_key in _FLOOR_RULES:
            flag(logphi > prev + slack, "monotone: potential increased")
    return sorted(bad.items())


def _replica_report(config, eta, n, loss, state: ExpertState) -> RegretReport:
    M = float(np.sum(loss))
    m_true = state.true_loss.copy()
    m_rep = state.reported_loss.copy()
    return RegretReport(M, m_true, m_rep, ratio(M, float(m_true.min())),
                        ratio(M, float(m_rep.min())), _bound_checks(config, eta, n, M, m_rep))


def _aggregate(reports: list) -> RegretReport:
    if len(reports) == 1:
        return reports[0]
    checks = {}
    for rep in reports:
        for key, ok in rep.bound_checks.items():
            checks[key] = checks.get(key, True) and ok
    return RegretReport(
        float(np.mean([r.M_T for r in reports])),
        np.mean([r.m_true for r in reports], axis=0),
        np.mean([r.m_reported for r in reports], axis=0),
        float(np.mean([r.ratio_true for r in reports])),
        float(np.mean([r.ratio_reported for r in reports])),
        checks,
        list(reports),
    )


def run(config: RunConfig, jobs: int = 1) -> RunResult:
    """Execute every replica of ``config``; replicas are independent."""
    if jobs > 1 and config.replicas > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            replicas = list(pool.map(run_replica, [config] * config.replicas,
                                     range(config.replicas)))
    else:
        replicas = [run_replica(config, k) for k in range(config.replicas)]
    return RunResult(config, replicas, _aggregate([rep.report for rep in replicas]))


def randomized_floor_check(result: RunResult, delta: float = 0.05) -> tuple[float, bool]:
    """Final true-loss ratio of a randomized run and whether it exceeds 1 + delta.

    A ratio is only meaningful when the best expert has positive loss; an
    infinite or undefined ratio is returned as is and reported as failing.
    """
    value = result.report.ratio_true
    ok = math.isfinite(value) and value >= 1.0 + delta
    return value, ok

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfish_experts.scoring import (
    GapReport,
    NotSymmetricError,
    ScoringRule,
    asymmetry_params,
    beta_rule,
    beta_score,
    brier_score,
    builtin,
    family_member,
    gap_semi_symmetric,
    gap_symmetric,
    is_symmetric,
    normalize,
    properness_check,
    rationality,
    rationality_many,
    rule_from_id,
    spherical_score,
    theoretical_lower_bound,
)

IC_RULES = ["quadratic", "spherical", "brier"] + [f"beta:{a}" for a in (0.1, 0.3, 0.5, 0.7, 0.9)]
ALL_RULES = ["standard", "hedge"] + IC_RULES

probs = st.floats(0.0, 1.0, allow_nan=False)
etas = st.floats(1e-4, 0.49)


def _partial_loss(alpha, p):
    # substituting u = c**alpha removes the endpoint singularity of c**(alpha - 1)
    mpmath.mp.dps = 30
    a = mpmath.mpf(alpha)
    lo = mpmath.mpf(p) ** a
    return mpmath.quad(lambda u: (1 - u ** (1 / a)) ** a, [lo, 1]) / a


def beta_loss_oracle(alpha, p):
    return float(_partial_loss(alpha, p))


def beta_gap_oracle(alpha):
    """Gap of the normalized Beta rule from quadrature of its weight function."""
    return float(mpmath.mpf(1) / 2 - _partial_loss(alpha, mpmath.mpf(1) / 2) / _partial_loss(alpha, 0))


class TestBuiltins:
    def test_standard_values(self):
        rule = builtin("standard", 0.1)
        assert rule.score(0.3, 1) == pytest.approx(1 - 0.1 * 0.7)
        assert rule.score(0.3, 0) == pytest.approx(1 - 0.1 * 0.3)

    def test_hedge_values(self):
        rule = builtin("hedge", 0.2)
        assert rule.score(0.25, 1) == pytest.approx(math.exp(-0.2 * 0.75))

    def test_aliases(self):
        assert builtin("standard_absolute", 0.1).score(0.2, 1) == builtin("standard", 0.1).score(0.2, 1)
        assert builtin("brier_update", 0.1).score(0.2, 1) == builtin("brier", 0.1).score(0.2, 1)
        assert builtin("beta(0.5)", 0.1).score(0.2, 1) == builtin("beta:0.5", 0.1).score(0.2, 1)

    @pytest.mark.parametrize("name", ["nope", "beta:0", "beta:1.5", "beta:x"])
    def test_unknown(self, name):
        with pytest.raises(ValueError):
            builtin(name, 0.1)

    @pytest.mark.parametrize("eta", [0.0, 0.5, -0.1, 0.7])
    def test_eta_range(self, eta):
        with pytest.raises(ValueError):
            builtin("spherical", eta)

    def test_rule_from_id(self):
        assert rule_from_id("spherical", 0.1).name == builtin("spherical", 0.1).name

    def test_vectorized(self):
        rule = builtin("spherical", 0.1)
        p = np.linspace(0, 1, 11)
        out = rule.score(p, 1)
        assert out.shape == (11,)
        assert out[3] == pytest.approx(rule.score(0.3, 1))

    @pytest.mark.parametrize("name", ALL_RULES)
    @given(p=probs, eta=etas)
    @settings(max_examples=30, deadline=None)
    def test_factor_range(self, name, p, eta):
        # every built-in factor lies in [1 - eta, 1] (hedge: [exp(-eta), 1])
        rule = builtin(name, eta)
        for r in (0, 1):
            v = rule.score(p, r)
            assert 1 - eta - 1e-12 <= v <= 1 + 1e-12

    def test_brier_matches_quadratic(self):
        b, q = builtin("brier", 0.3), builtin("quadratic", 0.3)
        p = np.linspace(0, 1, 101)
        for r in (0, 1):
            np.testing.assert_allclose(b.score(p, r), q.score(p, r), atol=1e-14)


class TestBetaFamily:
    @pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.7, 0.9, 1.0])
    def test_partial_loss_against_quadrature(self, alpha):
        raw = beta_score(alpha)
        for p in (0.0, 0.1, 0.37, 0.5, 0.8, 1.0):
            assert -raw.score(p, 1) == pytest.approx(beta_loss_oracle(alpha, p), abs=1e-10)

    @pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
    @given(p=probs)
    @settings(max_examples=25, deadline=None)
    def test_symmetric(self, alpha, p):
        raw = beta_score(alpha)
        assert raw.score(p, 0) == pytest.approx(raw.score(1 - p, 1), abs=1e-12)

    @pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.7, 0.9])
    def test_gap_against_quadrature(self, alpha):
        assert gap_symmetric(normalize(beta_rule(alpha))) == pytest.approx(beta_gap_oracle(alpha), abs=1e-9)

    def test_alpha_half_is_one_over_pi(self):
        assert gap_symmetric(normalize(beta_rule(0.5))) == pytest.approx(1 / math.pi, abs=1e-10)

    def test_alpha_one_is_brier_gap(self):
        assert gap_symmetric(normalize(beta_rule(1.0))) == pytest.approx(0.25, abs=1e-12)


class TestNormalization:
    @pytest.mark.parametrize("name", IC_RULES)
    def test_corners(self, name):
        corners = normalize(builtin(name, 0.2)).corners()
        assert min(corners.values()) == pytest.approx(0.0, abs=1e-12)
        assert max(corners.values()) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("name", ["spherical", "brier", "beta:0.3"])
    @given(eta=etas, eta2=etas)
    @settings(max_examples=10, deadline=None)
    def test_eta_invariance(self, name, eta, eta2):
        n1, n2 = normalize(builtin(name, eta)), normalize(builtin(name, eta2))
        p = np.linspace(0, 1, 21)
        np.testing.assert_allclose(n1.score(p, 1), n2.score(p, 1), atol=1e-9)

    def test_family_member_roundtrip(self):
        norm = normalize(spherical_score())
        member = family_member(norm, 1.0, 0.2)
        p = np.linspace(0, 1, 11)
        np.testing.assert_allclose(member.score(p, 1), 1 + 0.2 * (norm.score(p, 1) - 1))

    def test_family_member_eta_range(self):
        with pytest.raises(ValueError):
            family_member(normalize(spherical_score()), 1.0, 1.0)


class TestGaps:
    def test_spherical_closed_form(self):
        assert gap_symmetric(normalize(builtin("spherical", 0.1))) == pytest.approx(
            (math.sqrt(2) - 1) / 2, abs=1e-12)

    def test_brier_exact(self):
        assert gap_symmetric(normalize(builtin("brier", 0.1))) == 0.25
        assert gap_symmetric(normalize(brier_score())) == 0.25

    def test_semi_symmetric_equals_symmetric_for_symmetric_rules(self):
        norm = normalize(builtin("spherical", 0.1))
        assert gap_semi_symmetric(norm) == pytest.approx(gap_symmetric(norm), abs=1e-12)

    @pytest.mark.parametrize("name", IC_RULES)
    def test_symmetric_asymmetry_params(self, name):
        assert asymmetry_params(normalize(builtin(name, 0.1))) == (1.0, 0.0)

    def test_asymmetric_rule(self):
        def tilted(p, r):
            p = np.asarray(p, float)
            return np.where(np.asarray(r) == 1, -((1 - p) - (1 - p ** 3) / 3), -(p ** 2 / 2 + p ** 3 / 3))

        norm = normalize(ScoringRule("tilted", tilted, None, True))
        assert not is_symmetric(norm)
        c, d = asymmetry_params(norm)
        assert c == pytest.approx(0.8)
        assert d == 0.0
        with pytest.raises(NotSymmetricError):
            gap_symmetric(norm)
        report = theoretical_lower_bound(norm)
        assert report.lower_bound_rounded == pytest.approx(2.125)
        assert report.gamma is None


class TestLowerBound:
    @pytest.mark.parametrize("name,rounded,unrounded", [
        ("beta:0.1", 2 + 1 / 3, 2.44158),
        ("beta:0.3", 2 + 1 / 3, 2.36594),
        ("beta:0.5", 2.25, 2.31831),
        ("beta:0.7", 2.25, 2.28505),
        ("beta:0.9", 2.25, 2.26024),
        ("brier", 2.25, 2.25),
        ("spherical", 2.2, 2.20711),
    ])
    def test_values(self, name, rounded, unrounded):
        report = theoretical_lower_bound(normalize(builtin(name, 0.1)))
        assert report.lower_bound_rounded == pytest.approx(rounded, abs=1e-12)
        assert report.lower_bound_unrounded == pytest.approx(unrounded, abs=1e-5)

    def test_improper_rejected(self):
        with pytest.raises(ValueError):
            theoretical_lower_bound(normalize(builtin("standard", 0.1)))

    def test_report_serialization(self):
        d = theoretical_lower_bound(normalize(builtin("spherical", 0.1))).to_dict()
        assert set(d) == {"gamma", "mu", "c", "d", "lb_rounded", "lb_unrounded"}
        assert isinstance(GapReport(**{"gamma": 0.1, "mu": 0.1, "c": 1.0, "d": 0.0, "symmetric": True,
                                       "semi_symmetric": True, "lower_bound_rounded": 2.1,
                                       "lower_bound_unrounded": 2.1}).to_json(), str)


class TestProperness:
    @pytest.mark.parametrize("name", IC_RULES)
    def test_proper(self, name):
        result = properness_check(builtin(name, 0.1))
        assert result.proper and bool(result)
        assert result.witness is None

    @pytest.mark.parametrize("name", ["standard", "hedge"])
    def test_improper_witness(self, name):
        result = properness_check(builtin(name, 0.1))
        assert not result.proper
        assert result.witness == pytest.approx((0.49, 0.0))

    def test_grid_range(self):
        with pytest.raises(ValueError):
            properness_check(builtin("spherical", 0.1), grid_step=0.1)

    @pytest.mark.parametrize("name", ["spherical", "brier", "beta:0.5"])
    @given(b=probs, p=probs)
    @settings(max_examples=40, deadline=None)
    def test_truthful_report_maximizes(self, name, b, p):
        rule = builtin(name, 0.2)
        expected = lambda q: b * rule.score(q, 1) + (1 - b) * rule.score(q, 0)
        assert expected(b) >= expected(p) - 1e-12


class TestRationality:
    def test_standard_threshold(self):
        rule = builtin("standard", 0.1)
        assert rationality(rule, 0.49) == 0.0
        assert rationality(rule, 0.73) == 1.0

    def test_spherical_identity(self):
        assert rationality(builtin("spherical", 0.1), 0.3) == pytest.approx(0.3, abs=1e-4)

    @pytest.mark.parametrize("name", ["quadratic", "spherical", "beta:0.7"])
    def test_identity_on_grid(self, name):
        b = np.linspace(0, 1, 41)
        np.testing.assert_allclose(rationality_many(builtin(name, 0.1), b), b, atol=1e-4)

    @given(b=probs)
    @settings(max_examples=30, deadline=None)
    def test_hedge_is_threshold(self, b):
        out = rationality(builtin("hedge", 0.1), b)
        if abs(b - 0.5) > 1e-9:
            assert out == (1.0 if b > 0.5 else 0.0)

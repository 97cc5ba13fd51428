"""Ownership verification: threshold route, paired-t route, sign test."""

import math

import numpy as np
import pytest
import scipy.stats as sps

from certmark import (
    InfeasibleThresholdError,
    InsufficientSamplesError,
    InvalidArgumentError,
    closed_form_threshold,
    decide_ownership,
    hoeffding_upper,
    sign_test_tpr,
    verify_models,
    watermark_robustness,
)


def _root_oracle(m, n, zeta, alpha):
    """Upper root of the defining quadratic, via numpy on scipy's t quantile."""
    t2 = sps.t.ppf(1.0 - alpha, n - 1) ** 2
    mn = m * n
    coeffs = [mn + t2, -(2 * mn * zeta + t2), mn * zeta**2 - t2 * zeta + t2 * zeta**2]
    roots = np.roots(coeffs)
    return float(np.max(roots.real))


class TestClosedFormThreshold:
    def test_matches_quadratic_root_oracle(self):
        cases = [
            (100, 100, 0.125, 0.05),
            (40, 16, 0.3, 0.05),
            (24, 8, 0.05, 0.01),
            (500, 32, 0.6, 0.1),
            (12, 4, 0.45, 0.2),
        ]
        for m, n, zeta, alpha in cases:
            tau = closed_form_threshold(m, n, zeta, alpha)
            assert tau == pytest.approx(_root_oracle(m, n, zeta, alpha), rel=1e-10)

    def test_alpha_half_collapses_to_zeta(self):
        # the t critical value is exactly zero, so the margin vanishes
        for zeta in (0.01, 0.3, 0.7, 0.99):
            assert closed_form_threshold(50, 10, zeta, 0.5) == zeta

    def test_threshold_exceeds_zeta(self):
        for alpha in (0.2, 0.05, 0.01):
            assert closed_form_threshold(40, 16, 0.25, alpha) > 0.25

    def test_monotone_in_zeta(self):
        taus = [closed_form_threshold(40, 16, z, 0.05) for z in np.linspace(0.05, 0.9, 9)]
        assert all(a < b for a, b in zip(taus, taus[1:]))

    def test_more_draws_tighten_threshold(self):
        taus = [closed_form_threshold(m, 16, 0.25, 0.05) for m in (10, 40, 160, 640)]
        assert all(a > b for a, b in zip(taus, taus[1:]))
        assert taus[-1] == pytest.approx(0.25, abs=0.02)

    def test_stricter_alpha_raises_threshold(self):
        taus = [closed_form_threshold(40, 16, 0.25, a) for a in (0.2, 0.05, 0.01)]
        assert all(a < b for a, b in zip(taus, taus[1:]))

    def test_infeasible_regime_raises(self):
        # one heavy-tailed dof: t(0.999, 1) ~ 318, so t^2 zeta dwarfs MN(1-zeta)
        with pytest.raises(InfeasibleThresholdError):
            closed_form_threshold(1, 2, 0.5, 0.001)

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            closed_form_threshold(0, 16, 0.25, 0.05)
        with pytest.raises(InvalidArgumentError):
            closed_form_threshold(40, 1, 0.25, 0.05)
        for z in (0.0, 1.0, -0.2):
            with pytest.raises(InvalidArgumentError):
                closed_form_threshold(40, 16, z, 0.05)
        for a in (0.0, 1.0):
            with pytest.raises(InvalidArgumentError):
                closed_form_threshold(40, 16, 0.25, a)


class TestDecideOwnership:
    def test_identical_rates_never_reject(self):
        rates = [0.2, 0.4, 0.1, 0.3, 0.25, 0.0, 1.0, 0.5]
        report = decide_ownership(rates, rates, m_draws=20)
        assert report.t_statistic == -math.inf
        assert not report.t_reject
        assert report.decision == "not-watermarked"

    def test_separated_rates_reject_on_both_routes(self):
        wr = [1.0] * 12
        rp = [0.0] * 12
        report = decide_ownership(wr, rp, m_draws=40, alpha=0.05)
        assert report.threshold_reject
        assert report.t_statistic == math.inf
        assert report.t_reject
        assert report.routes_agree
        assert report.decision == "watermarked"

    def test_default_zeta_is_hoeffding_bound(self):
        wr = [0.9] * 10
        rp = [0.0, 0.1] * 5
        report = decide_ownership(wr, rp, m_draws=30, alpha=0.05)
        expect = hoeffding_upper(float(np.mean(rp)), 10, 0.05).bound
        assert report.zeta == pytest.approx(expect, rel=1e-12)

    def test_explicit_zeta_is_used_verbatim(self):
        wr = [0.9] * 10
        rp = [0.05] * 10
        report = decide_ownership(wr, rp, m_draws=30, zeta=0.5)
        assert report.zeta == 0.5
        assert report.threshold == pytest.approx(
            closed_form_threshold(30, 10, 0.5, 0.05), rel=1e-12
        )

    def test_saturated_reference_disables_threshold_route(self):
        # hoeffding bound caps at 1, so no threshold below 1 exists
        wr = [1.0] * 8
        rp = [1.0] * 7 + [0.9]
        report = decide_ownership(wr, rp, m_draws=20)
        assert not report.threshold_feasible
        assert report.threshold == 1.0
        assert not report.threshold_reject
        assert report.decision == "not-watermarked"

    def test_small_consistent_gap_splits_the_routes(self):
        # zero-variance positive gap: the t route is certain, but the
        # threshold route cannot clear the hoeffding-inflated zeta
        wr = [0.12] * 16
        rp = [0.10] * 16
        report = decide_ownership(wr, rp, m_draws=25)
        assert report.t_reject
        assert not report.threshold_reject
        assert not report.routes_agree
        assert report.decision == "not-watermarked"

    def test_report_round_trip_dict(self):
        report = decide_ownership([0.8] * 6, [0.1] * 6, m_draws=10)
        d = report.to_dict()
        assert d["decision"] == report.decision
        assert d["per_sample_wr"] == [0.8] * 6
        assert set(d) == {
            "wr", "rp", "per_sample_wr", "per_sample_rp", "m_draws", "n_samples",
            "alpha", "zeta", "threshold", "threshold_feasible", "threshold_reject",
            "t_statistic", "t_critical", "t_reject", "routes_agree", "decision",
        }

    def test_validation(self):
        with pytest.raises(InsufficientSamplesError):
            decide_ownership([0.5], [0.5], m_draws=10)
        with pytest.raises(InvalidArgumentError):
            decide_ownership([0.5, 0.5], [0.5], m_draws=10)
        with pytest.raises(InvalidArgumentError):
            decide_ownership([0.5, 1.5], [0.5, 0.5], m_draws=10)
        with pytest.raises(InvalidArgumentError):
            decide_ownership([0.5, 0.5], [0.5, -0.1], m_draws=10)
        with pytest.raises(InvalidArgumentError):
            decide_ownership([0.5, 0.5], [0.5, 0.5], m_draws=0)
        with pytest.raises(InvalidArgumentError):
            decide_ownership([0.5, 0.5], [0.5, 0.5], m_draws=10, alpha=1.0)


class TestVerifyModels:
    def test_self_verification_pairs_exactly(self, world):
        report = verify_models(
            world.gen, world.gen, world.clf, world.spec, world.prompt,
            m_draws=4, n_samples=4, seed=301,
        )
        assert report.per_sample_wr == report.per_sample_rp
        assert report.wr == report.rp
        assert report.t_statistic == -math.inf
        assert report.decision == "not-watermarked"

    def test_embedded_model_is_detected(self, world, embedded):
        report = verify_models(
            embedded.gen_w, world.gen, world.clf, world.spec, world.prompt,
            m_draws=12, n_samples=8, seed=302,
        )
        assert report.wr > report.rp
        assert report.decision == "watermarked"
        assert report.routes_agree

    def test_per_sample_rates_live_on_the_draw_grid(self, world):
        _, per_sample = watermark_robustness(
            world.gen, world.clf, world.spec, world.prompt,
            m_draws=5, n_samples=3, seed=303,
        )
        assert per_sample.shape == (3,)
        for v in per_sample:
            assert round(v * 5) == pytest.approx(v * 5, abs=1e-12)

    def test_draw_count_validation(self, world):
        with pytest.raises(InvalidArgumentError):
            watermark_robustness(
                world.gen, world.clf, world.spec, world.prompt,
                m_draws=0, n_samples=3, seed=1,
            )


class TestSignTest:
    def test_unanimous_wins_detected(self):
        n_trials = 25
        cw = [[1.0] * n_trials for _ in range(6)]
        cc = [[0.0] * n_trials for _ in range(6)]
        assert sign_test_tpr(cw, cc, fpr_cap=1e-6) == 1.0

    def test_all_ties_never_detected(self):
        cw = [[0.5] * 30 for _ in range(4)]
        assert sign_test_tpr(cw, cw, fpr_cap=1e-6) == 0.0

    def test_balanced_wins_not_detected(self):
        g = np.random.default_rng(7)
        cw = [list(g.uniform(size=40)) for _ in range(8)]
        cc = [list(g.uniform(size=40)) for _ in range(8)]
        assert sign_test_tpr(cw, cc, fpr_cap=1e-6) == 0.0

    def test_threshold_sensitivity_to_trial_count(self):
        # 0.5^19 > 1e-6 > 0.5^20: one extra unanimous win flips detection
        make = lambda n: ([[1.0] * n], [[0.0] * n])
        assert sign_test_tpr(*make(19), fpr_cap=1e-6) == 0.0
        assert sign_test_tpr(*make(20), fpr_cap=1e-6) == 1.0

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            sign_test_tpr([], [])
        with pytest.raises(InvalidArgumentError):
            sign_test_tpr([[1.0]], [[1.0], [0.5]])
        with pytest.raises(InvalidArgumentError):
            sign_test_tpr([[1.0, 0.5]], [[1.0]])
        with pytest.raises(InvalidArgumentError):
            sign_test_tpr([[1.0]], [[0.5]], fpr_cap=0.0)

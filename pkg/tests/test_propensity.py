"""
Tests for group propensities: known randomization, the logistic mixed model
and its marginal likelihood.
"""

import logging

import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit
from sklearn.linear_model import LogisticRegression

from core.errors import ConfigurationError, ConvergenceError, DomainError
from core.features import FeatureSpec
from core.propensity import (
    QUADRATURE_TOLERANCE, KnownRandomization, LogisticMixedModel, QuadratureRule, fit_logistic_mixed,
    group_propensity, logistic_mixed_loglik, propensity_from_config,
)
from models.cluster_data import ClusterObservation, Dataset, enumerate_assignments
from simulation.scenarios import GlmmScenario


def _intercept_only_model(eta, lam, adaptive=True, order=30):
    """Model whose linear predictor for unit j is eta[j] (x carries eta in column 0)."""
    features = FeatureSpec(own=(0,), peers=())
    model = LogisticMixedModel({1: np.array([0.0, 1.0])}, {1: lam}, features, QuadratureRule(order, adaptive))
    x = np.asarray(eta, dtype=float)[:, None]
    return model, x


def _reference_probability(eta, lam, a):
    def integrand(b):
        mu = expit(np.asarray(eta) + b)
        density = np.sqrt(lam / (2 * np.pi)) * np.exp(-0.5 * lam * b ** 2)
        return np.prod(np.where(np.asarray(a) == 1, mu, 1 - mu)) * density
    value, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
    return value


class TestQuadrature:
    def test_normalized_weights_sum_to_one(self):
        assert np.exp(QuadratureRule(30).log_weights).sum() == pytest.approx(1.0, abs=1e-12)

    def test_order_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            QuadratureRule(0)

    def test_default_rule_is_adaptive(self):
        assert QuadratureRule().adaptive
        assert QuadratureRule().order == 30
        assert LogisticMixedModel({1: np.zeros(2)}, {1: 1.0}).quad.adaptive

    def test_doubled(self):
        rule = QuadratureRule(30, adaptive=False).doubled()
        assert rule.order == 60
        assert not rule.adaptive


class TestKnownRandomization:
    def test_value(self):
        e = KnownRandomization({1: 0.3})
        assert e.value(np.array([1, 0]), np.zeros((2, 1)), 1) == pytest.approx(0.21)

    def test_table_sums_to_one(self):
        e = KnownRandomization({1: 0.3})
        assert e.table(np.zeros((4, 1)), 1).sum() == pytest.approx(1.0, abs=1e-12)

    def test_unit_specific_probabilities(self):
        e = KnownRandomization(lambda j, x, k: 0.2 + 0.5 * x[j, 0])
        x = np.array([[0.0], [1.0]])
        assert e.value(np.array([1, 1]), x, 1) == pytest.approx(0.2 * 0.7)

    def test_degenerate_probability(self):
        with pytest.raises(DomainError):
            KnownRandomization({1: 1.0})

    def test_degenerate_callable(self):
        e = KnownRandomization(lambda j, x, k: 1.2)
        with pytest.raises(DomainError):
            e.value(np.array([1]), np.zeros((1, 1)), 1)

    def test_unknown_type(self):
        e = KnownRandomization({1: 0.5})
        with pytest.raises(ConfigurationError):
            e.value(np.array([1]), np.zeros((1, 1)), 2)

    def test_clipping(self):
        e = KnownRandomization({1: 0.001})
        a = np.array([1, 1])
        x = np.zeros((2, 1))
        assert group_propensity(e, a, x, 1) == pytest.approx(1e-6)
        assert group_propensity(e, a, x, 1, floor=1e-3) == pytest.approx(1e-3)

    def test_clipping_logs_a_warning(self, caplog, monkeypatch):
        monkeypatch.setattr(logging.getLogger('netfx'), 'propagate', True)
        e = KnownRandomization({1: 0.001})
        with caplog.at_level(logging.WARNING, logger='netfx'):
            group_propensity(e, np.array([1, 1]), np.zeros((2, 1)), 1, floor=1e-3)
        warnings = [r for r in caplog.records if r.levelno == logging.WARNING]
        assert len(warnings) == 1
        assert 'clipped' in warnings[0].getMessage()


class TestLogisticMixedModel:
    """Quadrature evaluation of the group propensity."""

    eta = (-0.4, 0.3, 1.1)

    def test_table_sums_to_one(self):
        model, x = _intercept_only_model(self.eta, 4.0)
        assert model.table(x, 1).sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_adaptive_integration(self):
        model, x = _intercept_only_model(self.eta, 4.0)
        for a in enumerate_assignments(3):
            assert model.value(a, x, 1) == pytest.approx(_reference_probability(self.eta, 4.0, a), abs=1e-9)

    def test_plain_rule_agrees_at_moderate_precision(self):
        fixed, x = _intercept_only_model(self.eta, 2.0, adaptive=False)
        adaptive, _ = _intercept_only_model(self.eta, 2.0)
        np.testing.assert_allclose(adaptive.table(x, 1), fixed.table(x, 1), atol=1e-9)

    def test_zero_coefficients_single_unit(self):
        for lam in (1.0, 4.0, 50.0):
            model = LogisticMixedModel({1: np.zeros(2)}, {1: lam}, FeatureSpec(own=(0,), peers=()))
            assert model.value(np.array([1]), np.zeros((1, 1)), 1) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("lam", [0.25, 1.0, 4.0, 25.0])
    @pytest.mark.parametrize("size", [2, 4, 6])
    def test_doubling_the_order_changes_nothing(self, lam, size):
        eta = np.linspace(-1.5, 1.0, size)
        model, x = _intercept_only_model(eta, lam)
        finer, _ = _intercept_only_model(eta, lam, order=60)
        table = model.table(x, 1)
        assert table.sum() == pytest.approx(1.0, abs=1e-8)
        assert np.max(np.abs(table - finer.table(x, 1))) < QUADRATURE_TOLERANCE

    def test_small_precision_large_cluster(self):
        eta = np.linspace(-1.0, 1.0, 12)
        model, x = _intercept_only_model(eta, 0.1)
        for a in (np.ones(12, dtype=int), np.arange(12) % 2, (eta > 0).astype(int)):
            reference = _reference_probability(eta, 0.1, a)
            assert model.value(a, x, 1) == pytest.approx(reference, rel=1e-6)

    def test_all_ones_increases_with_intercept(self, rng):
        x = rng.standard_normal((4, 1))
        features = FeatureSpec(own=(0,), peers=())
        values = []
        for intercept in np.linspace(-3.0, 3.0, 13):
            model = LogisticMixedModel({1: np.array([intercept, 0.7])}, {1: 2.0}, features)
            values.append(model.value(np.ones(4, dtype=int), x, 1))
        assert np.all(np.diff(values) > 0)

    def test_large_precision_is_independent_bernoulli(self):
        model, x = _intercept_only_model(self.eta, 1e10)
        mu = expit(np.array(self.eta))
        for a in enumerate_assignments(3):
            expected = np.prod(np.where(a == 1, mu, 1 - mu))
            assert model.value(a, x, 1) == pytest.approx(expected, abs=1e-8)

    def test_non_positive_precision(self):
        with pytest.raises(DomainError):
            LogisticMixedModel({1: np.zeros(2)}, {1: 0.0})

    def test_missing_type(self):
        model, x = _intercept_only_model(self.eta, 4.0)
        with pytest.raises(ConfigurationError):
            model.value(np.array([0, 0, 1]), x, 2)


class TestLikelihood:
    @pytest.mark.parametrize("adaptive", [True, False])
    @pytest.mark.parametrize("lam", [2.5, 0.2])
    def test_gradient_matches_finite_differences(self, rng, adaptive, lam):
        features = rng.standard_normal((25, 3, 3))
        features[..., 0] = 1.0
        treatments = rng.integers(0, 2, size=(25, 3))
        quad = QuadratureRule(30, adaptive)
        params = np.array([-0.3, 0.8, 0.4, np.log(lam)])
        _, grad = logistic_mixed_loglik(params, features, treatments, quad)
        h = 1e-6
        numeric = np.empty_like(params)
        for i in range(params.size):
            up, down = params.copy(), params.copy()
            up[i] += h
            down[i] -= h
            numeric[i] = (logistic_mixed_loglik(up, features, treatments, quad)[0]
                          - logistic_mixed_loglik(down, features, treatments, quad)[0]) / (2 * h)
        assert np.max(np.abs(numeric - grad)) / np.max(np.abs(grad)) < 1e-5

    def test_value_is_sum_of_log_propensities(self, rng):
        x = rng.standard_normal((4, 3, 1))
        a = rng.integers(0, 2, size=(4, 3))
        features = FeatureSpec()
        model = LogisticMixedModel({1: np.array([0.2, -0.5, 0.1])}, {1: 3.0}, features)
        value, _ = logistic_mixed_loglik(
            np.array([0.2, -0.5, 0.1, np.log(3.0)]), features.propensity_features(x), a, model.quad
        )
        expected = sum(np.log(model.value(a[i], x[i], 1)) for i in range(4))
        assert value == pytest.approx(expected, rel=1e-12)

    def test_adaptive_rule_is_closer_at_small_precision(self):
        eta = np.linspace(-1.0, 1.0, 12)
        treatments = np.stack([np.ones(12, dtype=int), np.arange(12) % 2, (eta > 0).astype(int)])
        features = np.stack([np.column_stack([np.ones(12), eta])] * 3)
        params = np.array([0.0, 1.0, np.log(0.1)])
        reference = sum(np.log(_reference_probability(eta, 0.1, a)) for a in treatments)
        adaptive, _ = logistic_mixed_loglik(params, features, treatments, QuadratureRule(30, adaptive=True))
        plain, _ = logistic_mixed_loglik(params, features, treatments, QuadratureRule(30, adaptive=False))
        assert adaptive == pytest.approx(reference, abs=1e-5)
        assert abs(adaptive - reference) < abs(plain - reference)


def _uncorrelated_design(replicates=3):
    """
    Clusters of three whose treatments are less alike than independent draws:
    every covariate pattern is paired with all eight treatment vectors, the
    two constant vectors once and the others twice.
    """
    clusters = []
    for r in range(replicates):
        for xi, x in enumerate(enumerate_assignments(3)):
            for a in enumerate_assignments(3):
                for copy in range(1 if a.sum() in (0, 3) else 2):
                    cid = f"{r}-{xi}-{''.join(map(str, a))}-{copy}"
                    clusters.append(ClusterObservation(cid, 1, np.zeros(3), a, x[:, None].astype(float)))
    return Dataset.from_clusters(clusters)


class TestFitting:
    """Maximum likelihood fits."""

    def test_recovers_simulated_coefficients(self):
        scenario = GlmmScenario()
        data = scenario.simulate(1500, seed=11)
        type1 = data.subset([i for i, c in enumerate(data.clusters) if c.type_label == 1])
        model = fit_logistic_mixed(type1, features=GlmmScenario.propensity_features())
        info = model.fit_info[1]
        assert info["grad_norm"] <= 1e-8
        se = np.asarray(info["se"])
        assert np.all(np.abs(model.beta[1] - np.asarray(scenario.beta_e[1])) <= 3 * se)
        assert model.quad.adaptive
        assert info["quadrature_error"] <= QUADRATURE_TOLERANCE

    def test_uncorrelated_treatments_fit_independent_logistic(self):
        data = _uncorrelated_design()
        model = fit_logistic_mixed(data)
        features = model.features.propensity_features(np.stack([c.x for c in data.clusters]))
        treatments = np.stack([c.a for c in data.clusters])
        plain = LogisticRegression(penalty=None, fit_intercept=False, max_iter=1000)
        plain.fit(features.reshape(-1, features.shape[-1]), treatments.ravel())
        assignments = enumerate_assignments(3)
        for c in data.clusters[:8]:
            mu = plain.predict_proba(model.features.propensity_features(c.x))[:, 1]
            independent = np.prod(np.where(assignments == 1, mu, 1 - mu), axis=1)
            assert np.max(np.abs(model.table(c.x, 1) - independent)) < 1e-3
        assert model.lam[1] > 1e4

    def test_adaptive_fit_keeps_default_order(self, rng):
        clusters = []
        for i in range(300):
            x = rng.standard_normal((4, 1))
            b = rng.normal(0.0, np.sqrt(2.0))
            a = (rng.random(4) < expit(-0.3 + 0.8 * x[:, 0] + b)).astype(int)
            clusters.append(ClusterObservation(str(i), 1, np.zeros(4), a, x))
        data = Dataset.from_clusters(clusters)
        features = FeatureSpec(own=(0,), peers=())
        model = fit_logistic_mixed(data, features=features)
        assert model.quad == QuadratureRule(30, adaptive=True)
        finer = fit_logistic_mixed(data, quad=QuadratureRule(60), features=features)
        np.testing.assert_allclose(model.beta[1], finer.beta[1], rtol=1e-5, atol=1e-7)
        assert model.lam[1] == pytest.approx(finer.lam[1], rel=1e-5)

    def test_plain_rule_raises_order_at_small_precision(self, rng):
        clusters = []
        for i in range(300):
            x = rng.standard_normal((4, 1))
            b = rng.normal(0.0, np.sqrt(1 / 0.03))
            a = (rng.random(4) < expit(-0.3 + 0.8 * x[:, 0] + b)).astype(int)
            clusters.append(ClusterObservation(str(i), 1, np.zeros(4), a, x))
        data = Dataset.from_clusters(clusters)
        features = FeatureSpec(own=(0,), peers=())
        model = fit_logistic_mixed(data, quad=QuadratureRule(30, adaptive=False), features=features)
        assert model.quad.order > 30
        assert not model.quad.adaptive

    def test_constant_treatments(self, rng):
        clusters = [ClusterObservation(str(i), 1, rng.standard_normal(2), [1, 1], rng.standard_normal((2, 1)))
                    for i in range(20)]
        with pytest.raises(ConvergenceError):
            fit_logistic_mixed(Dataset.from_clusters(clusters))

    def test_perfect_separation(self, rng):
        clusters = []
        for i in range(60):
            x = rng.choice([-0.1, 0.1], size=(2, 1))
            clusters.append(ClusterObservation(str(i), 1, np.zeros(2), (x[:, 0] > 0).astype(int), x))
        with pytest.raises(ConvergenceError):
            fit_logistic_mixed(Dataset.from_clusters(clusters))


class TestFromConfig:
    def test_known_scalar(self, random_data):
        e = propensity_from_config({"kind": "known", "prob": 0.5}, random_data)(random_data)
        assert e.value(np.array([1, 0, 1]), np.zeros((3, 2)), 2) == pytest.approx(0.125)

    def test_known_extra_type(self, random_data):
        with pytest.raises(ConfigurationError):
            propensity_from_config({"kind": "known", "prob": {"1": 0.5, "2": 0.5, "7": 0.5}}, random_data)

    def test_unknown_covariate(self, random_data):
        with pytest.raises(ConfigurationError):
            propensity_from_config({"kind": "logistic_mixed", "own_covariates": ["zz"]}, random_data)

    def test_unknown_kind(self, random_data):
        with pytest.raises(ConfigurationError):
            propensity_from_config({"kind": "probit"}, random_data)

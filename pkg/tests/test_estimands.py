"""
Tests for estimand weight systems.
"""

import numpy as np
import pytest

from core.errors import ConfigurationError, DomainError
from models.cluster_data import enumerate_assignments
from models.estimands import (
    PolicyAllocation, de_spec, estimand_from_config, generic_spec, ie_spec, mean_outcome_spec,
)


@pytest.fixture
def x3():
    return np.zeros((3, 1))


class TestPolicyAllocation:
    def test_broadcast(self):
        alloc = PolicyAllocation.broadcast(0.4, [1, 2], 0.6)
        assert alloc.alpha == {1: 0.4, 2: 0.4}
        assert alloc.alpha_prime == {1: 0.6, 2: 0.6}

    def test_rejects_boundary(self):
        with pytest.raises(DomainError):
            PolicyAllocation(alpha={1: 1.0})

    def test_extra_type(self):
        alloc = PolicyAllocation(alpha={1: 0.5, 3: 0.5})
        with pytest.raises(ConfigurationError) as exc:
            alloc.check_types([1])
        assert "[3]" in str(exc.value)

    def test_missing_type(self):
        with pytest.raises(ConfigurationError):
            PolicyAllocation(alpha={1: 0.5}).check_types([1, 2])


class TestBuiltInWeights:
    """DE, IE and unit-average potential outcome weights."""

    def test_de_of_constant_regression_is_zero(self, x3):
        spec = de_spec(PolicyAllocation({1: 0.3}))
        table = spec.weight_table(1, x3)
        assert np.sum(table * 4.2) == pytest.approx(0.0, abs=1e-14)

    def test_de_is_difference_of_potential_outcomes(self, x3):
        alloc = PolicyAllocation({1: 0.3})
        de = de_spec(alloc).weight_table(1, x3)
        po1 = mean_outcome_spec(alloc, 1).weight_table(1, x3)
        po0 = mean_outcome_spec(alloc, 0).weight_table(1, x3)
        np.testing.assert_allclose(de, po1 - po0, atol=1e-15)

    def test_de_weight_value(self, x3):
        spec = de_spec(PolicyAllocation({1: 0.3}))
        # a = (1, 1, 0): unit 1 treated, peers (1, 0)
        w = spec.w(np.array([1, 1, 0]), x3, 1)
        assert w[0] == pytest.approx(0.3 * 0.7 / 3)
        assert w[2] == pytest.approx(-0.3 * 0.3 / 3)

    def test_ie_equal_policies_is_zero(self, x3):
        spec = ie_spec(PolicyAllocation({1: 0.4}, {1: 0.4}))
        assert np.all(spec.weight_table(1, x3) == 0.0)

    def test_ie_requires_reference_policy(self):
        with pytest.raises(ConfigurationError):
            ie_spec(PolicyAllocation({1: 0.4}))

    def test_ie_only_untreated_units(self, x3):
        spec = ie_spec(PolicyAllocation({1: 0.2}, {1: 0.7}))
        table = spec.weight_table(1, x3)
        assignments = enumerate_assignments(3)
        assert np.all(table[assignments == 1] == 0.0)

    def test_potential_outcome_weights_average_units(self, x3):
        spec = mean_outcome_spec(PolicyAllocation({1: 0.6}), 1)
        # g = 1 everywhere: psi = 1/M sum_j sum_{a_-j} pi = 1
        assert spec.weight_table(1, x3).sum() == pytest.approx(1.0)

    def test_missing_alpha_for_type(self, x3):
        spec = de_spec(PolicyAllocation({1: 0.3}))
        with pytest.raises(ConfigurationError):
            spec.weight_table(2, x3)

    def test_population_weight(self):
        spec = de_spec(PolicyAllocation({1: 0.3}))
        assert spec.population_weight(0.25, 1) == (0.25, 1.0)


class TestGenericSpec:
    """User-supplied weight tables."""

    def test_table_lookup(self):
        table = {
            (1, (0, 0)): lambda x: np.array([0.0, 0.0]),
            (1, (1, 0)): lambda x: np.array([1.0, 0.0]),
            (1, (0, 1)): lambda x: np.array([0.0, 1.0]),
            (1, (1, 1)): lambda x: np.array([0.5, 0.5]),
        }
        spec = generic_spec(table, v=lambda p: p ** 2, v_prime=lambda p: 2 * p)
        weights = spec.weight_table(1, np.zeros((2, 1)))
        assert weights[3].tolist() == [0.5, 0.5]
        assert spec.population_weight(0.5, 1) == (0.25, 1.0)

    def test_undefined_assignment(self):
        spec = generic_spec({(1, (0, 0)): lambda x: np.zeros(2)})
        with pytest.raises(ConfigurationError):
            spec.weight_table(1, np.zeros((2, 1)))

    def test_non_finite_weights(self):
        spec = generic_spec(lambda k, a, x: np.full(a.size, np.nan))
        with pytest.raises(ConfigurationError):
            spec.weight_table(1, np.zeros((2, 1)))

    def test_missing_derivative(self):
        with pytest.raises(ConfigurationError):
            generic_spec(lambda k, a, x: np.zeros(a.size), v_prime=None)

    def test_per_type_population_weights(self):
        spec = generic_spec(lambda k, a, x: np.zeros(a.size), v={1: lambda p: p}, v_prime={1: lambda p: 1.0})
        with pytest.raises(ConfigurationError):
            spec.population_weight(0.5, 2)


class TestFromConfig:
    def test_de(self):
        spec = estimand_from_config({"kind": "DE", "alpha": {"1": 0.5, "2": 0.4}})
        assert spec.name == 'DE'
        assert spec.allocation.alpha == {1: 0.5, 2: 0.4}

    def test_ie(self):
        spec = estimand_from_config({"kind": "ie", "alpha": {"1": 0.5}, "alpha_prime": {"1": 0.2}})
        assert spec.name == 'IE'

    def test_generic(self):
        spec = estimand_from_config({
            "kind": "generic",
            "weights": {"1": {"00": [0, 0], "10": [1, 0], "01": [0, 1], "11": [0.5, 0.5]}},
        })
        assert spec.weight_table(1, np.zeros((2, 1)))[1].tolist() == [1.0, 0.0]

    def test_bad_assignment_key(self):
        with pytest.raises(ConfigurationError):
            estimand_from_config({"kind": "generic", "weights": {"1": {"0x": [0, 0]}}})

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            estimand_from_config({"kind": "ATT", "alpha": {"1": 0.5}})

    def test_alpha_outside_interval(self):
        with pytest.raises(ConfigurationError):
            estimand_from_config({"kind": "DE", "alpha": {"1": 1.2}})

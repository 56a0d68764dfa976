"""
Tests for the data-generating scenarios and the Monte-Carlo harness.

Studies at desk scale are marked slow and deselected by default
(run them with `pytest -m slow`).
"""

import math

import numpy as np
import pytest

from core.errors import ConfigurationError, DomainError, EstimationError
from models.estimands import PolicyAllocation, de_spec, ie_spec
from models.results import MCResult
from simulation.monte_carlo import (
    MC_COLUMNS, MCTarget, NuisancePlan, glmm_plan, kernel_ise, known_design_plan, mc_results_frame, run_mc,
    variance_curve,
)
from simulation.scenarios import (
    GlmmScenario, GlmmSpecification, NoInterferenceScenario, SmoothScenario, build_scenario, make_rng,
    potential_outcome_truth, seb_ate, simulate_glmm, simulate_noint, simulate_smooth, smooth_regression,
    theoretical_de_variance, z_transform,
)


class TestGlmmScenario:
    """Two-type GLMM design and its closed-form truths."""

    def test_truths(self):
        scenario = GlmmScenario()
        assert scenario.de_truth(0.4) == pytest.approx(2.75)
        assert scenario.ie_truth(0.8, 0.2) == pytest.approx(0.9)
        assert scenario.ie_truth(0.3, 0.3) == 0.0
        assert scenario.truth('IE', 0.2, 0.8) == pytest.approx(-0.9)

    def test_unknown_truth(self):
        with pytest.raises(ConfigurationError):
            GlmmScenario().truth('ATT', 0.5)

    def test_reproducible(self):
        first = simulate_glmm(GlmmScenario(), 50, seed=3)
        second = simulate_glmm(GlmmScenario(), 50, seed=3)
        for a, b in zip(first.clusters, second.clusters):
            assert a.type_label == b.type_label
            np.testing.assert_array_equal(a.y, b.y)
            np.testing.assert_array_equal(a.a, b.a)
            np.testing.assert_array_equal(a.x, b.x)

    def test_seeds_differ(self):
        first = simulate_glmm(GlmmScenario(), 50, seed=3)
        second = simulate_glmm(GlmmScenario(), 50, seed=4)
        assert not np.array_equal(first.clusters[0].x, second.clusters[0].x)

    def test_layout(self):
        data = simulate_glmm(GlmmScenario(), 200, seed=1)
        assert data.covariate_names == ('C', 'W1', 'W2')
        assert data.continuous == ('C', 'W2')
        assert {data.types[1].size, data.types[2].size} == {3, 4}
        for cluster in data.clusters[:20]:
            assert np.all(cluster.x[:, 0] == cluster.x[0, 0])
            assert set(np.unique(cluster.x[:, 1])) <= {0.0, 1.0}

    def test_type_frequency(self):
        n = 20000
        data = simulate_glmm(GlmmScenario(), n, seed=8)
        share = data.types[1].count / n
        assert abs(share - 0.75) < 3.5 * math.sqrt(0.75 * 0.25 / n)

    @pytest.mark.parametrize("kind, truth", [('DE', 2.75), ('IE', 0.9)])
    def test_potential_outcome_truth(self, kind, truth):
        scenario = GlmmScenario()
        spec = (de_spec(PolicyAllocation.broadcast(0.4, [1, 2])) if kind == 'DE'
                else ie_spec(PolicyAllocation.broadcast(0.8, [1, 2], 0.2)))
        estimate, mc_se = potential_outcome_truth(scenario, spec, 10000, seed=21)
        assert abs(estimate - truth) < 4 * mc_se

    def test_invalid_sample_size(self):
        with pytest.raises(DomainError):
            simulate_glmm(GlmmScenario(), 0, seed=1)


class TestGlmmSpecification:
    """Correct and misspecified nuisance specifications."""

    def test_parse(self):
        spec = GlmmSpecification.parse('mp, CO, OT')
        assert spec.label == 'CO,MP,OT'

    @pytest.mark.parametrize("text", ['CO,CP', 'CO,MO,CT', 'XX,CP,CT'])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigurationError):
            GlmmSpecification.parse(text)

    def test_misspecified_propensity_uses_transformed_covariates(self):
        features = GlmmSpecification.parse('CO,MP,CT').propensity_features()
        x = np.array([[0.5, 1.0, 2.0], [0.5, 0.0, -1.0]])
        np.testing.assert_allclose(features.prepare(x)[:, 2], np.exp(x[:, 2] / 2))
        assert features.propensity_features(x).shape == (2, 5)

    def test_misspecified_outcome_drops_cluster_covariate(self):
        features = GlmmSpecification.parse('MO,CP,CT').outcome_features()
        names = features.outcome_names(3)
        assert not any('C' == n or n.endswith(':C') for n in names)
        assert features.transform is z_transform

    def test_over_specified_typing(self):
        data = simulate_glmm(GlmmScenario(), 400, seed=2)
        relabelled = GlmmSpecification.parse('CO,CP,OT').prepare(data)
        assert set(relabelled.type_labels) <= {1, 2, 3, 4}
        for cluster in relabelled.clusters:
            size_index = 0 if cluster.size == 3 else 1
            assert cluster.type_label == 2 * size_index + (1 if cluster.x[0, 0] < 1.5 else 2)

    def test_pooled_typing(self):
        assert GlmmSpecification.parse('CO,CP,MT').pool_types
        assert not GlmmSpecification.parse('CO,CP,CT').pool_types


class TestNoInterference:
    def test_variance_formula_at_design_probability(self):
        for p in (0.3, 0.5, 0.7):
            assert theoretical_de_variance(p, p) == pytest.approx(seb_ate(p))

    def test_variance_minimized_at_design_probability(self):
        grid = np.linspace(0.05, 0.95, 19)
        values = [theoretical_de_variance(a, 0.3) for a in grid]
        assert grid[int(np.argmin(values))] == pytest.approx(0.3, abs=0.05)

    def test_variance_value(self):
        expected = 0.5 * (0.01 ** 2 / 0.49 + (0.99 ** 2 + 0.01 ** 2) / 0.21 + 0.99 ** 2 / 0.09)
        assert theoretical_de_variance(0.99, 0.3) == pytest.approx(expected)

    def test_efficiency_bound(self):
        assert seb_ate(0.5) == pytest.approx(2.0)
        assert seb_ate(0.2) == pytest.approx(seb_ate(0.8))

    @pytest.mark.parametrize("alpha, p", [(0.0, 0.5), (0.5, 1.0)])
    def test_domain(self, alpha, p):
        with pytest.raises(DomainError):
            theoretical_de_variance(alpha, p)

    def test_treated_fraction(self):
        n = 5000
        data = simulate_noint(0.3, n, seed=6)
        treated = np.mean(np.concatenate([c.a for c in data.clusters]))
        assert abs(treated - 0.3) < 3.5 * math.sqrt(0.3 * 0.7 / (2 * n))

    def test_truths(self):
        scenario = NoInterferenceScenario()
        assert scenario.truth('DE', 0.2) == 3.0
        assert scenario.truth('IE', 0.2, 0.7) == 0.0


class TestSmoothScenario:
    def test_noise_free_outcomes_follow_regression(self):
        data = simulate_smooth(30, seed=2, eps_var=0.0)
        for cluster in data.clusters:
            np.testing.assert_allclose(cluster.y, smooth_regression(cluster.a, cluster.x), atol=1e-12)

    def test_truths(self):
        scenario = SmoothScenario()
        assert scenario.truth('DE', 0.3) == 1.0
        assert scenario.truth('IE', 0.8, 0.2) == pytest.approx(0.3)


class TestScenarioRegistry:
    def test_build(self):
        assert isinstance(build_scenario('noint', 0.4), NoInterferenceScenario)
        assert build_scenario('noint', 0.4).p_A == 0.4

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            build_scenario('lattice')

    def test_spawned_streams_are_independent(self):
        children = np.random.SeedSequence(5).spawn(2)
        assert make_rng(children[0]).random() != make_rng(children[1]).random()


class TestMCResult:
    def test_summaries(self):
        result = MCResult('s', 'DE(0.5)', 'spec', truth=1.0,
                          estimates=np.array([1.0, 2.0, 3.0]), ses=np.array([0.5, np.nan, 1.5]),
                          covered=np.array([True, False, True]))
        assert result.bias == pytest.approx(1.0)
        assert result.emp_se == pytest.approx(1.0)
        assert result.mean_se == pytest.approx(1.0)
        assert result.coverage == pytest.approx(2 / 3)
        assert list(result.to_row()) == MC_COLUMNS


class TestMonteCarlo:
    """Replicate runner."""

    targets = [MCTarget('DE', 0.5), MCTarget('IE', 0.3, 0.6)]

    def test_single_replicate(self):
        scenario = NoInterferenceScenario()
        results = run_mc(scenario, known_design_plan(0.5), self.targets, reps=1, n=80, seed=4)
        de = results[0]
        assert de.reps == 1
        assert de.bias == pytest.approx(de.estimates[0] - 3.0)
        assert de.coverage in (0.0, 1.0)

    def test_reproducible_across_threads(self):
        scenario = NoInterferenceScenario()
        one = run_mc(scenario, known_design_plan(0.5), self.targets, reps=4, n=60, seed=9, threads=1)
        two = run_mc(scenario, known_design_plan(0.5), self.targets, reps=4, n=60, seed=9, threads=2)
        for a, b in zip(one, two):
            np.testing.assert_array_equal(a.estimates, b.estimates)
            assert a.coverage == b.coverage

    def test_failed_replicates_are_counted(self):
        def failing(_):
            raise EstimationError("no fit")

        plan = NuisancePlan(fit_e=known_design_plan(0.5).fit_e, fit_g=failing, label='broken')
        results = run_mc(NoInterferenceScenario(), plan, self.targets, reps=3, n=20, seed=1)
        assert results[0].failures == 3
        assert results[0].reps == 0
        assert math.isnan(results[0].coverage)

    def test_crossfit_estimator(self):
        results = run_mc(SmoothScenario(), known_design_plan(0.5, outcome='kernel'), self.targets,
                         reps=2, n=100, seed=3, estimator='crossfit')
        assert results[0].reps == 2
        assert results[0].spec == 'known,kernel'

    def test_results_frame(self):
        results = run_mc(NoInterferenceScenario(), known_design_plan(0.5), self.targets, reps=2, n=40, seed=2)
        frame = mc_results_frame(results)
        assert list(frame.columns) == MC_COLUMNS
        assert frame['estimand'].tolist() == ['DE(0.5)', 'IE(0.3,0.6)']

    def test_invalid_arguments(self):
        with pytest.raises(ConfigurationError):
            run_mc(NoInterferenceScenario(), known_design_plan(0.5), self.targets, reps=0, n=10, seed=1)
        with pytest.raises(ConfigurationError):
            run_mc(NoInterferenceScenario(), known_design_plan(0.5), self.targets, reps=1, n=10, seed=1,
                   estimator='tmle')

    def test_variance_curve_columns(self):
        frame = variance_curve(0.5, [0.3, 0.5], reps=3, n=50, seed=1)
        assert frame.columns.tolist() == ['alpha', 'emp_var', 'theory_var', 'mean_se', 'seb_ate', 'reps', 'failures']
        assert frame['theory_var'].iloc[1] == pytest.approx(2.0 / 50)

    def test_kernel_ise_shape(self):
        errors = kernel_ise(n=100, reps=2, seed=1, eval_clusters=20)
        assert errors.shape == (2,)
        assert np.all(errors > 0)


@pytest.mark.slow
class TestDeskScaleStudies:
    """Desk-scale reproductions of the simulation studies."""

    def test_glmm_correct_specification(self):
        targets = [MCTarget('DE', 0.4), MCTarget('IE', 0.8, 0.2)]
        plan = glmm_plan(GlmmSpecification.parse('CO,CP,CT'))
        de, ie = run_mc(GlmmScenario(), plan, targets, reps=300, n=1000, seed=2024, threads=4)
        assert abs(de.bias) < 0.02
        assert abs(ie.bias) < 0.03
        assert 0.90 <= de.coverage <= 0.99
        assert 0.90 <= ie.coverage <= 0.99

    def test_misspecification_ordering(self):
        targets = [MCTarget('IE', 0.2, 0.8)]
        correct = run_mc(GlmmScenario(), glmm_plan(GlmmSpecification.parse('CO,CP,CT')), targets,
                         reps=300, n=1000, seed=77, threads=4)[0]
        wrong = run_mc(GlmmScenario(), glmm_plan(GlmmSpecification.parse('MO,MP,CT')), targets,
                       reps=300, n=1000, seed=77, threads=4)[0]
        assert abs(wrong.bias) > 5 * abs(correct.bias)
        assert wrong.coverage < correct.coverage

    def test_adaptivity_curve(self):
        alphas = np.linspace(0.05, 0.95, 19)
        n = 10000
        frame = variance_curve(0.5, alphas, reps=200, n=n, seed=11, threads=4)
        ratio = frame['emp_var'] / frame['theory_var']
        assert np.all(np.abs(ratio - 1.0) < 0.15)
        best = frame['alpha'].iloc[int(np.argmin(frame['emp_var']))]
        assert abs(best - 0.5) <= 0.05 + 1e-9
        at_design = frame.loc[np.isclose(frame['alpha'], 0.5), 'emp_var'].iloc[0]
        assert at_design == pytest.approx(seb_ate(0.5) / n, rel=0.15)

    def test_kernel_ise_decreases(self):
        small = kernel_ise(n=1000, reps=20, seed=5)
        large = kernel_ise(n=4000, reps=20, seed=6)
        se = math.sqrt(small.var(ddof=1) / small.size + large.var(ddof=1) / large.size)
        assert large.mean() + 3 * se < small.mean()

    def test_kernel_crossfit_coverage(self):
        targets = [MCTarget('DE', 0.5)]
        plan = known_design_plan(0.5, outcome='kernel')
        de = run_mc(SmoothScenario(), plan, targets, reps=200, n=500, seed=31, estimator='crossfit', threads=4)[0]
        assert 0.90 <= de.coverage <= 0.99

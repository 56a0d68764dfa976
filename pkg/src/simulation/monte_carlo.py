"""
Monte Carlo

Replicate runner for the simulation studies: per-replicate seeds spawned from
a master SeedSequence, failed replicates recorded and excluded, summaries
aggregated with compensated sums so they do not depend on scheduling.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from core.errors import ConfigurationError, NetfxError
from core.estimators import PrefitNuisances, cross_fit_split, estimate_with_nuisances, fit_fold_nuisances
from core.logging_setup import log_event
from core.outcome import KernelOptions, LinearMixedFitOptions, OutcomeModel, fit_linear_mixed, fit_nw
from core.propensity import KnownRandomization, PropensityFitOptions, PropensityModel, QuadratureRule, fit_logistic_mixed
from models.cluster_data import Dataset
from models.estimands import EstimandSpec, PolicyAllocation, de_spec, ie_spec
from models.results import MCResult
from .scenarios import (
    GlmmSpecification, SmoothScenario, make_rng, seb_ate, simulate_noint, smooth_regression,
    theoretical_de_variance,
)

logger = logging.getLogger('netfx.' + __name__)

MC_COLUMNS = ['scenario', 'estimand', 'spec', 'bias', 'emp_se', 'mean_se', 'coverage', 'reps', 'failures']


@dataclass(frozen=True)
class MCTarget:
    """
    One estimand tracked by a study.

    Attributes:
        kind: 'DE' or 'IE'
        alpha: target policy
        alpha_prime: reference policy (IE)
    """
    kind: str
    alpha: float
    alpha_prime: Optional[float] = None

    @property
    def label(self) -> str:
        if self.kind == 'IE':
            return f"IE({self.alpha:g},{self.alpha_prime:g})"
        return f"DE({self.alpha:g})"

    def spec_for(self, types: Sequence[int]) -> EstimandSpec:
        alloc = PolicyAllocation.broadcast(self.alpha, types, self.alpha_prime)
        if self.kind == 'DE':
            return de_spec(alloc)
        if self.kind == 'IE':
            return ie_spec(alloc)
        raise ConfigurationError(f"unknown study estimand '{self.kind}'")


@dataclass(frozen=True)
class NuisancePlan:
    """
    How a study fits its nuisances.

    Attributes:
        fit_e: Dataset -> PropensityModel
        fit_g: Dataset -> OutcomeModel
        prepare: maps each simulated dataset before estimation (e.g. retyping)
        pool_types: one pooled stratum in the estimator
        label: specification label used in outputs
    """
    fit_e: Callable[[Dataset], PropensityModel]
    fit_g: Callable[[Dataset], OutcomeModel]
    prepare: Callable[[Dataset], Dataset] = lambda data: data
    pool_types: bool = False
    label: str = 'default'


def glmm_plan(spec: GlmmSpecification, quad_nodes: int = 30) -> NuisancePlan:
    """Logistic mixed propensity and linear mixed outcome under a GLMM specification."""
    quad = QuadratureRule(order=quad_nodes)
    opts = PropensityFitOptions(quad_nodes=quad_nodes)
    e_features = spec.propensity_features()
    g_features = spec.outcome_features()
    pool = spec.pool_types
    return NuisancePlan(
        fit_e=lambda data: fit_logistic_mixed(data, quad, opts, e_features, pool_types=pool),
        fit_g=lambda data: fit_linear_mixed(data, LinearMixedFitOptions(), g_features, pool_types=pool),
        prepare=spec.prepare,
        pool_types=pool,
        label=spec.label,
    )


def known_design_plan(p_A: float, outcome: str = 'linear_mixed', kernel: Optional[KernelOptions] = None) -> NuisancePlan:
    """Known Bernoulli(p_A) randomization with a fitted outcome model."""
    e = KnownRandomization({1: p_A})
    if outcome == 'kernel':
        opts = kernel or KernelOptions()
        fit_g = lambda data: fit_nw(data, opts)
    elif outcome == 'linear_mixed':
        fit_g = lambda data: fit_linear_mixed(data)
    else:
        raise ConfigurationError(f"unknown study outcome model '{outcome}'")
    return NuisancePlan(fit_e=lambda data: e, fit_g=fit_g, label=f"known,{outcome}")


def _one_replicate(
    scenario,
    plan: NuisancePlan,
    targets: Sequence[MCTarget],
    n: int,
    seed: np.random.SeedSequence,
    estimator: str,
    level: float,
    fold_seed: int,
) -> List[Tuple[float, float, bool]]:
    data = plan.prepare(scenario.simulate(n, seed))
    if estimator == 'crossfit':
        folds = cross_fit_split(data, fold_seed)
        nuisances = fit_fold_nuisances(data, plan.fit_e, plan.fit_g, folds)
    else:
        nuisances = PrefitNuisances(plan.fit_e(data), plan.fit_g(data))
    out = []
    for target in targets:
        result = estimate_with_nuisances(
            data, nuisances, target.spec_for(data.type_labels), level=level, pool_types=plan.pool_types,
        )
        truth = scenario.truth(target.kind, target.alpha, target.alpha_prime)
        if result.ci is None:
            out.append((result.tau_hat, float('nan'), False))
        else:
            out.append((result.tau_hat, result.se, result.ci[0] <= truth <= result.ci[1]))
    return out


def run_mc(
    scenario,
    plan: NuisancePlan,
    targets: Sequence[MCTarget],
    reps: int,
    n: int,
    seed: int,
    estimator: str = 'aipw',
    level: float = 0.05,
    threads: int = 1,
) -> List[MCResult]:
    """
    Monte-Carlo study of one nuisance plan.

    Args:
        scenario: GlmmScenario, NoInterferenceScenario or SmoothScenario
        plan: nuisance plan
        targets: estimands to track
        reps: number of replicates
        n: clusters per replicate
        seed: master seed; replicate r uses the r-th spawned SeedSequence
        estimator: 'aipw' (nuisances fitted on the full sample) or 'crossfit'
        level: significance level of the intervals
        threads: replicates run concurrently

    Returns:
        One MCResult per target; failed replicates are excluded and counted
    """
    if reps < 1:
        raise ConfigurationError(f"reps must be >= 1, got {reps}")
    if estimator not in ('aipw', 'crossfit'):
        raise ConfigurationError(f"unknown estimator '{estimator}'")
    children = np.random.SeedSequence(seed).spawn(reps)

    def replicate(r: int):
        try:
            return _one_replicate(scenario, plan, targets, n, children[r], estimator, level, seed + r)
        except (NetfxError, np.linalg.LinAlgError) as exc:
            log_event(logger, 'MC_REP_FAILED', {"rep": r, "error": str(exc)}, level=logging.WARNING)
            return None

    outcomes = Parallel(n_jobs=threads, prefer='threads')(delayed(replicate)(r) for r in range(reps))
    ok = [o for o in outcomes if o is not None]
    failures = reps - len(ok)
    if failures:
        logger.warning(f"{failures} of {reps} replicates failed and were excluded")

    results = []
    for t, target in enumerate(targets):
        results.append(MCResult(
            scenario=scenario.name,
            estimand=target.label,
            spec=plan.label,
            truth=scenario.truth(target.kind, target.alpha, target.alpha_prime),
            estimates=np.array([o[t][0] for o in ok], dtype=float),
            ses=np.array([o[t][1] for o in ok], dtype=float),
            covered=np.array([o[t][2] for o in ok], dtype=bool),
            failures=failures,
        ))
        log_event(logger, 'MC_RESULT', results[-1].to_row())
    return results


def mc_results_frame(results: Sequence[MCResult]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in results], columns=MC_COLUMNS)


def variance_curve(
    p_A: float,
    alphas: Sequence[float],
    reps: int,
    n: int,
    seed: int,
    threads: int = 1,
) -> pd.DataFrame:
    """
    Empirical variance of the direct-effect estimator over an alpha grid
    under no interference, next to the theoretical curve.

    Each replicate fits the outcome model once and evaluates every alpha.

    Returns:
        DataFrame with columns alpha, emp_var, theory_var, mean_se, seb_ate, reps, failures
        (variances on the scale of the estimator, i.e. divided by N)
    """
    if reps < 2:
        raise ConfigurationError(f"a variance curve needs reps >= 2, got {reps}")
    plan = known_design_plan(p_A)
    children = np.random.SeedSequence(seed).spawn(reps)
    specs = [MCTarget('DE', a) for a in alphas]

    def replicate(r: int):
        try:
            data = simulate_noint(p_A, n, children[r])
            nuisances = PrefitNuisances(plan.fit_e(data), plan.fit_g(data))
            return [
                (res.tau_hat, res.se if res.se is not None else float('nan'))
                for res in (estimate_with_nuisances(data, nuisances, t.spec_for([1])) for t in specs)
            ]
        except (NetfxError, np.linalg.LinAlgError) as exc:
            log_event(logger, 'MC_REP_FAILED', {"rep": r, "error": str(exc)}, level=logging.WARNING)
            return None

    outcomes = [o for o in Parallel(n_jobs=threads, prefer='threads')(delayed(replicate)(r) for r in range(reps))
                if o is not None]
    estimates = np.array([[v[0] for v in o] for o in outcomes])
    ses = np.array([[v[1] for v in o] for o in outcomes])
    rows = []
    for i, alpha in enumerate(alphas):
        column = estimates[:, i]
        mean = math.fsum(column) / column.size
        rows.append({
            "alpha": alpha,
            "emp_var": math.fsum((column - mean) ** 2) / (column.size - 1),
            "theory_var": theoretical_de_variance(alpha, p_A) / n,
            "mean_se": math.fsum(ses[:, i]) / column.size,
            "seb_ate": seb_ate(p_A) / n,
            "reps": int(column.size),
            "failures": reps - len(outcomes),
        })
    return pd.DataFrame(rows)


def kernel_ise(
    n: int,
    reps: int,
    seed: int,
    eval_clusters: int = 200,
    options: Optional[KernelOptions] = None,
    scenario: Optional[SmoothScenario] = None,
) -> np.ndarray:
    """
    Integrated squared error of the kernel outcome model on the smooth scenario.

    ISE is approximated by the mean squared error over every assignment of
    `eval_clusters` fresh covariate draws.

    Returns:
        ISE per replicate
    """
    scenario = scenario or SmoothScenario()
    children = np.random.SeedSequence(seed).spawn(reps + 1)
    x_eval = make_rng(children[-1]).standard_normal((eval_clusters, 2, 1))
    assignments = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int8)
    errors = np.empty(reps)
    for r in range(reps):
        model = fit_nw(scenario.simulate(n, children[r]), options)
        squared = [
            np.mean((model.predict_table(x, 1, assignments) - smooth_regression(assignments, x)) ** 2)
            for x in x_eval
        ]
        errors[r] = math.fsum(squared) / eval_clusters
    return errors

"""
Estimators

Efficient influence function, AIPW point estimation, two-fold cross-fitting
and influence-function variance.

For a cluster of type k,
    phi_k = w_k(A, X)^T {Y - g(A, X, k)} / e(A | X, k) + sum_a w_k(a, X)^T g(a, X, k),
theta_k is the type mean of phi_k and tau = sum_k v_k(p_k) theta_k. The
variance is the mean square of the per-cluster influence contribution
    v_k(p_k) (phi - theta_k) / p_k + sum_k' {1(L = k') - p_k'} v_k'(p_k') theta_k',
where the second term is dropped when the type proportions are known.
"""

import logging
import math
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm

from models.cluster_data import ClusterObservation, Dataset, TypeProportions, assignment_index, enumerate_assignments
from models.estimands import EstimandSpec, PolicyAllocation, mean_outcome_spec
from models.results import EstimateResult, FoldAssignment
from .errors import (
    ConfigurationError, DomainError, EstimationError, NetfxError, NuisanceFitError, VarianceUnavailableError,
)
from .logging_setup import log_event
from .outcome import OutcomeModel
from .propensity import PropensityModel, group_propensity

logger = logging.getLogger('netfx.' + __name__)

PropensityFitter = Callable[[Dataset], PropensityModel]
OutcomeFitter = Callable[[Dataset], OutcomeModel]

POOLED_STRATUM = 0


def phi_k(
    cluster: ClusterObservation,
    e: PropensityModel,
    g: OutcomeModel,
    spec: EstimandSpec,
    floor: Optional[float] = None,
) -> Tuple[float, bool]:
    """
    Efficient influence function value of one cluster (uncentred).

    Args:
        cluster: observed cluster
        e: propensity model
        g: outcome model
        spec: estimand
        floor: propensity truncation floor

    Returns:
        (phi, whether the observed propensity was clipped)
    """
    k = cluster.type_label
    assignments = enumerate_assignments(cluster.size)
    weights = spec.weight_table(k, cluster.x, assignments)
    predictions = np.asarray(g.predict_table(cluster.x, k, assignments), dtype=float)
    if not np.isfinite(predictions).all():
        raise EstimationError(f"outcome model returned non-finite predictions for cluster {cluster.cluster_id}")
    observed = assignment_index(cluster.a)
    raw = group_propensity(e, cluster.a, cluster.x, k)
    propensity = raw if floor is None else min(max(raw, floor), 1.0 - floor)
    if not propensity > 0:
        raise EstimationError(f"propensity of the observed assignment is zero in cluster {cluster.cluster_id}")
    residual = float(weights[observed] @ (cluster.y - predictions[observed])) / propensity
    augmentation = math.fsum((weights * predictions).ravel())
    return residual + augmentation, propensity != raw


# Nuisance bookkeeping

class PrefitNuisances:
    """The same (e, g) for every cluster."""

    def __init__(self, e: PropensityModel, g: OutcomeModel):
        self.e = e
        self.g = g

    def for_cluster(self, index: int) -> Tuple[PropensityModel, OutcomeModel]:
        return self.e, self.g

    def diagnostics(self) -> dict:
        return {"propensity": self.e.to_dict(), "outcome": self.g.to_dict()}


class FoldNuisances:
    """Nuisances fitted on the complement of each fold, looked up by held-out cluster."""

    def __init__(self, folds: FoldAssignment, models: Dict[int, Tuple[PropensityModel, OutcomeModel]]):
        self.folds = folds
        self.models = models

    def for_cluster(self, index: int) -> Tuple[PropensityModel, OutcomeModel]:
        return self.models[self.folds.fold[index]]

    def diagnostics(self) -> dict:
        return {
            "folds": self.folds.to_dict(),
            "nuisances_by_fold": {
                str(f): {"propensity": e.to_dict(), "outcome": g.to_dict()} for f, (e, g) in sorted(self.models.items())
            },
        }


def cluster_contributions(
    data: Dataset,
    nuisances,
    spec: EstimandSpec,
    floor: Optional[float] = None,
    threads: int = 1,
) -> Tuple[np.ndarray, int]:
    """
    phi for every cluster, in cluster order.

    Returns:
        (phi values, number of clipped propensities)
    """
    def one(i: int) -> Tuple[float, bool]:
        e, g = nuisances.for_cluster(i)
        return phi_k(data.clusters[i], e, g, spec, floor)

    if threads > 1:
        values = Parallel(n_jobs=threads, prefer='threads')(delayed(one)(i) for i in range(data.N))
    else:
        values = [one(i) for i in range(data.N)]
    phi = np.array([v for v, _ in values], dtype=float)
    return phi, int(sum(clipped for _, clipped in values))


# Aggregation

def _strata(data: Dataset, pool_types: bool) -> np.ndarray:
    labels = data.labels()
    return np.full_like(labels, POOLED_STRATUM) if pool_types else labels


def _proportions(data: Dataset, p: Optional[TypeProportions], pool_types: bool) -> TypeProportions:
    if pool_types:
        return TypeProportions({POOLED_STRATUM: 1.0}, known=True if p is None else p.known)
    p = p or data.type_proportions()
    missing = sorted(set(data.type_labels) - set(p.p_hat))
    if missing:
        raise ConfigurationError(f"type proportions missing for cluster type(s) {missing}")
    return p


def influence_contributions(
    phi: np.ndarray,
    strata: np.ndarray,
    theta: Dict[int, float],
    p: TypeProportions,
    spec: EstimandSpec,
) -> np.ndarray:
    """Per-cluster influence contributions of tau."""
    out = np.zeros(phi.size)
    p_term = np.zeros(phi.size)
    for k, theta_k in theta.items():
        v, v_prime = spec.population_weight(p.p_hat[k], k)
        member = strata == k
        out[member] = v * (phi[member] - theta_k) / p.p_hat[k]
        if not p.known:
            p_term += (member.astype(float) - p.p_hat[k]) * v_prime * theta_k
    return out + p_term


def _aggregate(
    data: Dataset,
    phi: np.ndarray,
    spec: EstimandSpec,
    p: TypeProportions,
    level: float,
    pool_types: bool,
    diagnostics: dict,
) -> EstimateResult:
    strata = _strata(data, pool_types)
    theta: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for k in sorted(set(strata.tolist())):
        member = phi[strata == k]
        counts[k] = int(member.size)
        theta[k] = math.fsum(member) / member.size
    tau = math.fsum(spec.population_weight(p.p_hat[k], k)[0] * theta[k] for k in sorted(theta))

    variance: Optional[float] = None
    contributions = None
    singletons = sorted(k for k, n in counts.items() if n < 2)
    if singletons:
        logger.warning(f"Cluster type(s) {singletons} hold a single cluster; variance suppressed")
        diagnostics["variance_unavailable"] = f"single-cluster type(s) {singletons}"
    else:
        contributions = influence_contributions(phi, strata, theta, p, spec)
        variance = math.fsum(contributions ** 2) / data.N

    result = EstimateResult(
        estimand=spec.name,
        tau_hat=tau,
        theta_hat=theta,
        p_hat=p,
        variance=variance,
        n=data.N,
        level=level,
        contributions=contributions,
        diagnostics=diagnostics,
    )
    if variance is not None:
        result.ci = confidence_interval(result, level)
    log_event(logger, 'ESTIMATE_RESULT', {k: v for k, v in result.to_dict().items() if k != 'diagnostics'})
    return result


def estimate_with_nuisances(
    data: Dataset,
    nuisances,
    spec: EstimandSpec,
    p: Optional[TypeProportions] = None,
    level: float = 0.05,
    floor: Optional[float] = None,
    pool_types: bool = False,
    threads: int = 1,
) -> EstimateResult:
    """Estimate tau from per-cluster nuisances (prefit or fold-wise)."""
    if data.N == 0:
        raise EstimationError("dataset holds no clusters")
    if spec.allocation is not None:
        spec.allocation.check_types(data.type_labels)
    p = _proportions(data, p, pool_types)
    phi, clipped = cluster_contributions(data, nuisances, spec, floor, threads)
    if clipped:
        log_event(logger, 'PROPENSITY_CLIPPED', {"count": clipped, "floor": floor}, level=logging.WARNING)
    diagnostics = {"propensity_clipped": clipped, "pooled_types": pool_types, **nuisances.diagnostics()}
    return _aggregate(data, phi, spec, p, level, pool_types, diagnostics)


def aipw_estimate(
    data: Dataset,
    e: PropensityModel,
    g: OutcomeModel,
    spec: EstimandSpec,
    p: Optional[TypeProportions] = None,
    level: float = 0.05,
    floor: Optional[float] = None,
    pool_types: bool = False,
    threads: int = 1,
) -> EstimateResult:
    """
    AIPW estimate with fixed nuisance models.

    Args:
        data: dataset
        e: propensity model
        g: outcome model (ZeroOutcomeModel gives the IPW estimator)
        spec: estimand
        p: type proportions; default N_k / N (estimated)
        level: significance level of the Wald interval
        floor: propensity truncation floor
        pool_types: treat all clusters as one stratum
        threads: worker threads for the per-cluster evaluations

    Returns:
        EstimateResult; the variance is None when some type holds one cluster
    """
    return estimate_with_nuisances(data, PrefitNuisances(e, g), spec, p, level, floor, pool_types, threads)


# Cross-fitting

def cross_fit_split(data: Dataset, seed: int) -> FoldAssignment:
    """
    Stratified two-fold split: shuffle each type, first ceil(N_k / 2) to fold 1.
    """
    if data.N < 2:
        raise EstimationError(f"cross-fitting needs at least 2 clusters, got {data.N}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    labels = data.labels()
    fold: Dict[int, int] = {}
    for k in data.type_labels:
        members = rng.permutation(np.flatnonzero(labels == k))
        cut = math.ceil(members.size / 2)
        for position, i in enumerate(members):
            fold[int(i)] = 1 if position < cut else 2
    return FoldAssignment(fold=fold, seed=seed, cluster_ids=tuple(c.cluster_id for c in data.clusters))


def fit_fold_nuisances(
    data: Dataset,
    fit_e: PropensityFitter,
    fit_g: OutcomeFitter,
    folds: FoldAssignment,
    threads: int = 1,
) -> FoldNuisances:
    """
    Fit (e, g) on the complement of each fold.

    Raises:
        EstimationError: a held-out type is absent from its training fold
        NuisanceFitError: a nuisance fit failed, naming the fold and the model
    """
    def fit(number: int) -> Tuple[PropensityModel, OutcomeModel]:
        held_out = folds.indices(number)
        train = data.subset(folds.indices(3 - number))
        missing = sorted({data.clusters[i].type_label for i in held_out} - set(train.type_labels))
        if missing:
            raise EstimationError(f"training fold for fold {number} holds no clusters of type(s) {missing}")
        try:
            e = fit_e(train)
        except NetfxError as exc:
            raise NuisanceFitError(number, 'propensity', exc) from exc
        try:
            g = fit_g(train)
        except NetfxError as exc:
            raise NuisanceFitError(number, 'outcome', exc) from exc
        return e, g

    fitted = Parallel(n_jobs=min(threads, 2), prefer='threads')(delayed(fit)(f) for f in (1, 2))
    return FoldNuisances(folds, {1: fitted[0], 2: fitted[1]})


def crossfit_estimate(
    data: Dataset,
    nuisance_fitters: Tuple[PropensityFitter, OutcomeFitter],
    spec: EstimandSpec,
    level: float = 0.05,
    seed: int = 0,
    p: Optional[TypeProportions] = None,
    floor: Optional[float] = None,
    pool_types: bool = False,
    threads: int = 1,
) -> EstimateResult:
    """
    Two-fold cross-fitted estimate.

    Nuisances are fitted on each fold's complement and evaluated on the fold;
    phi values are kept in cluster order so the result does not depend on
    scheduling.
    """
    folds = cross_fit_split(data, seed)
    fit_e, fit_g = nuisance_fitters
    nuisances = fit_fold_nuisances(data, fit_e, fit_g, folds, threads)
    return estimate_with_nuisances(data, nuisances, spec, p, level, floor, pool_types, threads)


# Inference

def confidence_interval(result: EstimateResult, level: Optional[float] = None) -> Tuple[float, float]:
    """
    Wald interval tau -/+ z_{1 - level/2} sqrt(variance / N).

    Raises:
        VarianceUnavailableError: the result carries no variance
        DomainError: level outside (0, 1]
    """
    level = result.level if level is None else level
    if not 0.0 < level <= 1.0:
        raise DomainError(f"level must lie in (0, 1], got {level}")
    if result.variance is None:
        raise VarianceUnavailableError("confidence interval requested but the variance is unavailable")
    half = float(norm.ppf(1.0 - level / 2.0)) * result.se
    return result.tau_hat - half, result.tau_hat + half


def contrast_specs(spec: EstimandSpec) -> Tuple[EstimandSpec, EstimandSpec]:
    """
    Unit-average potential-outcome estimands whose difference is a DE or IE spec.

    DE(alpha) = psi(1, alpha) - psi(0, alpha); IE(alpha, alpha') = psi(0, alpha) - psi(0, alpha').
    """
    alloc = spec.allocation
    if alloc is None or spec.name not in ('DE', 'IE'):
        raise ConfigurationError(f"no contrast form for estimand '{spec.name}'")
    if spec.name == 'DE':
        return mean_outcome_spec(alloc, 1), mean_outcome_spec(alloc, 0)
    reference = PolicyAllocation(alpha=alloc.alpha_prime)
    return mean_outcome_spec(alloc, 0), mean_outcome_spec(reference, 0)


def psi_contrasts(
    data: Dataset,
    nuisances,
    spec: EstimandSpec,
    floor: Optional[float] = None,
) -> np.ndarray:
    """Per-cluster psi contrasts whose type-weighted mean is the DE or IE estimate."""
    plus, minus = contrast_specs(spec)
    phi_plus, _ = cluster_contributions(data, nuisances, plus, floor)
    phi_minus, _ = cluster_contributions(data, nuisances, minus, floor)
    return phi_plus - phi_minus


def simplified_variance(contrasts: np.ndarray, tau: float) -> float:
    """Mean squared deviation of the psi contrasts from tau."""
    return math.fsum((np.asarray(contrasts) - tau) ** 2) / len(contrasts)

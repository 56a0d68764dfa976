"""
Propensity

Cluster-level propensity scores e(a | x, k): exact values under a known
randomization design, and a logistic mixed-effects model with a shared
random intercept b_i ~ N(0, 1/lambda_k) fitted by maximum likelihood.

The random-intercept integral uses Gauss-Hermite quadrature. By default the
rule is centred at the mode b* of each integrand and scaled by
s = (sum_j mu_j (1 - mu_j) + lambda_k)^{-1/2} at that mode,
    e(a | x, k) = sqrt(2) s sum_q w_q exp(t_q^2) L(a | b_q) phi(b_q; lambda_k),  b_q = b* + sqrt(2) s t_q,
and agreement with the rule of twice the order is checked after fitting.
The plain rule (b_q = sqrt(2 / lambda_k) t_q) is kept for comparison.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import approx_fprime, minimize
from scipy.special import expit, logsumexp, roots_hermite
from sklearn.linear_model import LogisticRegression

from models.cluster_data import Dataset, enumerate_assignments
from .errors import ConfigurationError, ConvergenceError, DomainError, SeparationError
from .features import FeatureSpec
from .logging_setup import log_event

logger = logging.getLogger('netfx.' + __name__)

LOG_LAMBDA_BOUNDS = (-10.0, 20.0)
QUADRATURE_TOLERANCE = 1e-8
MAX_QUAD_ORDER = 240
MODE_MAX_STEP = 5.0


@dataclass(frozen=True)
class QuadratureRule:
    """
    Gauss-Hermite rule of order Q.

    Attributes:
        order: number of nodes
        adaptive: centre and scale the nodes at the mode of each integrand
    """
    order: int = 30
    adaptive: bool = True
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise ConfigurationError(f"quadrature order must be >= 1, got {self.order}")
        nodes, weights = roots_hermite(self.order)
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'weights', weights)

    @property
    def log_weights(self) -> np.ndarray:
        """log(w_q / sqrt(pi)); these normalized weights sum to one."""
        return np.log(self.weights) - 0.5 * np.log(np.pi)

    def doubled(self) -> 'QuadratureRule':
        return QuadratureRule(order=2 * self.order, adaptive=self.adaptive)


@dataclass(frozen=True)
class PropensityFitOptions:
    tol: float = 1e-8
    max_iter: int = 200
    quad_nodes: int = 30
    separation_bound: float = 30.0


class PropensityModel(ABC):
    """Evaluator of the group propensity e(a | x, k)."""

    name = 'propensity'

    @abstractmethod
    def log_table(self, x: np.ndarray, k: int, assignments: np.ndarray) -> np.ndarray:
        """log e(a | x, k) for each row of `assignments`."""

    def table(self, x: np.ndarray, k: int) -> np.ndarray:
        """e(a | x, k) for every enumerated assignment."""
        return np.exp(self.log_table(x, k, enumerate_assignments(x.shape[0])))

    def value(self, a: np.ndarray, x: np.ndarray, k: int) -> float:
        a = np.asarray(a, dtype=np.int8).reshape(1, -1)
        return float(np.exp(self.log_table(x, k, a)[0]))

    def to_dict(self) -> dict:
        return {"kind": self.name}


class KnownRandomization(PropensityModel):
    """
    Independent Bernoulli assignment with known unit probabilities.

    Args:
        unit_prob: mapping k -> constant probability, or a callable
            (j, x, k) -> probability of treating unit j
        floor: probabilities must lie strictly inside (floor, 1 - floor)
    """

    name = 'known'

    def __init__(
        self,
        unit_prob: Union[Mapping[int, float], Callable[[int, np.ndarray, int], float]],
        floor: float = 0.0,
    ):
        self.floor = floor
        if callable(unit_prob) and not isinstance(unit_prob, Mapping):
            self._prob_fn = unit_prob
            self.constant: Optional[Dict[int, float]] = None
        else:
            self.constant = {int(k): float(p) for k, p in unit_prob.items()}
            for k, p in self.constant.items():
                self._check(p, k)
            self._prob_fn = self._constant_prob

    def _constant_prob(self, j: int, x: np.ndarray, k: int) -> float:
        if k not in self.constant:
            raise ConfigurationError(f"no randomization probability for cluster type {k}")
        return self.constant[k]

    def _check(self, p: float, k: int):
        if not self.floor < p < 1.0 - self.floor:
            raise DomainError(
                f"randomization probability for type {k} must lie in ({self.floor}, {1 - self.floor}), got {p}"
            )

    def unit_probabilities(self, x: np.ndarray, k: int) -> np.ndarray:
        probs = np.array([self._prob_fn(j, x, k) for j in range(x.shape[0])], dtype=float)
        for p in probs:
            self._check(p, k)
        return probs

    def log_table(self, x: np.ndarray, k: int, assignments: np.ndarray) -> np.ndarray:
        probs = self.unit_probabilities(x, k)
        return assignments @ np.log(probs) + (1 - assignments) @ np.log1p(-probs)

    def to_dict(self) -> dict:
        data = {"kind": self.name}
        if self.constant is not None:
            data["prob"] = {str(k): p for k, p in sorted(self.constant.items())}
        return data


class LogisticMixedModel(PropensityModel):
    """
    logit pr(A_ij = 1 | X_i, L_i = k, b_i) = f_j(X_i)^T beta_k + b_i, b_i ~ N(0, 1/lambda_k).

    Attributes:
        beta: mapping k -> coefficient vector over FeatureSpec.propensity_features
        lam: mapping k -> random-intercept precision lambda_k > 0
        features: feature specification
        quad: quadrature rule
        fit_info: mapping k -> fit summary (log-likelihood, iterations, gradient norm, se)
    """

    name = 'logistic_mixed'

    def __init__(
        self,
        beta: Mapping[int, np.ndarray],
        lam: Mapping[int, float],
        features: Optional[FeatureSpec] = None,
        quad: Optional[QuadratureRule] = None,
        fit_info: Optional[Mapping[int, dict]] = None,
    ):
        self.beta = {int(k): np.asarray(b, dtype=float) for k, b in beta.items()}
        self.lam = {int(k): float(v) for k, v in lam.items()}
        for k, v in self.lam.items():
            if not v > 0:
                raise DomainError(f"random-intercept precision for type {k} must be positive, got {v}")
        self.features = features or FeatureSpec()
        self.quad = quad or QuadratureRule()
        self.fit_info = dict(fit_info or {})

    def _params(self, k: int) -> Tuple[np.ndarray, float]:
        if k not in self.beta or k not in self.lam:
            raise ConfigurationError(f"propensity model has no parameters for cluster type {k}")
        return self.beta[k], self.lam[k]

    def linear_predictor(self, x: np.ndarray, k: int) -> np.ndarray:
        beta, _ = self._params(k)
        feats = self.features.propensity_features(x)
        if feats.shape[-1] != beta.size:
            raise ConfigurationError(
                f"type {k}: {feats.shape[-1]} propensity features but {beta.size} coefficients"
            )
        return feats @ beta

    def log_table(self, x: np.ndarray, k: int, assignments: np.ndarray) -> np.ndarray:
        eta = self.linear_predictor(x, k)
        lam = self._params(k)[1]
        a = np.asarray(assignments, dtype=float)
        terms = _node_terms(np.broadcast_to(eta, a.shape), a, lam, self.quad)[0]
        return logsumexp(terms, axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": self.name,
            "quad_nodes": self.quad.order,
            "adaptive": self.quad.adaptive,
            "beta": {str(k): b.tolist() for k, b in sorted(self.beta.items())},
            "lambda": {str(k): v for k, v in sorted(self.lam.items())},
            "fit_info": {str(k): info for k, info in sorted(self.fit_info.items())},
        }


def _posterior_mode(eta: np.ndarray, a: np.ndarray, lam: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mode of b -> log L(a | b) + log phi(b; lambda) for each row, by safeguarded Newton.

    Args:
        eta: (n, M) linear predictors without the intercept b
        a: (n, M) treatments
        lam: random-intercept precision

    Returns:
        (mode (n,), expit(eta + mode) (n, M), curvature sum_j mu_j (1 - mu_j) + lambda (n,))
    """
    centre = np.zeros(a.shape[0])
    for _ in range(200):
        mu = expit(eta + centre[:, None])
        score = (a - mu).sum(axis=1) - lam * centre
        curv = (mu * (1 - mu)).sum(axis=1) + lam
        step = np.clip(score / curv, -MODE_MAX_STEP, MODE_MAX_STEP)
        centre = centre + step
        if np.max(np.abs(step)) <= 1e-12 * (1.0 + np.max(np.abs(centre))):
            break
    mu = expit(eta + centre[:, None])
    return centre, mu, (mu * (1 - mu)).sum(axis=1) + lam


def _node_terms(eta: np.ndarray, a: np.ndarray, lam: float, quad: QuadratureRule):
    """
    Log integrand at each node, weighted so that logsumexp over the last axis
    is log e(a | x, k).

    Args:
        eta: (n, M) linear predictors without the intercept b
        a: (n, M) treatments
        lam: random-intercept precision
        quad: quadrature rule

    Returns:
        (terms (n, Q), nodes b (n, Q), linear predictors (n, M, Q), mode tuple or None)
    """
    if quad.adaptive:
        mode = _posterior_mode(eta, a, lam)
        centre, _, curv = mode
        spread = 1.0 / np.sqrt(curv)
        b = centre[:, None] + np.sqrt(2.0) * spread[:, None] * quad.nodes
        prior = 0.5 * np.log(lam / (2 * np.pi)) - 0.5 * lam * b ** 2
        offset = quad.nodes ** 2 + np.log(quad.weights) + np.log(np.sqrt(2.0) * spread)[:, None]
    else:
        mode = None
        b = np.broadcast_to(np.sqrt(2.0 / lam) * quad.nodes, (a.shape[0], quad.order))
        prior, offset = 0.0, quad.log_weights
    lin = eta[..., None] + b[:, None, :]
    a3 = a[..., None]
    log_lik = (a3 * -np.logaddexp(0.0, -lin) + (1 - a3) * -np.logaddexp(0.0, lin)).sum(axis=1)
    return log_lik + prior + offset, b, lin, mode


def group_propensity(
    model: PropensityModel,
    a: np.ndarray,
    x: np.ndarray,
    k: int,
    floor: Optional[float] = None,
) -> float:
    """
    Group propensity e(a | x, k).

    Args:
        model: propensity model
        a: treatment vector of the cluster
        x: covariate matrix of the cluster
        k: cluster type
        floor: when given, clip the value into [floor, 1 - floor]

    Returns:
        The (possibly clipped) propensity
    """
    value = model.value(a, x, k)
    if floor is not None and not floor <= value <= 1.0 - floor:
        logger.warning(f"Propensity {value:.3e} for type {k} clipped to the floor {floor}")
        value = float(np.clip(value, floor, 1.0 - floor))
    return value


# Fitting

def logistic_mixed_loglik(
    params: np.ndarray,
    features: np.ndarray,
    treatments: np.ndarray,
    quad: QuadratureRule,
) -> Tuple[float, np.ndarray]:
    """
    Marginal log-likelihood and its gradient for clusters of one size.

    Args:
        params: [beta, log lambda]
        features: (n, M, p) unit features
        treatments: (n, M) binary treatments
        quad: quadrature rule

    Returns:
        (sum_i log e(A_i | X_i), gradient with respect to params)
    """
    beta, lam = params[:-1], float(np.exp(params[-1]))
    eta = features @ beta
    a = treatments.astype(float)
    terms, b, lin, mode = _node_terms(eta, a, lam, quad)
    log_l = logsumexp(terms, axis=1)
    post = np.exp(terms - log_l[:, None])
    resid = a[..., None] - expit(lin)
    grad_beta = np.einsum('nq,nmq,nmp->p', post, resid, features)
    if mode is None:
        # b_q = sqrt(2 / lambda) t_q, so d b_q / d log lambda = -b_q / 2
        grad_log_lam = -0.5 * np.einsum('nq,nmq,nq->', post, resid, b)
        return float(log_l.sum()), np.append(grad_beta, grad_log_lam)

    # Adaptive nodes b_q = b* + sqrt(2) s t_q move with the parameters through
    # the mode b* (implicit function theorem) and the log spread log s.
    centre, mu_hat, curv = mode
    w = mu_hat * (1 - mu_hat)
    skew = (w * (1 - 2 * mu_hat)).sum(axis=1)
    d_centre_beta = -np.einsum('nm,nmp->np', w, features) / curv[:, None]
    d_centre_lam = -lam * centre / curv
    d_curv_beta = np.einsum('nm,nmp->np', w * (1 - 2 * mu_hat), features) + skew[:, None] * d_centre_beta
    d_curv_lam = skew * d_centre_lam + lam
    d_spread_beta = -0.5 * d_curv_beta / curv[:, None]
    d_spread_lam = -0.5 * d_curv_lam / curv

    slope = post * (resid.sum(axis=1) - lam * b)  # posterior-weighted d log integrand / d b
    along_centre = slope.sum(axis=1)
    along_spread = (slope * (b - centre[:, None])).sum(axis=1)
    grad_beta = (grad_beta + along_centre @ d_centre_beta
                 + (along_spread + 1.0) @ d_spread_beta)
    grad_log_lam = (np.sum(post * (0.5 - 0.5 * lam * b ** 2))
                    + along_centre @ d_centre_lam + (along_spread + 1.0) @ d_spread_lam)
    return float(log_l.sum()), np.append(grad_beta, grad_log_lam)


def _blocks(clusters, features: FeatureSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    by_size: Dict[int, List] = {}
    for c in clusters:
        by_size.setdefault(c.size, []).append(c)
    return [
        (np.stack([features.propensity_features(c.x) for c in group]), np.stack([c.a for c in group]))
        for _, group in sorted(by_size.items())
    ]


def _fit_group(
    label: str,
    clusters,
    features: FeatureSpec,
    quad: QuadratureRule,
    opts: PropensityFitOptions,
) -> Tuple[np.ndarray, float, dict]:
    blocks = _blocks(clusters, features)
    n = len(clusters)
    flat_a = np.concatenate([a.ravel() for _, a in blocks])
    if flat_a.min() == flat_a.max():
        raise ConvergenceError(f"type {label}: treatments are all {int(flat_a[0])}; propensity is not identifiable")
    flat_f = np.concatenate([f.reshape(-1, f.shape[-1]) for f, _ in blocks])
    p = flat_f.shape[1]

    init = LogisticRegression(penalty=None, fit_intercept=False, max_iter=1000)
    init.fit(flat_f, flat_a)
    x0 = np.append(init.coef_.ravel(), 0.0)  # lambda starts at 1

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = 0.0, np.zeros(p + 1)
        for feats, treat in blocks:
            v, g = logistic_mixed_loglik(theta, feats, treat, quad)
            value += v
            grad += g
        return -value / n, -grad / n

    bounds = [(None, None)] * p + [LOG_LAMBDA_BOUNDS]
    result = minimize(
        objective, x0, jac=True, method='L-BFGS-B', bounds=bounds,
        options={'maxiter': opts.max_iter, 'gtol': opts.tol, 'ftol': 1e-15},
    )
    start = result.x
    _, grad = objective(start)
    free = np.ones(p + 1, dtype=bool)
    lo, hi = LOG_LAMBDA_BOUNDS
    if (start[-1] >= hi - 1e-9 and grad[-1] < 0) or (start[-1] <= lo + 1e-9 and grad[-1] > 0):
        free[-1] = False

    def restricted(z: np.ndarray) -> Tuple[float, np.ndarray]:
        full = start.copy()
        full[free] = z
        value, g = objective(full)
        return value, g[free]

    theta = start.copy()
    iterations = int(result.nit)
    if np.max(np.abs(grad[free])) > opts.tol:
        refined = minimize(
            restricted, start[free], jac=True, method='trust-exact',
            hess=lambda z: _hessian(lambda y: restricted(y)[1], z),
            options={'gtol': opts.tol, 'maxiter': opts.max_iter},
        )
        theta[free] = refined.x
        iterations += int(refined.nit)
    value, grad = restricted(theta[free])
    grad_norm = float(np.max(np.abs(grad)))

    if np.max(np.abs(theta[:-1])) > opts.separation_bound:
        raise SeparationError(
            f"type {label}: propensity coefficients diverge (max |beta| = {np.max(np.abs(theta[:-1])):.1f}); "
            f"check for perfect separation",
            last_iterate=theta, grad_norm=grad_norm,
        )
    if grad_norm > opts.tol:
        raise ConvergenceError(
            f"type {label}: logistic mixed model did not converge in {iterations} iterations",
            last_iterate=theta, grad_norm=grad_norm,
        )

    info = {
        "log_likelihood": -value * n,
        "iterations": iterations,
        "grad_norm": grad_norm,
        "clusters": n,
        "lambda_at_bound": bool(not free[-1]),
        "quadrature_error": _quadrature_error(theta, blocks, quad),
    }
    try:
        cov = np.linalg.inv(_hessian(lambda y: restricted(y)[1], theta[free]) * n)
        se = np.full(p + 1, np.nan)
        se[free] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        info["se"] = se[:-1].tolist()
        info["log_lambda_se"] = float(se[-1])
    except np.linalg.LinAlgError:
        logger.warning(f"type {label}: observed information is singular; standard errors unavailable")
    return theta[:-1], float(np.exp(theta[-1])), info


def _hessian(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Symmetrized finite-difference Jacobian of an analytic gradient."""
    jac = np.atleast_2d(approx_fprime(x, grad_fn))
    return 0.5 * (jac + jac.T)


def _quadrature_error(theta: np.ndarray, blocks, quad: QuadratureRule) -> float:
    """Largest |e_Q - e_2Q| over the observed clusters at theta."""
    finer = quad.doubled()
    lam = float(np.exp(theta[-1]))
    worst = 0.0
    for feats, treat in blocks:
        eta = feats @ theta[:-1]
        a = treat.astype(float)
        coarse = logsumexp(_node_terms(eta, a, lam, quad)[0], axis=1)
        fine = logsumexp(_node_terms(eta, a, lam, finer)[0], axis=1)
        worst = max(worst, float(np.max(np.abs(np.exp(coarse) - np.exp(fine)))))
    return worst


def fit_logistic_mixed(
    data: Dataset,
    quad: Optional[QuadratureRule] = None,
    opts: Optional[PropensityFitOptions] = None,
    features: Optional[FeatureSpec] = None,
    pool_types: bool = False,
    threads: int = 1,
) -> LogisticMixedModel:
    """
    Per-type maximum likelihood fit of the logistic mixed model.

    L-BFGS-B on (beta, log lambda) with the analytic score, started from a
    plain logistic fit and lambda = 1, then finished by scipy's trust-exact
    method on a finite-difference Hessian of the score until the gradient
    infinity norm of the mean log-likelihood is <= opts.tol. At the estimate
    the observed group propensities must agree with the rule of twice the
    order to QUADRATURE_TOLERANCE; otherwise the order is doubled (up to
    MAX_QUAD_ORDER) and the fit repeated.

    Args:
        data: dataset to fit on
        quad: quadrature rule (default: adaptive, order opts.quad_nodes)
        opts: fit options
        features: feature specification (default: all covariates, own and peer sums)
        pool_types: share one parameter set across all cluster types
        threads: types fitted concurrently

    Raises:
        ConvergenceError: gradient tolerance not reached, or treatments constant
        SeparationError: coefficients diverge
    """
    opts = opts or PropensityFitOptions()
    quad = quad or QuadratureRule(order=opts.quad_nodes)
    features = features or FeatureSpec(names=tuple(data.covariate_names))
    groups: Dict[str, Tuple[Sequence[int], list]] = {}
    if pool_types:
        groups['pooled'] = (data.type_labels, list(data.clusters))
    else:
        for k in data.type_labels:
            groups[str(k)] = ([k], data.clusters_of_type(k))

    while True:
        fitted = Parallel(n_jobs=min(threads, len(groups)), prefer='threads')(
            delayed(_fit_group)(label, clusters, features, quad, opts) for label, (_, clusters) in groups.items()
        )
        error = max(fit_info["quadrature_error"] for _, _, fit_info in fitted)
        if error <= QUADRATURE_TOLERANCE:
            break
        if quad.order * 2 > MAX_QUAD_ORDER:
            logger.warning(
                f"Quadrature of order {quad.order} differs from order {2 * quad.order} by {error:.2e} "
                f"at the fitted parameters"
            )
            break
        logger.info(f"Quadrature error {error:.2e} at order {quad.order}; refitting with {2 * quad.order} nodes")
        quad = quad.doubled()

    beta, lam, info = {}, {}, {}
    for (label, (types, _)), (b, l, fit_info) in zip(groups.items(), fitted):
        log_event(logger, 'FIT_RESULT', {"model": "logistic_mixed", "group": label, "lambda": l,
                                         "quad_nodes": quad.order, **fit_info})
        for k in types:
            beta[k], lam[k], info[k] = b, l, fit_info
    return LogisticMixedModel(beta, lam, features, quad, info)


def propensity_from_config(block: dict, data: Dataset, floor: float = 0.0) -> Callable[[Dataset], PropensityModel]:
    """
    Turn a `propensity` config block into a fitter: Dataset -> PropensityModel.

    {"kind": "known", "prob": {"1": 0.628, "2": 0.449}} or {"kind": "known", "prob": 0.5}
    {"kind": "logistic_mixed", "quad_nodes": 30, "adaptive": true, "own_covariates": [...], "peer_covariates": [...]}
    """
    kind = block.get('kind')
    if kind == 'known':
        prob = block.get('prob')
        if prob is None:
            raise ConfigurationError("known propensity needs 'prob'")
        if isinstance(prob, (int, float)):
            table = {k: float(prob) for k in data.type_labels}
        else:
            table = {int(k): float(v) for k, v in prob.items()}
            extra = sorted(set(table) - set(data.type_labels))
            if extra:
                raise ConfigurationError(f"propensity prob references cluster type(s) {extra} absent from the data")
        model = KnownRandomization(table, floor=floor)
        return lambda _: model
    if kind == 'logistic_mixed':
        opts = PropensityFitOptions(
            tol=float(block.get('tol', 1e-8)),
            max_iter=int(block.get('max_iter', 200)),
            quad_nodes=int(block.get('quad_nodes', 30)),
        )
        features = FeatureSpec.from_config(block, data.covariate_names)
        quad = QuadratureRule(order=opts.quad_nodes, adaptive=bool(block.get('adaptive', True)))
        return lambda fold: fit_logistic_mixed(fold, quad, opts, features, bool(block.get('pool_types', False)))
    raise ConfigurationError(f"unknown propensity kind '{kind}'")

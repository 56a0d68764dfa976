"""
Outcome

Outcome regressions g(a, x, k) in R^{M_k}:
- LinearMixedModel: Y_ij = h_j(a, x)^T beta_k + xi_i + eps_ij with compound-symmetry
  covariance S_k = eta_k^{-1} I + rho_k 11^T, fitted by maximum likelihood.
- KernelModel: Nadaraya-Watson smoother with an exact match on the unit's own
  treatment, a Gaussian kernel on continuous covariates and a mismatch kernel
  h_d^{1(z != z')} on discrete covariates and peer treatments.
- ZeroOutcomeModel: g = 0, which turns the AIPW estimator into IPW.
"""

import logging
import threading
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import qr
from scipy.optimize import approx_fprime, minimize
from scipy.special import expit

from models.cluster_data import Dataset, enumerate_assignments
from .errors import ConfigurationError, ConvergenceError, DesignError, DomainError, EstimationError
from .features import FeatureSpec
from .logging_setup import log_event

logger = logging.getLogger('netfx.' + __name__)

_SOFTPLUS_ONE = float(np.log(np.expm1(1.0)))  # softplus(tau) = 1, i.e. rho = 0


@dataclass(frozen=True)
class LinearMixedFitOptions:
    tol: float = 1e-8
    max_iter: int = 100


@dataclass(frozen=True)
class KernelOptions:
    """
    Nadaraya-Watson options.

    Attributes:
        bandwidth_scale: c0 in h_c = c0 * sigma_pooled * N^{-1/(4+p)}
        symmetrize_peers: compare peers through (number treated, covariate means)
        h_c, h_d: fixed bandwidths overriding the rule
    """
    bandwidth_scale: float = 1.0
    symmetrize_peers: bool = False
    h_c: Optional[float] = None
    h_d: Optional[float] = None

    def __post_init__(self):
        if not self.bandwidth_scale > 0:
            raise ConfigurationError(f"bandwidth_scale must be positive, got {self.bandwidth_scale}")
        if self.h_c is not None and not self.h_c > 0:
            raise ConfigurationError(f"h_c must be positive, got {self.h_c}")
        if self.h_d is not None and not 0.0 <= self.h_d <= 1.0:
            raise ConfigurationError(f"h_d must lie in [0, 1], got {self.h_d}")


class OutcomeModel(ABC):
    """Evaluator of g(a, x, k)."""

    name = 'outcome'

    @abstractmethod
    def predict_table(self, x: np.ndarray, k: int, assignments: Optional[np.ndarray] = None) -> np.ndarray:
        """(T, M) predictions, one row per assignment (default: all 2^M)."""

    def predict(self, a: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
        a = np.asarray(a, dtype=np.int8).reshape(1, -1)
        if a.shape[1] != x.shape[0]:
            raise DomainError(f"treatment vector of length {a.shape[1]} for a cluster of size {x.shape[0]}")
        return self.predict_table(x, k, a)[0]

    def diagnostics(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.name}


def predict(model: OutcomeModel, a: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    """g(a, x, k) for one treatment vector."""
    return model.predict(a, x, k)


class ZeroOutcomeModel(OutcomeModel):
    name = 'zero'

    def predict_table(self, x, k, assignments=None):
        if assignments is None:
            assignments = enumerate_assignments(x.shape[0])
        return np.zeros(assignments.shape)


# Compound symmetry algebra

def cs_matrix(eta: float, rho: float, M: int) -> np.ndarray:
    return np.eye(M) / eta + rho * np.ones((M, M))


def cs_inverse(eta: float, rho: float, M: int) -> np.ndarray:
    """S^{-1} = eta I - rho eta^2 / (1 + M rho eta) 11^T."""
    denom = 1.0 + M * rho * eta
    if not denom > 0:
        raise DomainError(f"compound symmetry is not positive definite (1 + M rho eta = {denom})")
    return eta * np.eye(M) - (rho * eta ** 2 / denom) * np.ones((M, M))


def cs_logdet(eta: float, rho: float, M: int) -> float:
    """log det S = -M log eta + log(1 + M rho eta)."""
    denom = 1.0 + M * rho * eta
    if not denom > 0:
        raise DomainError(f"compound symmetry is not positive definite (1 + M rho eta = {denom})")
    return -M * np.log(eta) + np.log(denom)


def cs_loglik(eta: float, rho: float, resid: np.ndarray) -> Tuple[float, float, float]:
    """
    Gaussian log-likelihood of clusters of one size and its partial derivatives.

    Args:
        eta: residual precision
        rho: random-effect variance
        resid: (n, M) residuals Y - H beta

    Returns:
        (log-likelihood, d/d eta, d/d rho) summed over the clusters
    """
    n, M = resid.shape
    denom = 1.0 + M * rho * eta
    q1 = float(np.sum(resid ** 2))
    q2 = float(np.sum(resid.sum(axis=1) ** 2))
    value = (n * (0.5 * M * np.log(eta) - 0.5 * np.log(denom) - 0.5 * M * np.log(2 * np.pi))
             - 0.5 * eta * q1 + 0.5 * rho * eta ** 2 / denom * q2)
    d_eta = n * (0.5 * M / eta - 0.5 * M * rho / denom) - 0.5 * q1 + 0.5 * q2 * rho * eta * (2 + M * rho * eta) / denom ** 2
    d_rho = -0.5 * n * M * eta / denom + 0.5 * q2 * eta ** 2 / denom ** 2
    return float(value), float(d_eta), float(d_rho)


class LinearMixedModel(OutcomeModel):
    """
    Linear mixed outcome model.

    Attributes:
        beta: mapping k -> coefficients over FeatureSpec.outcome_design
        eta: mapping k -> residual precision
        rho: mapping k -> random-effect variance
        features: design specification
        fit_info: mapping k -> fit summary
    """

    name = 'linear_mixed'

    def __init__(
        self,
        beta: Mapping[int, np.ndarray],
        eta: Mapping[int, float],
        rho: Mapping[int, float],
        features: Optional[FeatureSpec] = None,
        fit_info: Optional[Mapping[int, dict]] = None,
    ):
        self.beta = {int(k): np.asarray(b, dtype=float) for k, b in beta.items()}
        self.eta = {int(k): float(v) for k, v in eta.items()}
        self.rho = {int(k): float(v) for k, v in rho.items()}
        for k, v in self.eta.items():
            if not v > 0:
                raise DomainError(f"residual precision for type {k} must be positive, got {v}")
        self.features = features or FeatureSpec()
        self.fit_info = dict(fit_info or {})

    def predict_table(self, x, k, assignments=None):
        if k not in self.beta:
            raise ConfigurationError(f"outcome model has no parameters for cluster type {k}")
        if assignments is None:
            assignments = enumerate_assignments(x.shape[0])
        design = self.features.outcome_design(assignments, x)
        beta = self.beta[k]
        if design.shape[-1] != beta.size:
            raise ConfigurationError(
                f"type {k}: outcome design has {design.shape[-1]} columns but beta has {beta.size}"
            )
        return design @ beta

    def to_dict(self) -> dict:
        return {
            "kind": self.name,
            "beta": {str(k): b.tolist() for k, b in sorted(self.beta.items())},
            "eta": {str(k): v for k, v in sorted(self.eta.items())},
            "rho": {str(k): v for k, v in sorted(self.rho.items())},
            "fit_info": {str(k): info for k, info in sorted(self.fit_info.items())},
        }


def _check_rank(design: np.ndarray, names: List[str], label: str):
    """Pivoted QR rank check; raises DesignError naming the dropped columns."""
    _, r, pivots = qr(design, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    if not diag.size:
        return
    threshold = diag[0] * max(design.shape) * np.finfo(float).eps * 1e3
    rank = int(np.sum(diag > threshold))
    if rank < design.shape[1]:
        collinear = [names[i] if i < len(names) else f"column {i}" for i in pivots[rank:]]
        raise DesignError(f"type {label}: outcome design is rank deficient", columns=collinear)


def _gls(eta: float, rho: float, blocks) -> Tuple[np.ndarray, np.ndarray]:
    """beta = (sum H^T S^{-1} H)^{-1} sum H^T S^{-1} Y, and the information matrix."""
    p = blocks[0][0].shape[-1]
    info = np.zeros((p, p))
    score = np.zeros(p)
    for H, Y in blocks:
        M = H.shape[1]
        c = rho * eta ** 2 / (1.0 + M * rho * eta)
        h1 = H.sum(axis=1)
        info += eta * np.einsum('nmp,nmq->pq', H, H) - c * h1.T @ h1
        score += eta * np.einsum('nmp,nm->p', H, Y) - c * h1.T @ Y.sum(axis=1)
    return np.linalg.solve(info, score), info


def _hessian(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    jac = np.atleast_2d(approx_fprime(x, grad_fn))
    return 0.5 * (jac + jac.T)


def _fit_linear_group(
    label: str,
    clusters,
    features: FeatureSpec,
    opts: LinearMixedFitOptions,
) -> Tuple[np.ndarray, float, float, dict]:
    by_size: Dict[int, list] = {}
    for c in clusters:
        by_size.setdefault(c.size, []).append(c)
    blocks = [
        (np.stack([features.outcome_design(c.a, c.x) for c in group]), np.stack([c.y for c in group]))
        for _, group in sorted(by_size.items())
    ]
    n = len(clusters)
    if n < 2:
        raise EstimationError(f"type {label}: linear mixed model needs at least 2 clusters, got {n}")
    d = clusters[0].covariate_dim
    flat_h = np.concatenate([H.reshape(-1, H.shape[-1]) for H, _ in blocks])
    _check_rank(flat_h, features.outcome_names(d), label)
    m_star = max(by_size)

    def unpack(theta: np.ndarray) -> Tuple[float, float]:
        eta = float(np.exp(theta[0]))
        return eta, (np.logaddexp(0.0, theta[1]) - 1.0) / (m_star * eta)

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        eta, rho = unpack(theta)
        beta, _ = _gls(eta, rho, blocks)
        value = d_eta = d_rho = 0.0
        for H, Y in blocks:
            v, de, dr = cs_loglik(eta, rho, Y - H @ beta)
            value, d_eta, d_rho = value + v, d_eta + de, d_rho + dr
        # beta is profiled out, so the partial derivatives are the total ones
        d_u = eta * d_eta - rho * d_rho
        d_tau = d_rho * expit(theta[1]) / (m_star * eta)
        return -value / n, -np.array([d_u, d_tau]) / n

    flat_y = np.concatenate([Y.ravel() for _, Y in blocks])
    resid = flat_y - flat_h @ np.linalg.lstsq(flat_h, flat_y, rcond=None)[0]
    x0 = np.array([-np.log(max(np.var(resid), 1e-8)), _SOFTPLUS_ONE])
    def score(theta: np.ndarray) -> np.ndarray:
        return objective(theta)[1]

    result = minimize(
        objective, x0, jac=True, method='trust-exact', hess=lambda theta: _hessian(score, theta),
        options={'gtol': opts.tol, 'maxiter': opts.max_iter},
    )
    value, grad = objective(result.x)
    grad_norm = float(np.max(np.abs(grad)))
    if grad_norm > opts.tol:
        raise ConvergenceError(
            f"type {label}: linear mixed model did not converge in {opts.max_iter} iterations",
            last_iterate=result.x, grad_norm=grad_norm,
        )
    eta, rho = unpack(result.x)
    beta, info_matrix = _gls(eta, rho, blocks)
    info = {
        "log_likelihood": -value * n,
        "iterations": int(result.nit),
        "grad_norm": grad_norm,
        "clusters": n,
    }
    try:
        info["se"] = np.sqrt(np.clip(np.diag(np.linalg.inv(info_matrix)), 0.0, None)).tolist()
        var_params = np.linalg.inv(_hessian(score, result.x) * n)
        info["variance_param_se"] = np.sqrt(np.clip(np.diag(var_params), 0.0, None)).tolist()
    except np.linalg.LinAlgError:
        logger.warning(f"type {label}: information matrix is singular; standard errors unavailable")
    return beta, eta, float(rho), info


def fit_linear_mixed(
    data: Dataset,
    opts: Optional[LinearMixedFitOptions] = None,
    features: Optional[FeatureSpec] = None,
    pool_types: bool = False,
    threads: int = 1,
) -> LinearMixedModel:
    """
    Per-type maximum likelihood fit of the linear mixed model.

    beta is profiled by generalized least squares; (eta, rho) are fitted by
    scipy's trust-exact method on (log eta, tau), with a finite-difference
    Hessian of the analytic score and M* rho eta = softplus(tau) - 1, which keeps
    S_k positive definite for every cluster size up to M*.

    Raises:
        DesignError: rank-deficient design, naming the collinear columns
        ConvergenceError: gradient tolerance not reached
    """
    opts = opts or LinearMixedFitOptions()
    features = features or FeatureSpec(names=tuple(data.covariate_names))
    if pool_types:
        groups = {'pooled': (data.type_labels, list(data.clusters))}
    else:
        groups = {str(k): ([k], data.clusters_of_type(k)) for k in data.type_labels}

    fitted = Parallel(n_jobs=min(threads, len(groups)), prefer='threads')(
        delayed(_fit_linear_group)(label, clusters, features, opts) for label, (_, clusters) in groups.items()
    )
    beta, eta, rho, info = {}, {}, {}, {}
    for (label, (types, _)), (b, e, r, fit_info) in zip(groups.items(), fitted):
        log_event(logger, 'FIT_RESULT', {"model": "linear_mixed", "group": label, "eta": e, "rho": r, **fit_info})
        for k in types:
            beta[k], eta[k], rho[k], info[k] = b, e, r, fit_info
    return LinearMixedModel(beta, eta, rho, features, info)


# Nadaraya-Watson

@dataclass(frozen=True)
class _TypeReference:
    """Unit-level training rows of one cluster type."""
    size: int
    own_a: np.ndarray        # (n M,)
    pattern: np.ndarray      # (n M,) peer-treatment pattern index
    y: np.ndarray            # (n M,)
    own_x: np.ndarray        # (n M, d)
    peer_x: np.ndarray       # (n M, M - 1, d), or (n M, 1, d) when symmetrized
    fold_mean: Tuple[float, float]
    type_mean: float


def _peer_positions(M: int) -> np.ndarray:
    return np.array([[l for l in range(M) if l != j] for j in range(M)], dtype=int).reshape(M, max(M - 1, 0))


def _peer_patterns(a: np.ndarray, symmetrize: bool) -> np.ndarray:
    """(..., M) pattern index of a_(-j) for every position j."""
    M = a.shape[-1]
    peers = a[..., _peer_positions(M)]
    if symmetrize:
        return peers.sum(axis=-1).astype(int)
    return (peers.astype(int) << np.arange(M - 1)).sum(axis=-1)


def _peer_values(x: np.ndarray, symmetrize: bool) -> np.ndarray:
    """(..., M, M-1, d) peer covariates, or (..., M, 1, d) peer means."""
    M = x.shape[-2]
    peers = x[..., _peer_positions(M), :]
    if symmetrize:
        return peers.mean(axis=-2, keepdims=True) if M > 1 else peers[..., :0, :]
    return peers


class KernelModel(OutcomeModel):
    """
    Nadaraya-Watson regression with mixed continuous/discrete kernels.

    Training units of type k are pooled across positions; a training unit
    contributes to the prediction for unit j only when its own treatment
    equals a_j.
    """

    name = 'kernel'

    def __init__(
        self,
        reference: Mapping[int, _TypeReference],
        h_c: float,
        h_d: float,
        continuous: np.ndarray,
        symmetrize_peers: bool = False,
        fit_info: Optional[dict] = None,
    ):
        if not h_c > 0:
            raise DomainError(f"h_c must be positive, got {h_c}")
        if not 0.0 <= h_d <= 1.0:
            raise DomainError(f"h_d must lie in [0, 1], got {h_d}")
        self.reference = dict(reference)
        self.h_c = float(h_c)
        self.h_d = float(h_d)
        self.continuous = np.asarray(continuous, dtype=bool)
        self.symmetrize_peers = symmetrize_peers
        self.fit_info = dict(fit_info or {})
        self._fallbacks: Counter = Counter()
        self._lock = threading.Lock()

    def _log_kernel_parts(self, ref: _TypeReference, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Covariate part of the log-kernel for every query position.

        Returns:
            (continuous log-kernel (M, nM), discrete mismatch counts (M, nM))
        """
        cont, disc = self.continuous, ~self.continuous
        q_peers = _peer_values(x, self.symmetrize_peers)          # (M, P, d)
        own_diff = x[:, None, :] - ref.own_x[None, :, :]           # (M, nM, d)
        peer_diff = q_peers[:, None] - ref.peer_x[None]            # (M, nM, P, d)
        sq = np.sum(own_diff[..., cont] ** 2, axis=-1) + np.sum(peer_diff[..., cont] ** 2, axis=(-2, -1))
        mismatches = (np.sum(own_diff[..., disc] != 0, axis=-1)
                      + np.sum(peer_diff[..., disc] != 0, axis=(-2, -1)))
        return -0.5 * sq / self.h_c ** 2, mismatches

    def _pattern_kernel(self, M: int, h_d: float) -> np.ndarray:
        if self.symmetrize_peers:
            return np.where(np.eye(M, dtype=bool), 1.0, h_d)
        codes = np.arange(2 ** (M - 1))
        distance = np.array([[bin(q ^ p).count('1') for p in codes] for q in codes])
        return h_d ** distance

    def _sums(self, ref: _TypeReference, cont: np.ndarray, mismatches: np.ndarray, h_d: float):
        """Kernel-weighted sums of y and of 1 per (position, own treatment, peer pattern)."""
        M = ref.size
        n_patterns = M if self.symmetrize_peers else 2 ** (M - 1)
        with np.errstate(divide='ignore', invalid='ignore'):
            log_w = cont + np.where(mismatches > 0, mismatches * np.log(h_d), 0.0)
        s_y = np.zeros((M, 2, n_patterns))
        s_1 = np.zeros((M, 2, n_patterns))
        for own in (0, 1):
            mask = ref.own_a == own
            if not mask.any():
                continue
            group = log_w[:, mask]
            top = np.max(group, axis=1, keepdims=True)
            top = np.where(np.isfinite(top), top, 0.0)
            w = np.exp(group - top)
            patterns = ref.pattern[mask]
            for j in range(M):
                s_y[j, own] = np.bincount(patterns, weights=w[j] * ref.y[mask], minlength=n_patterns)
                s_1[j, own] = np.bincount(patterns, weights=w[j], minlength=n_patterns)
        hd = self._pattern_kernel(M, h_d)
        # (M, 2, query pattern)
        return s_y @ hd.T, s_1 @ hd.T

    def predict_table(self, x, k, assignments=None):
        ref = self.reference.get(k)
        if ref is None:
            raise EstimationError(f"kernel model has no training clusters of type {k}")
        x = np.asarray(x, dtype=float)
        M = ref.size
        if assignments is None:
            assignments = enumerate_assignments(M)
        a = assignments.astype(int)
        positions = np.arange(M)
        q_pattern = _peer_patterns(a, self.symmetrize_peers)     # (T, M)
        cont, mismatches = self._log_kernel_parts(ref, x)

        num, den = self._sums(ref, cont, mismatches, self.h_d)
        top = num[positions, a, q_pattern]
        bottom = den[positions, a, q_pattern]
        out = np.full(a.shape, np.nan)
        ok = bottom > 0
        out[ok] = top[ok] / bottom[ok]

        if not ok.all():
            widened = np.sqrt(self.h_d)
            num, den = self._sums(ref, cont, mismatches, widened)
            top = num[positions, a, q_pattern]
            bottom = den[positions, a, q_pattern]
            retry = ~ok & (bottom > 0)
            out[retry] = top[retry] / bottom[retry]
            self._count('widened', int(retry.sum()))
            rest = ~ok & ~retry
            if rest.any():
                means = np.array(ref.fold_mean)[a]
                has_match = ~np.isnan(means)
                out[rest & has_match] = means[rest & has_match]
                out[rest & ~has_match] = ref.type_mean
                self._count('fold_mean', int((rest & has_match).sum()))
                self._count('type_mean', int((rest & ~has_match).sum()))
        return out

    def _count(self, key: str, amount: int):
        if amount:
            with self._lock:
                self._fallbacks[key] += amount

    def diagnostics(self) -> dict:
        with self._lock:
            return {"kernel_fallbacks": dict(self._fallbacks)}

    def to_dict(self) -> dict:
        return {
            "kind": self.name,
            "h_c": self.h_c,
            "h_d": self.h_d,
            "symmetrize_peers": self.symmetrize_peers,
            **self.fit_info,
            **self.diagnostics(),
        }


def _type_reference(clusters, symmetrize: bool) -> _TypeReference:
    A = np.stack([c.a for c in clusters]).astype(int)
    X = np.stack([c.x for c in clusters])
    Y = np.stack([c.y for c in clusters])
    n, M, d = X.shape
    own_a = A.ravel()
    y = Y.ravel()
    fold_mean = tuple(float(y[own_a == v].mean()) if np.any(own_a == v) else float('nan') for v in (0, 1))
    peer_x = _peer_values(X, symmetrize)
    return _TypeReference(
        size=M,
        own_a=own_a,
        pattern=_peer_patterns(A, symmetrize).ravel(),
        y=y,
        own_x=X.reshape(n * M, d),
        peer_x=peer_x.reshape(n * M, peer_x.shape[-2], d),
        fold_mean=fold_mean,
        type_mean=float(y.mean()),
    )


def bandwidths(data: Dataset, continuous: np.ndarray, opts: KernelOptions) -> Tuple[float, float]:
    """
    h_c = c0 sigma_pooled N^{-1/(4+p)} and h_d = min(1, h_c^2).

    With no continuous covariates h_c is unused and h_d = min(1, c0 N^{-1/2}).
    """
    p = int(continuous.sum())
    n = data.N
    if p:
        units = np.concatenate([c.x[:, continuous] for c in data.clusters])
        sigma = float(np.sqrt(np.mean(np.var(units, axis=0, ddof=1)))) if units.shape[0] > 1 else 1.0
        h_c = opts.bandwidth_scale * (sigma if sigma > 0 else 1.0) * n ** (-1.0 / (4 + p))
        h_d = min(1.0, h_c ** 2)
    else:
        h_c = 1.0
        h_d = min(1.0, opts.bandwidth_scale * n ** -0.5)
    if opts.h_c is not None:
        h_c = opts.h_c
    if opts.h_d is not None:
        h_d = opts.h_d
    return h_c, h_d


def fit_nw(data: Dataset, opts: Optional[KernelOptions] = None) -> KernelModel:
    """
    Build a Nadaraya-Watson model over a training fold.

    Args:
        data: training fold; `data.continuous` names the continuous covariates
        opts: bandwidth and peer-representation options

    Returns:
        KernelModel holding the fold's unit-level rows per type
    """
    opts = opts or KernelOptions()
    if data.N == 0:
        raise EstimationError("kernel model needs a nonempty training fold")
    continuous = np.array([name in data.continuous for name in data.covariate_names], dtype=bool)
    h_c, h_d = bandwidths(data, continuous, opts)
    reference = {k: _type_reference(data.clusters_of_type(k), opts.symmetrize_peers) for k in data.type_labels}
    fit_info = {"n_train": data.N, "continuous_covariates": int(continuous.sum())}
    log_event(logger, 'FIT_RESULT', {"model": "kernel", "h_c": h_c, "h_d": h_d, **fit_info})
    return KernelModel(reference, h_c, h_d, continuous, opts.symmetrize_peers, fit_info)


def outcome_from_config(block: dict, data: Dataset) -> Callable[[Dataset], OutcomeModel]:
    """
    Turn an `outcome` config block into a fitter: Dataset -> OutcomeModel.

    {"kind": "linear_mixed", "treatment_interactions": [...], ...}
    {"kind": "kernel", "bandwidth_scale": 1.0, "symmetrize_peers": false}
    {"kind": "zero"}
    """
    kind = block.get('kind')
    if kind == 'zero':
        model = ZeroOutcomeModel()
        return lambda _: model
    if kind == 'linear_mixed':
        opts = LinearMixedFitOptions(tol=float(block.get('tol', 1e-8)), max_iter=int(block.get('max_iter', 100)))
        features = FeatureSpec.from_config(block, data.covariate_names)
        return lambda fold: fit_linear_mixed(fold, opts, features, bool(block.get('pool_types', False)))
    if kind == 'kernel':
        opts = KernelOptions(
            bandwidth_scale=float(block.get('bandwidth_scale', 1.0)),
            symmetrize_peers=bool(block.get('symmetrize_peers', False)),
            h_c=block.get('h_c'),
            h_d=block.get('h_d'),
        )
        return lambda fold: fit_nw(fold, opts)
    raise ConfigurationError(f"unknown outcome kind '{kind}'")

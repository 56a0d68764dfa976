"""
Scenarios

Data-generating processes with closed-form truths:
- GlmmScenario: two cluster types (sizes 3 and 4), logistic mixed treatment
  assignment and a linear mixed outcome with treatment x cluster-covariate
  interactions.
- NoInterferenceScenario: pairs, completely randomized treatment, outcomes
  free of peer treatments.
- SmoothScenario: pairs with a nonlinear regression, for the kernel model.

All generators draw from numpy Generator(Philox) streams seeded through
SeedSequence, so a (scenario, N, seed) triple reproduces the same dataset.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from core.errors import ConfigurationError, DomainError
from core.features import FeatureSpec
from models.cluster_data import ClusterObservation, Dataset, enumerate_assignments
from models.estimands import EstimandSpec

SeedLike = Union[int, np.random.SeedSequence]


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Counter-based generator for an integer seed or a spawned SeedSequence."""
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(sequence))


def _check_probability(value: float, label: str):
    if not 0.0 < value < 1.0:
        raise DomainError(f"{label} must lie in (0, 1), got {value}")


def z_transform(x: np.ndarray) -> np.ndarray:
    """Misspecified covariates: W2 replaced by exp(W2 / 2); C and W1 kept."""
    z = np.array(x, dtype=float, copy=True)
    z[..., 2] = np.exp(z[..., 2] / 2.0)
    return z


# GLMM study

GLMM_COVARIATES = ('C', 'W1', 'W2')
GLMM_CONTINUOUS = ('C', 'W2')


@dataclass(frozen=True)
class GlmmScenario:
    """
    Two-type GLMM design.

    Attributes:
        p1: probability of type 1
        sizes: k -> cluster size
        beta_e: k -> propensity coefficients over [1, W_j1, W_j2, peer sums of W1, W2]
        lambda_b: precision of the treatment random intercept (variance 0.25)
        beta_g: k -> outcome coefficients over
            [1, A_j, S_j, A_j C, S_j C, C, W_j1, W_j2, peer sums of W1, W2]
        xi_var: variance of the outcome random effect
        eps_var: residual variance
    """
    p1: float = 0.75
    sizes: Mapping[int, int] = field(default_factory=lambda: {1: 3, 2: 4})
    beta_e: Mapping[int, Tuple[float, ...]] = field(default_factory=lambda: {
        1: (-1.25, 2.0, 0.3, 0.2, 0.1),
        2: (-1.0, 1.25, 0.2, 0.15, 0.1),
    })
    lambda_b: float = 4.0
    beta_g: Mapping[int, Tuple[float, ...]] = field(default_factory=lambda: {
        1: (2.0, 3.0, 0.8, 1.0, 0.5, 0.8, -1.0, 0.5, -0.3, 0.15),
        2: (1.0, 2.0, 0.4, 0.5, 0.3, 0.6, -0.8, 0.4, -0.2, 0.1),
    })
    xi_var: float = 0.1
    eps_var: float = 1.0

    name = 'glmm'

    def __post_init__(self):
        _check_probability(self.p1, 'p1')
        if set(self.sizes) != {1, 2}:
            raise ConfigurationError("GLMM scenario has exactly the cluster types 1 and 2")
        for k in self.sizes:
            if len(self.beta_e[k]) != 5 or len(self.beta_g[k]) != 10:
                raise ConfigurationError(f"type {k}: expected 5 propensity and 10 outcome coefficients")

    @property
    def type_probabilities(self) -> Dict[int, float]:
        return {1: self.p1, 2: 1.0 - self.p1}

    @staticmethod
    def propensity_features() -> FeatureSpec:
        return FeatureSpec(own=(1, 2), peers=(1, 2), names=GLMM_COVARIATES)

    @staticmethod
    def outcome_features() -> FeatureSpec:
        return FeatureSpec(
            own=(0, 1, 2), peers=(1, 2),
            own_treatment_interactions=(0,), peer_treatment_interactions=(0,),
            names=GLMM_COVARIATES,
        )

    def _draw(self, n: int, seed: SeedLike) -> Tuple[np.ndarray, Dict[int, dict]]:
        """Types first, then per type covariates, intercepts, treatments and outcomes."""
        rng = make_rng(seed)
        labels = np.where(rng.random(n) < self.p1, 1, 2)
        draws: Dict[int, dict] = {}
        for k in (1, 2):
            n_k = int(np.sum(labels == k))
            M = self.sizes[k]
            c = rng.standard_normal(n_k)
            x = np.stack([
                np.repeat(c[:, None], M, axis=1),
                rng.binomial(1, 0.5, size=(n_k, M)).astype(float),
                rng.standard_normal((n_k, M)),
            ], axis=-1)
            b = rng.normal(0.0, 1.0 / math.sqrt(self.lambda_b), size=n_k)
            logits = self.propensity_features().propensity_features(x) @ np.asarray(self.beta_e[k]) + b[:, None]
            a = (rng.random((n_k, M)) < expit(logits)).astype(np.int8)
            xi = rng.normal(0.0, math.sqrt(self.xi_var), size=n_k)
            eps = rng.normal(0.0, math.sqrt(self.eps_var), size=(n_k, M))
            draws[k] = {"x": x, "a": a, "xi": xi, "eps": eps}
        return labels, draws

    def mean_outcome(self, a: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
        """E[Y | A = a, X = x, L = k]."""
        return self.outcome_features().outcome_design(a, x) @ np.asarray(self.beta_g[k])

    def simulate(self, n: int, seed: SeedLike) -> Dataset:
        return simulate_glmm(self, n, seed)

    def de_truth(self, alpha: float) -> float:
        """sum_k p_k beta_g,k[A_j]; the A_j C terms vanish because E[C] = 0."""
        _check_probability(alpha, 'alpha')
        return math.fsum(p * self.beta_g[k][1] for k, p in self.type_probabilities.items())

    def ie_truth(self, alpha: float, alpha_prime: float) -> float:
        """sum_k p_k (M_k - 1)(alpha - alpha') beta_g,k[S_j]."""
        _check_probability(alpha, 'alpha')
        _check_probability(alpha_prime, 'alpha_prime')
        return math.fsum(
            p * (self.sizes[k] - 1) * (alpha - alpha_prime) * self.beta_g[k][2]
            for k, p in self.type_probabilities.items()
        )

    def truth(self, kind: str, alpha: float, alpha_prime: Optional[float] = None) -> float:
        if kind == 'DE':
            return self.de_truth(alpha)
        if kind == 'IE':
            return self.ie_truth(alpha, alpha_prime)
        raise ConfigurationError(f"no closed-form truth for estimand '{kind}'")


def simulate_glmm(scenario: GlmmScenario, n: int, seed: SeedLike) -> Dataset:
    """
    Draw n clusters from the GLMM design.

    Returns:
        Dataset with covariates (C, W1, W2); C is constant within a cluster
    """
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    labels, draws = scenario._draw(n, seed)
    clusters = [None] * n
    for k in (1, 2):
        d = draws[k]
        beta = np.asarray(scenario.beta_g[k])
        design = scenario.outcome_features().outcome_design(d["a"], d["x"]) if d["a"].size else None
        for row, i in enumerate(np.flatnonzero(labels == k)):
            y = design[row] @ beta + d["xi"][row] + d["eps"][row]
            clusters[i] = ClusterObservation(str(i + 1), k, y, d["a"][row], d["x"][row])
    return Dataset.from_clusters(clusters, GLMM_COVARIATES, GLMM_CONTINUOUS)


def potential_outcome_truth(
    scenario: GlmmScenario,
    spec: EstimandSpec,
    n: int,
    seed: SeedLike,
) -> Tuple[float, float]:
    """
    Monte-Carlo value of tau from simulated potential outcomes.

    Every drawn cluster contributes sum_a w(a)^T Y(a) with
    Y(a) = H(a)^T beta + xi + eps; the mean over clusters estimates
    sum_k p_k theta_k for estimands with v(p) = p.

    Returns:
        (estimate, Monte-Carlo standard error)
    """
    labels, draws = scenario._draw(n, seed)
    values = []
    for k in (1, 2):
        d = draws[k]
        M = scenario.sizes[k]
        assignments = enumerate_assignments(M)
        beta = np.asarray(scenario.beta_g[k])
        for row in range(d["x"].shape[0]):
            x = d["x"][row]
            y_all = (scenario.outcome_features().outcome_design(assignments, x) @ beta
                     + d["xi"][row] + d["eps"][row][None, :])
            values.append(float(np.sum(spec.weight_table(k, x, assignments) * y_all)))
    values = np.asarray(values)
    return math.fsum(values) / values.size, float(np.std(values, ddof=1) / math.sqrt(values.size))


@dataclass(frozen=True)
class GlmmSpecification:
    """
    Nuisance specification of the GLMM study.

    Attributes:
        outcome: 'CO' correct or 'MO' (drops C and its interactions, Z in place of W)
        propensity: 'CP' correct or 'MP' (Z in place of W)
        typing: 'CT' correct, 'OT' (size x 1(C < 1.5)) or 'MT' (one pooled stratum)
    """
    outcome: str = 'CO'
    propensity: str = 'CP'
    typing: str = 'CT'

    def __post_init__(self):
        if self.outcome not in ('CO', 'MO'):
            raise ConfigurationError(f"outcome specification must be CO or MO, got {self.outcome}")
        if self.propensity not in ('CP', 'MP'):
            raise ConfigurationError(f"propensity specification must be CP or MP, got {self.propensity}")
        if self.typing not in ('CT', 'OT', 'MT'):
            raise ConfigurationError(f"typing specification must be CT, OT or MT, got {self.typing}")

    @classmethod
    def parse(cls, text: str) -> 'GlmmSpecification':
        """'CO,CP,CT' in any order."""
        parts = [p.strip().upper() for p in text.split(',') if p.strip()]
        outcome = [p for p in parts if p in ('CO', 'MO')]
        propensity = [p for p in parts if p in ('CP', 'MP')]
        typing = [p for p in parts if p in ('CT', 'OT', 'MT')]
        if len(parts) != 3 or len(outcome) != 1 or len(propensity) != 1 or len(typing) != 1:
            raise ConfigurationError(f"specification must name one of each of CO/MO, CP/MP, CT/OT/MT: '{text}'")
        return cls(outcome[0], propensity[0], typing[0])

    @property
    def label(self) -> str:
        return f"{self.outcome},{self.propensity},{self.typing}"

    @property
    def pool_types(self) -> bool:
        return self.typing == 'MT'

    def propensity_features(self) -> FeatureSpec:
        base = GlmmScenario.propensity_features()
        if self.propensity == 'MP':
            return FeatureSpec(own=base.own, peers=base.peers, transform=z_transform, names=base.names)
        return base

    def outcome_features(self) -> FeatureSpec:
        if self.outcome == 'MO':
            return FeatureSpec(own=(1, 2), peers=(1, 2), transform=z_transform, names=GLMM_COVARIATES)
        return GlmmScenario.outcome_features()

    def prepare(self, data: Dataset) -> Dataset:
        """Apply the typing specification to a simulated dataset."""
        if self.typing != 'OT':
            return data
        sizes = sorted({c.size for c in data.clusters})
        return data.relabel(lambda c: 2 * sizes.index(c.size) + (1 if c.x[0, 0] < 1.5 else 2))


# No-interference study

@dataclass(frozen=True)
class NoInterferenceScenario:
    """
    Pairs with Y_j = 1 + 3 A_j + 2 X_j + 0.5 X_(-j) + eps, X ~ N(0, 1), A ~ Bernoulli(p_A).
    """
    p_A: float = 0.5
    beta: Tuple[float, float, float, float] = (1.0, 3.0, 2.0, 0.5)
    eps_var: float = 1.0

    name = 'noint'

    def __post_init__(self):
        _check_probability(self.p_A, 'p_A')

    @property
    def ate(self) -> float:
        return self.beta[1]

    def simulate(self, n: int, seed: SeedLike) -> Dataset:
        return simulate_noint(self.p_A, n, seed, self)

    def truth(self, kind: str, alpha: float, alpha_prime: Optional[float] = None) -> float:
        if kind == 'DE':
            return self.ate
        if kind == 'IE':
            return 0.0
        raise ConfigurationError(f"no closed-form truth for estimand '{kind}'")


def simulate_noint(
    p_A: float,
    n: int,
    seed: SeedLike,
    scenario: Optional[NoInterferenceScenario] = None,
) -> Dataset:
    """Draw n pairs from the no-interference design."""
    _check_probability(p_A, 'p_A')
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    scenario = scenario or NoInterferenceScenario(p_A=p_A)
    rng = make_rng(seed)
    x = rng.standard_normal((n, 2))
    a = (rng.random((n, 2)) < p_A).astype(np.int8)
    eps = rng.normal(0.0, math.sqrt(scenario.eps_var), size=(n, 2))
    b0, b_a, b_own, b_peer = scenario.beta
    y = b0 + b_a * a + b_own * x + b_peer * x[:, ::-1] + eps
    clusters = [ClusterObservation(str(i + 1), 1, y[i], a[i], x[i][:, None]) for i in range(n)]
    return Dataset.from_clusters(clusters, ('X',), ('X',))


def theoretical_de_variance(alpha: float, p_A: float) -> float:
    """
    Variance bound of the direct-effect estimator under no interference:
    1/2 {(1 - alpha)^2 / (1 - p)^2 + (alpha^2 + (1 - alpha)^2) / (p (1 - p)) + alpha^2 / p^2}.
    """
    _check_probability(alpha, 'alpha')
    _check_probability(p_A, 'p_A')
    p = p_A
    return 0.5 * ((1 - alpha) ** 2 / (1 - p) ** 2
                  + (alpha ** 2 + (1 - alpha) ** 2) / (p * (1 - p))
                  + alpha ** 2 / p ** 2)


def seb_ate(p_A: float) -> float:
    """Semiparametric efficiency bound of the average treatment effect, 1 / (2 p (1 - p))."""
    _check_probability(p_A, 'p_A')
    return 1.0 / (2.0 * p_A * (1.0 - p_A))


# Smooth nonparametric study

@dataclass(frozen=True)
class SmoothScenario:
    """
    Pairs with Y_j = sin X_j + A_j (1 + X_j / 2) + A_(-j) / 2 + cos(X_(-j)) / 2 + eps.

    DE(alpha) = 1 and IE(alpha, alpha') = (alpha - alpha') / 2.
    """
    p_A: float = 0.5
    eps_var: float = 1.0

    name = 'smooth'

    def __post_init__(self):
        _check_probability(self.p_A, 'p_A')

    def simulate(self, n: int, seed: SeedLike) -> Dataset:
        return simulate_smooth(n, seed, self.p_A, self.eps_var)

    def truth(self, kind: str, alpha: float, alpha_prime: Optional[float] = None) -> float:
        if kind == 'DE':
            return 1.0
        if kind == 'IE':
            return 0.5 * (alpha - alpha_prime)
        raise ConfigurationError(f"no closed-form truth for estimand '{kind}'")


def smooth_regression(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """True g(a, x) of the smooth scenario; a is (..., 2), x is (2, 1)."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(x, dtype=float)[:, 0]
    return np.sin(z) + a * (1 + z / 2) + a[..., ::-1] / 2 + np.cos(z[::-1]) / 2


def simulate_smooth(n: int, seed: SeedLike, p_A: float = 0.5, eps_var: float = 1.0) -> Dataset:
    """Draw n pairs from the smooth design."""
    _check_probability(p_A, 'p_A')
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    rng = make_rng(seed)
    x = rng.standard_normal((n, 2))
    a = (rng.random((n, 2)) < p_A).astype(np.int8)
    eps = rng.normal(0.0, math.sqrt(eps_var), size=(n, 2))
    y = np.sin(x) + a * (1 + x / 2) + a[:, ::-1] / 2 + np.cos(x[:, ::-1]) / 2 + eps
    clusters = [ClusterObservation(str(i + 1), 1, y[i], a[i], x[i][:, None]) for i in range(n)]
    return Dataset.from_clusters(clusters, ('X',), ('X',))


def build_scenario(name: str, p_A: float = 0.5) -> Union[GlmmScenario, NoInterferenceScenario, SmoothScenario]:
    if name == 'glmm':
        return GlmmScenario()
    if name == 'noint':
        return NoInterferenceScenario(p_A=p_A)
    if name == 'smooth':
        return SmoothScenario(p_A=p_A)
    raise ConfigurationError(f"unknown scenario '{name}' (expected glmm, noint or smooth)")

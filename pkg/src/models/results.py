"""
Results

Records produced by the estimators and the Monte-Carlo harness.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Tuple

import numpy as np

from .cluster_data import TypeProportions


@dataclass(frozen=True)
class FoldAssignment:
    """
    Two-fold split of the clusters.

    Attributes:
        fold: mapping cluster position -> fold number (1 or 2)
        seed: seed the split was drawn with
        cluster_ids: identifiers, for reporting
    """
    fold: Mapping[int, int]
    seed: int
    cluster_ids: Tuple[Hashable, ...] = ()

    def indices(self, number: int) -> List[int]:
        """Cluster positions in the given fold, ascending."""
        return sorted(i for i, f in self.fold.items() if f == number)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fold_sizes": [len(self.indices(1)), len(self.indices(2))],
        }


@dataclass
class EstimateResult:
    """
    A point estimate with its influence-function inference.

    Attributes:
        estimand: estimand name
        tau_hat: estimate of tau
        theta_hat: mapping k -> theta_k estimate
        p_hat: type proportions used
        variance: mean squared influence contribution (var / N is the squared SE)
        n: number of clusters
        level: significance level of the interval
        ci: (lo, hi), or None when the variance is unavailable
        contributions: per-cluster influence contributions, in cluster order
        diagnostics: clipping counts, fold info, nuisance fit summaries
    """
    estimand: str
    tau_hat: float
    theta_hat: Dict[int, float]
    p_hat: TypeProportions
    variance: Optional[float]
    n: int
    level: float = 0.05
    ci: Optional[Tuple[float, float]] = None
    contributions: Optional[np.ndarray] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> Optional[float]:
        if self.variance is None:
            return None
        return math.sqrt(self.variance / self.n)

    @property
    def variance_available(self) -> bool:
        return self.variance is not None

    @property
    def significant(self) -> Optional[bool]:
        """True when the interval excludes zero."""
        if self.ci is None:
            return None
        return not (self.ci[0] <= 0.0 <= self.ci[1])

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "tau": self.tau_hat,
            "se": self.se,
            "ci": list(self.ci) if self.ci is not None else None,
            "level": self.level,
            "n_clusters": self.n,
            "theta_by_type": {str(k): v for k, v in sorted(self.theta_hat.items())},
            "p_by_type": self.p_hat.to_dict(),
            "p_known": self.p_hat.known,
            "diagnostics": self.diagnostics,
        }


@dataclass
class MCResult:
    """
    Monte-Carlo summary for one (scenario, estimand, specification) cell.

    Attributes:
        scenario, estimand, spec: labels
        truth: closed-form value of the estimand
        estimates: per-replicate estimates (failed replicates excluded)
        ses: per-replicate standard errors (NaN when unavailable)
        covered: per-replicate coverage indicators
        failures: replicates excluded after an estimation error
    """
    scenario: str
    estimand: str
    spec: str
    truth: float
    estimates: np.ndarray
    ses: np.ndarray
    covered: np.ndarray
    failures: int = 0

    @property
    def reps(self) -> int:
        return int(self.estimates.size)

    @property
    def bias(self) -> float:
        return math.fsum(self.estimates) / self.reps - self.truth if self.reps else float('nan')

    @property
    def emp_se(self) -> float:
        if self.reps < 2:
            return float('nan')
        mean = math.fsum(self.estimates) / self.reps
        return math.sqrt(math.fsum((self.estimates - mean) ** 2) / (self.reps - 1))

    @property
    def mean_se(self) -> float:
        finite = self.ses[np.isfinite(self.ses)]
        return math.fsum(finite) / finite.size if finite.size else float('nan')

    @property
    def coverage(self) -> float:
        return math.fsum(self.covered.astype(float)) / self.reps if self.reps else float('nan')

    def to_row(self) -> dict:
        return {
            "scenario": self.scenario,
            "estimand": self.estimand,
            "spec": self.spec,
            "bias": self.bias,
            "emp_se": self.emp_se,
            "mean_se": self.mean_se,
            "coverage": self.coverage,
            "reps": self.reps,
            "failures": self.failures,
        }

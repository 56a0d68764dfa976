"""
Estimands

Weight systems (w_k, v_k) defining linear network-effect estimands:
tau = sum_k v_k(p_k) theta_k with theta_k = E[sum_a w_k(a, X)^T g(a, X, k) | L = k].
Built-ins cover the direct effect, the indirect (spillover) effect and the
unit-average potential outcome; generic_spec wraps any user weight table.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np

from core.errors import ConfigurationError, DomainError
from .cluster_data import enumerate_assignments, peer_policy_weights

WeightFn = Callable[[int, np.ndarray, np.ndarray], np.ndarray]
PopulationFn = Callable[[float, int], float]


def _identity(p: float, k: int) -> float:
    return p


def _one(p: float, k: int) -> float:
    return 1.0


@dataclass(frozen=True)
class PolicyAllocation:
    """
    Per-type alpha-policies.

    Attributes:
        alpha: mapping k -> treatment probability of the target policy
        alpha_prime: mapping k -> probability of the reference policy (IE only)
    """
    alpha: Mapping[int, float]
    alpha_prime: Optional[Mapping[int, float]] = None

    def __post_init__(self):
        object.__setattr__(self, 'alpha', {int(k): float(v) for k, v in self.alpha.items()})
        if self.alpha_prime is not None:
            object.__setattr__(self, 'alpha_prime', {int(k): float(v) for k, v in self.alpha_prime.items()})
        for label, table in (('alpha', self.alpha), ('alpha_prime', self.alpha_prime or {})):
            for k, value in table.items():
                if not 0.0 < value < 1.0:
                    raise DomainError(f"{label} for type {k} must lie in (0, 1), got {value}")

    @classmethod
    def broadcast(
        cls, alpha: float, types: Iterable[int], alpha_prime: Optional[float] = None
    ) -> 'PolicyAllocation':
        """Same alpha (and alpha') for every type."""
        types = list(types)
        return cls(
            alpha={k: alpha for k in types},
            alpha_prime=None if alpha_prime is None else {k: alpha_prime for k in types},
        )

    def alpha_for(self, k: int) -> float:
        if k not in self.alpha:
            raise ConfigurationError(f"no alpha configured for cluster type {k}")
        return self.alpha[k]

    def alpha_prime_for(self, k: int) -> float:
        if self.alpha_prime is None or k not in self.alpha_prime:
            raise ConfigurationError(f"no alpha_prime configured for cluster type {k}")
        return self.alpha_prime[k]

    def check_types(self, types: Iterable[int]):
        """Every data type has an alpha and no alpha refers to an absent type."""
        types = set(types)
        for label, table in (('alpha', self.alpha), ('alpha_prime', self.alpha_prime)):
            if table is None:
                continue
            extra = sorted(set(table) - types)
            if extra:
                raise ConfigurationError(f"{label} references cluster type(s) {extra} absent from the data")
            missing = sorted(types - set(table))
            if missing:
                raise ConfigurationError(f"{label} missing for cluster type(s) {missing}")

    def to_dict(self) -> dict:
        data = {"alpha": {str(k): v for k, v in sorted(self.alpha.items())}}
        if self.alpha_prime is not None:
            data["alpha_prime"] = {str(k): v for k, v in sorted(self.alpha_prime.items())}
        return data


@dataclass(frozen=True)
class EstimandSpec:
    """
    A member of the estimand family.

    Attributes:
        name: label used in outputs
        weight_fn: (k, assignments (T, M), x (M, d)) -> weights (T, M)
        v: population weight v_k(p), called as v(p, k)
        v_prime: derivative of v_k, called as v_prime(p, k)
        allocation: policy allocation for built-in estimands
    """
    name: str
    weight_fn: WeightFn
    v: PopulationFn = _identity
    v_prime: PopulationFn = _one
    allocation: Optional[PolicyAllocation] = field(default=None, compare=False)

    def weight_table(self, k: int, x: np.ndarray, assignments: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Weights w_k(a, x) for every enumerated assignment of a type-k cluster.

        Raises:
            ConfigurationError: weights undefined or not finite
        """
        if assignments is None:
            assignments = enumerate_assignments(x.shape[0])
        table = np.asarray(self.weight_fn(k, assignments, x), dtype=float)
        if table.shape != assignments.shape:
            raise ConfigurationError(
                f"estimand '{self.name}' returned weights of shape {table.shape}, expected {assignments.shape}"
            )
        if not np.isfinite(table).all():
            raise ConfigurationError(f"estimand '{self.name}' produced non-finite weights for type {k}")
        return table

    def w(self, a: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
        """Weight vector for a single assignment."""
        a = np.asarray(a, dtype=np.int8).reshape(1, -1)
        return self.weight_table(k, x, a)[0]

    def population_weight(self, p: float, k: int) -> Tuple[float, float]:
        """(v_k(p), v_k'(p))."""
        return float(self.v(p, k)), float(self.v_prime(p, k))


def de_spec(alloc: PolicyAllocation) -> EstimandSpec:
    """
    Direct effect DE(alpha).

    w_j(a) = {1(a_j=1) - 1(a_j=0)} pi(a_(-j); alpha_k) / M_k, v(p) = p.
    """
    def weights(k: int, assignments: np.ndarray, x: np.ndarray) -> np.ndarray:
        M = assignments.shape[1]
        sign = 2.0 * assignments - 1.0
        return sign * peer_policy_weights(assignments, alloc.alpha_for(k)) / M

    return EstimandSpec(name='DE', weight_fn=weights, allocation=alloc)


def ie_spec(alloc: PolicyAllocation) -> EstimandSpec:
    """
    Indirect (spillover) effect IE(alpha, alpha').

    w_j(a) = 1(a_j=0) {pi(a_(-j); alpha_k) - pi(a_(-j); alpha'_k)} / M_k, v(p) = p.
    """
    if alloc.alpha_prime is None:
        raise ConfigurationError("indirect effect requires alpha_prime for every type")

    def weights(k: int, assignments: np.ndarray, x: np.ndarray) -> np.ndarray:
        M = assignments.shape[1]
        untreated = (assignments == 0).astype(float)
        diff = (
            peer_policy_weights(assignments, alloc.alpha_for(k))
            - peer_policy_weights(assignments, alloc.alpha_prime_for(k))
        )
        return untreated * diff / M

    return EstimandSpec(name='IE', weight_fn=weights, allocation=alloc)


def mean_outcome_spec(alloc: PolicyAllocation, treatment: int) -> EstimandSpec:
    """
    Unit-average potential outcome psi(a, alpha).

    w_j(a) = 1(a_j = treatment) pi(a_(-j); alpha_k) / M_k, v(p) = p.
    """
    if treatment not in (0, 1):
        raise DomainError(f"treatment must be 0 or 1, got {treatment}")

    def weights(k: int, assignments: np.ndarray, x: np.ndarray) -> np.ndarray:
        M = assignments.shape[1]
        match = (assignments == treatment).astype(float)
        return match * peer_policy_weights(assignments, alloc.alpha_for(k)) / M

    return EstimandSpec(name=f'PO({treatment})', weight_fn=weights, allocation=alloc)


PopulationArg = Union[Callable[[float], float], Mapping[int, Callable[[float], float]]]


def _per_type(fn: PopulationArg, label: str) -> PopulationFn:
    if isinstance(fn, Mapping):
        table = {int(k): f for k, f in fn.items()}

        def lookup(p: float, k: int) -> float:
            if k not in table:
                raise ConfigurationError(f"{label} undefined for cluster type {k}")
            return table[k](p)
        return lookup
    return lambda p, k: fn(p)


def generic_spec(
    w_table: Union[Mapping[Tuple[int, Tuple[int, ...]], Callable[[np.ndarray], np.ndarray]],
                   Callable[[int, np.ndarray, np.ndarray], np.ndarray]],
    v: PopulationArg = lambda p: p,
    v_prime: PopulationArg = lambda p: 1.0,
    name: str = 'generic',
) -> EstimandSpec:
    """
    Wrap a user weight system.

    Args:
        w_table: mapping (k, a as tuple of bits) -> function of x returning the
            weight vector, or a callable (k, a, x) -> weight vector
        v: population weight, one function or a mapping k -> function
        v_prime: derivative of v, same form as v
        name: label used in outputs

    Returns:
        EstimandSpec evaluating the table row by row; undefined (k, a) pairs and
        non-finite weights raise ConfigurationError on evaluation
    """
    if v is None or v_prime is None:
        raise ConfigurationError("generic estimands need both v and its derivative v_prime")

    def weights(k: int, assignments: np.ndarray, x: np.ndarray) -> np.ndarray:
        rows = []
        for a in assignments:
            if callable(w_table) and not isinstance(w_table, Mapping):
                rows.append(np.asarray(w_table(k, a, x), dtype=float))
                continue
            key = (k, tuple(int(bit) for bit in a))
            if key not in w_table:
                raise ConfigurationError(f"estimand '{name}' has no weight for type {k}, assignment {key[1]}")
            rows.append(np.asarray(w_table[key](x), dtype=float))
        return np.vstack(rows) if rows else np.zeros(assignments.shape)

    return EstimandSpec(
        name=name, weight_fn=weights, v=_per_type(v, 'v'), v_prime=_per_type(v_prime, 'v_prime')
    )


def estimand_from_config(block: dict) -> EstimandSpec:
    """
    Build an estimand from the `estimand` block of a run config.

    Accepted kinds: "DE", "IE", "PO" (with "treatment"), and "generic" with a
    constant weight table {"k": {"bits": [w_1, ..., w_M]}} where "bits" lists
    the assignment with unit 1 first, e.g. "10".
    """
    if not isinstance(block, dict) or 'kind' not in block:
        raise ConfigurationError("estimand block needs a 'kind'")
    kind = str(block['kind']).upper()
    try:
        if kind == 'GENERIC':
            return _generic_from_config(block)
        alloc = PolicyAllocation(
            alpha={int(k): v for k, v in block.get('alpha', {}).items()},
            alpha_prime=(
                {int(k): v for k, v in block['alpha_prime'].items()} if block.get('alpha_prime') else None
            ),
        )
    except (TypeError, ValueError, AttributeError) as e:
        raise ConfigurationError(f"invalid estimand block: {e}")
    if not alloc.alpha:
        raise ConfigurationError("estimand block needs 'alpha' per cluster type")
    if kind == 'DE':
        return de_spec(alloc)
    if kind == 'IE':
        return ie_spec(alloc)
    if kind == 'PO':
        return mean_outcome_spec(alloc, int(block.get('treatment', 1)))
    raise ConfigurationError(f"unknown estimand kind '{block['kind']}'")


def _generic_from_config(block: dict) -> EstimandSpec:
    weights = block.get('weights')
    if not isinstance(weights, dict) or not weights:
        raise ConfigurationError("generic estimand needs a 'weights' table")
    table: Dict[Tuple[int, Tuple[int, ...]], Callable[[np.ndarray], np.ndarray]] = {}
    for k, rows in weights.items():
        for bits, vector in rows.items():
            if any(b not in '01' for b in bits):
                raise ConfigurationError(f"assignment key '{bits}' must be a string of 0/1")
            values = np.asarray(vector, dtype=float)
            table[(int(k), tuple(int(b) for b in bits))] = lambda x, values=values: values
    return generic_spec(table, name=str(block.get('name', 'generic')))

"""
Features

Unit-level feature construction shared by the parametric nuisance models.

Propensity features of unit j:  [1, x_j[own], sum_{l != j} x_l[peers]]
Outcome design h_j(a, x):       [1, a_j, s_j, a_j x_j[oi], s_j x_j[pi], x_j[own], sum_{l != j} x_l[peers]]
where s_j = sum_{l != j} a_l, oi/pi are the own/peer treatment interaction columns.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError

CovariateTransform = Callable[[np.ndarray], np.ndarray]


def peer_sum(values: np.ndarray) -> np.ndarray:
    """out[..., j, :] = sum over l != j of values[..., l, :]."""
    return values.sum(axis=-2, keepdims=True) - values


@dataclass(frozen=True)
class FeatureSpec:
    """
    Which covariate columns enter a parametric nuisance model.

    Attributes:
        own: columns of x_j entering directly (None = all)
        peers: columns whose peer sums enter (None = all)
        own_treatment_interactions: columns interacted with a_j (outcome only)
        peer_treatment_interactions: columns interacted with s_j (outcome only)
        transform: optional map applied to the covariate matrix first
        names: covariate names used in diagnostics
    """
    own: Optional[Tuple[int, ...]] = None
    peers: Optional[Tuple[int, ...]] = None
    own_treatment_interactions: Tuple[int, ...] = ()
    peer_treatment_interactions: Tuple[int, ...] = ()
    transform: Optional[CovariateTransform] = None
    names: Tuple[str, ...] = ()

    @classmethod
    def from_config(cls, block: dict, covariate_names: Sequence[str]) -> 'FeatureSpec':
        """Resolve covariate names from a config block into column indices."""
        index = {name: i for i, name in enumerate(covariate_names)}

        def resolve(key: str, default):
            if key not in block or block[key] is None:
                return default
            unknown = [c for c in block[key] if c not in index]
            if unknown:
                raise ConfigurationError(f"{key} refers to unknown covariates {unknown}")
            return tuple(index[c] for c in block[key])

        return cls(
            own=resolve('own_covariates', None),
            peers=resolve('peer_covariates', None),
            own_treatment_interactions=resolve('treatment_interactions', ()),
            peer_treatment_interactions=resolve('peer_treatment_interactions', ()),
            names=tuple(covariate_names),
        )

    def prepare(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.transform(x) if self.transform is not None else x, dtype=float)

    def _own(self, d: int) -> List[int]:
        return list(range(d)) if self.own is None else list(self.own)

    def _peers(self, d: int) -> List[int]:
        return list(range(d)) if self.peers is None else list(self.peers)

    def _name(self, i: int) -> str:
        return self.names[i] if i < len(self.names) else f"x{i + 1}"

    # propensity side

    def propensity_features(self, x: np.ndarray) -> np.ndarray:
        """(..., M, 1 + |own| + |peers|) features for the logistic model."""
        z = self.prepare(x)
        d = z.shape[-1]
        ones = np.ones(z.shape[:-1] + (1,))
        return np.concatenate([ones, z[..., self._own(d)], peer_sum(z[..., self._peers(d)])], axis=-1)

    def propensity_names(self, d: int) -> List[str]:
        return (['intercept']
                + [self._name(i) for i in self._own(d)]
                + [f"peer_sum:{self._name(i)}" for i in self._peers(d)])

    # outcome side

    def outcome_parts(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Treatment-free pieces of the outcome design for one cluster.

        Returns:
            (static (M, P_s), own_interaction (M, |oi|), peer_interaction (M, |pi|))
            where static = [x_j[own], peer sums]
        """
        z = self.prepare(x)
        d = z.shape[-1]
        static = np.concatenate([z[..., self._own(d)], peer_sum(z[..., self._peers(d)])], axis=-1)
        return (static,
                z[..., list(self.own_treatment_interactions)],
                z[..., list(self.peer_treatment_interactions)])

    def outcome_design(self, a: np.ndarray, x: np.ndarray) -> np.ndarray:
        """
        Design rows h_j(a, x) for one cluster.

        Args:
            a: (M,) or (T, M) treatments
            x: (M, d) covariates, or (T, M, d) with one covariate matrix per row of a

        Returns:
            (M, P) or (T, M, P) design
        """
        a = np.asarray(a, dtype=float)
        static, own_int, peer_int = self.outcome_parts(x)
        s = a.sum(axis=-1, keepdims=True) - a
        lead = a.shape[:-1]
        M = a.shape[-1]

        def tile(block):
            return np.broadcast_to(block, lead + block.shape[-2:])

        ones = np.ones(lead + (M, 1))
        return np.concatenate([
            ones,
            a[..., None],
            s[..., None],
            a[..., None] * tile(own_int),
            s[..., None] * tile(peer_int),
            tile(static),
        ], axis=-1)

    def outcome_names(self, d: int) -> List[str]:
        return (['intercept', 'own_treatment', 'peer_treatment_sum']
                + [f"own_treatment:{self._name(i)}" for i in self.own_treatment_interactions]
                + [f"peer_treatment_sum:{self._name(i)}" for i in self.peer_treatment_interactions]
                + [self._name(i) for i in self._own(d)]
                + [f"peer_sum:{self._name(i)}" for i in self._peers(d)])

    def outcome_dim(self, d: int) -> int:
        return len(self.outcome_names(d))

"""
Cluster Data

Cluster-structured data representation for partial-interference studies:
treatment-vector enumeration, alpha-policy weights, dataset validation,
CSV ingestion and serialization.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Hashable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import CapacityError, ConfigurationError, DataParseError, DomainError
from core.settings import get_settings

logger = logging.getLogger('netfx.' + __name__)


# Treatment enumeration and policy weights

def enumerate_assignments(M: int, cap: Optional[int] = None) -> np.ndarray:
    """
    Enumerate every binary treatment vector of a cluster of size M.

    Row t holds bit j of t in column j, so the first unit varies fastest:
    M=2 gives (0,0), (1,0), (0,1), (1,1).

    Args:
        M: cluster size
        cap: enumeration cap (defaults to the configured NETFX_ENUM_CAP)

    Returns:
        Read-only int8 array of shape (2^M, M)

    Raises:
        CapacityError: if M exceeds the cap
    """
    cap = get_settings().enum_cap if cap is None else cap
    if M < 0:
        raise DomainError(f"cluster size must be non-negative, got {M}")
    if M > cap:
        raise CapacityError(M, cap)
    return _assignment_table(M)


@lru_cache(maxsize=None)
def _assignment_table(M: int) -> np.ndarray:
    t = np.arange(2 ** M, dtype=np.int64)[:, None]
    table = ((t >> np.arange(M, dtype=np.int64)[None, :]) & 1).astype(np.int8)
    table.setflags(write=False)
    return table


def assignment_index(a: Sequence[int]) -> int:
    """Row of `a` in enumerate_assignments(len(a))."""
    return int(sum(int(bit) << j for j, bit in enumerate(a)))


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"policy probability alpha must lie in (0, 1), got {alpha}")


def policy_weight(a_minus_j: Sequence[int], alpha: float) -> float:
    """
    Probability of the peers' treatments under the alpha-policy.

    Args:
        a_minus_j: treatments of the other M-1 units
        alpha: probability that each peer is treated

    Returns:
        prod alpha^a (1-alpha)^(1-a); 1.0 for an empty vector
    """
    _check_alpha(alpha)
    bits = np.asarray(a_minus_j, dtype=np.int64)
    treated = int(bits.sum())
    return float(alpha ** treated * (1.0 - alpha) ** (bits.size - treated))


def peer_policy_weights(assignments: np.ndarray, alpha: float) -> np.ndarray:
    """
    pi(a_(-j); alpha) for every row a and unit j.

    Args:
        assignments: (T, M) binary matrix
        alpha: policy probability

    Returns:
        (T, M) matrix of peer policy weights
    """
    _check_alpha(alpha)
    M = assignments.shape[1]
    peers_treated = assignments.sum(axis=1, keepdims=True) - assignments
    return alpha ** peers_treated * (1.0 - alpha) ** (M - 1 - peers_treated)


# Domain types

@dataclass(frozen=True)
class ClusterObservation:
    """
    One cluster's observed data.

    Attributes:
        cluster_id: identifier from the input
        type_label: cluster type k (1-based)
        y: outcomes, length M
        a: binary treatments, length M
        x: covariates, shape (M, d); row j belongs to unit j
    """
    cluster_id: Hashable
    type_label: int
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        a = np.asarray(self.a).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else np.zeros((y.size, 0))
        if not (y.size == a.size == x.shape[0]):
            raise ValueError(
                f"cluster {self.cluster_id}: y, a and x must have matching rows "
                f"({y.size}, {a.size}, {x.shape[0]})"
            )
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"cluster {self.cluster_id}: treatments must be 0/1")
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise ValueError(f"cluster {self.cluster_id}: missing or non-finite values")
        a = a.astype(np.int8)
        for arr in (y, a, x):
            arr.setflags(write=False)
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'a', a)
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'type_label', int(self.type_label))

    @property
    def size(self) -> int:
        return int(self.y.size)

    @property
    def covariate_dim(self) -> int:
        return int(self.x.shape[1])


@dataclass(frozen=True)
class ClusterTypeInfo:
    """Size, covariate dimension and count of one cluster type."""
    k: int
    size: int
    covariate_dim: int
    count: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"type {self.k}: cluster size must be >= 1")
        if self.count < 1:
            raise ValueError(f"type {self.k}: count must be >= 1")


@dataclass(frozen=True)
class TypeProportions:
    """
    Cluster-type proportions p_k.

    Attributes:
        p_hat: mapping k -> proportion in (0, 1]
        known: True when the proportions are design constants rather than N_k/N
    """
    p_hat: Mapping[int, float]
    known: bool = False

    def __post_init__(self):
        if not self.p_hat:
            raise ConfigurationError("type proportions must not be empty")
        for k, p in self.p_hat.items():
            if not 0.0 < p <= 1.0:
                raise ConfigurationError(f"proportion for type {k} must lie in (0, 1], got {p}")
        total = sum(self.p_hat.values())
        if abs(total - 1.0) > 1e-12:
            raise ConfigurationError(f"type proportions must sum to 1, got {total!r}")

    def to_dict(self) -> dict:
        return {str(k): float(v) for k, v in sorted(self.p_hat.items())}


@dataclass(frozen=True)
class Dataset:
    """
    Immutable collection of independent clusters.

    Attributes:
        clusters: clusters in input order
        types: mapping k -> ClusterTypeInfo
        covariate_names: names of the covariate columns
        continuous: names of covariates treated as continuous by kernel smoothers
    """
    clusters: tuple
    types: Mapping[int, ClusterTypeInfo]
    covariate_names: tuple = ()
    continuous: tuple = ()

    def __post_init__(self):
        counts: Dict[int, int] = {}
        for cluster in self.clusters:
            info = self.types.get(cluster.type_label)
            if info is None:
                raise ValueError(f"cluster {cluster.cluster_id} has unregistered type {cluster.type_label}")
            if cluster.size != info.size or cluster.covariate_dim != info.covariate_dim:
                raise ValueError(
                    f"cluster {cluster.cluster_id} has shape ({cluster.size}, {cluster.covariate_dim}) "
                    f"but type {info.k} expects ({info.size}, {info.covariate_dim})"
                )
            counts[cluster.type_label] = counts.get(cluster.type_label, 0) + 1
        for k, info in self.types.items():
            if counts.get(k, 0) != info.count:
                raise ValueError(f"type {k} registers {info.count} clusters but holds {counts.get(k, 0)}")

    @classmethod
    def from_clusters(
        cls,
        clusters: Sequence[ClusterObservation],
        covariate_names: Sequence[str] = (),
        continuous: Sequence[str] = (),
    ) -> 'Dataset':
        """Build a dataset, deriving the type table from the clusters."""
        types: Dict[int, ClusterTypeInfo] = {}
        counts: Dict[int, int] = {}
        shapes: Dict[int, tuple] = {}
        for cluster in clusters:
            k = cluster.type_label
            shape = (cluster.size, cluster.covariate_dim)
            if shapes.setdefault(k, shape) != shape:
                raise ValueError(
                    f"type {k} mixes cluster shapes {shapes[k]} and {shape} (cluster {cluster.cluster_id})"
                )
            counts[k] = counts.get(k, 0) + 1
        for k in sorted(counts):
            types[k] = ClusterTypeInfo(k=k, size=shapes[k][0], covariate_dim=shapes[k][1], count=counts[k])
        if not covariate_names and clusters:
            covariate_names = tuple(f"x{i + 1}" for i in range(clusters[0].covariate_dim))
        return cls(
            clusters=tuple(clusters),
            types=types,
            covariate_names=tuple(covariate_names),
            continuous=tuple(continuous),
        )

    @property
    def N(self) -> int:
        return len(self.clusters)

    @property
    def type_labels(self) -> List[int]:
        return sorted(self.types)

    def labels(self) -> np.ndarray:
        """Type label of every cluster, in cluster order."""
        return np.array([c.type_label for c in self.clusters], dtype=int)

    def clusters_of_type(self, k: int) -> List[ClusterObservation]:
        return [c for c in self.clusters if c.type_label == k]

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        """Dataset holding the clusters at the given positions (order kept)."""
        return Dataset.from_clusters(
            [self.clusters[i] for i in indices], self.covariate_names, self.continuous
        )

    def relabel(self, label_fn: Callable[[ClusterObservation], int]) -> 'Dataset':
        """Dataset with type labels recomputed by `label_fn` from each cluster."""
        relabelled = [
            ClusterObservation(c.cluster_id, label_fn(c), c.y, c.a, c.x) for c in self.clusters
        ]
        return Dataset.from_clusters(relabelled, self.covariate_names, self.continuous)

    def map_covariates(self, transform: Callable[[np.ndarray], np.ndarray]) -> 'Dataset':
        """Dataset with every cluster's covariate matrix replaced by transform(x)."""
        mapped = [
            ClusterObservation(c.cluster_id, c.type_label, c.y, c.a, transform(c.x)) for c in self.clusters
        ]
        return Dataset.from_clusters(mapped, self.covariate_names, self.continuous)

    def type_proportions(self, known: Optional[Mapping[int, float]] = None) -> TypeProportions:
        """Estimated proportions N_k/N, or the supplied known proportions."""
        if known is not None:
            missing = set(self.types) - set(known)
            if missing:
                raise ConfigurationError(f"known proportions missing for types {sorted(missing)}")
            return TypeProportions({int(k): float(known[k]) for k in self.types}, known=True)
        counts = {k: info.count for k, info in self.types.items()}
        p_hat = {k: n / self.N for k, n in counts.items()}
        # absorb rounding so the proportions sum to one within 1e-12
        last = max(p_hat)
        p_hat[last] = 1.0 - sum(v for k, v in p_hat.items() if k != last)
        return TypeProportions(p_hat, known=False)

    def summary(self) -> dict:
        """Describe the dataset for logs and the validate command."""
        return {
            "clusters": self.N,
            "units": int(sum(c.size for c in self.clusters)),
            "covariates": list(self.covariate_names),
            "continuous": list(self.continuous),
            "types": {
                str(k): {"size": info.size, "covariate_dim": info.covariate_dim, "count": info.count}
                for k, info in sorted(self.types.items())
            },
        }


# Ingestion

@dataclass(frozen=True)
class IngestSchema:
    """
    Column layout of the long-format CSV.

    Attributes:
        cluster_col, unit_col, outcome_col, treatment_col: required columns
        covariates: covariate columns; None means every column not otherwise used
        continuous: covariates smoothed with the continuous kernel; None means
            every covariate that is not binary in the data
        type_col: explicit type column; None derives types from cluster size
    """
    cluster_col: str = 'cluster_id'
    unit_col: str = 'unit_id'
    outcome_col: str = 'y'
    treatment_col: str = 'a'
    covariates: Optional[tuple] = None
    continuous: Optional[tuple] = None
    type_col: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'IngestSchema':
        data = dict(data or {})
        unknown = set(data) - {
            'cluster_col', 'unit_col', 'outcome_col', 'treatment_col', 'covariates', 'continuous', 'type_col'
        }
        if unknown:
            raise ConfigurationError(f"unknown schema keys: {sorted(unknown)}")
        for key in ('covariates', 'continuous'):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def required(self) -> List[str]:
        return [self.cluster_col, self.unit_col, self.outcome_col, self.treatment_col]


def load_dataset(path: str, schema: Optional[IngestSchema] = None, cap: Optional[int] = None) -> Dataset:
    """
    Load a long-format CSV into a validated Dataset.

    Args:
        path: CSV file with header `cluster_id,unit_id,y,a,x1,...,xd[,type]`
        schema: column layout (defaults to the standard names)
        cap: enumeration cap for cluster sizes

    Returns:
        Dataset with clusters in order of first appearance and units ordered by unit_id

    Raises:
        DataParseError: missing columns or values, non-binary treatment,
            inconsistent type labels
        CapacityError: a cluster exceeds the enumeration cap
    """
    schema = schema or IngestSchema()
    cap = get_settings().enum_cap if cap is None else cap
    try:
        frame = pd.read_csv(path, dtype={schema.cluster_col: str})
    except FileNotFoundError:
        raise DataParseError(f"file not found: {path}")
    except pd.errors.ParserError as e:
        raise DataParseError(f"malformed CSV: {e}")
    return dataset_from_frame(frame, schema, cap)


def dataset_from_frame(frame: pd.DataFrame, schema: IngestSchema, cap: Optional[int] = None) -> Dataset:
    """Validate a long-format frame and group it into clusters."""
    cap = get_settings().enum_cap if cap is None else cap
    missing = [c for c in schema.required() if c not in frame.columns]
    if schema.type_col and schema.type_col not in frame.columns:
        missing.append(schema.type_col)
    if missing:
        raise DataParseError(f"missing required columns: {missing}")

    used = set(schema.required()) | ({schema.type_col} if schema.type_col else set())
    if schema.covariates is None:
        covariates = [c for c in frame.columns if c not in used and c != 'type']
    else:
        covariates = list(schema.covariates)
        absent = [c for c in covariates if c not in frame.columns]
        if absent:
            raise DataParseError(f"missing covariate columns: {absent}")

    value_cols = [schema.outcome_col, schema.treatment_col] + covariates
    if schema.type_col:
        value_cols.append(schema.type_col)
    nulls = frame[[schema.cluster_col, schema.unit_col] + value_cols].isna()
    if nulls.values.any():
        pos, col = np.argwhere(nulls.values)[0]
        raise DataParseError("missing value", row=int(pos) + 2, column=nulls.columns[col])

    numeric = {}
    for col in value_cols:
        converted = pd.to_numeric(frame[col], errors='coerce')
        bad = converted.isna()
        if bad.any():
            raise DataParseError(
                f"non-numeric value {frame[col][bad].iloc[0]!r}", row=int(np.flatnonzero(bad)[0]) + 2, column=col
            )
        numeric[col] = converted.to_numpy(dtype=float)

    treatment = numeric[schema.treatment_col]
    non_binary = ~np.isin(treatment, (0.0, 1.0))
    if non_binary.any():
        pos = int(np.flatnonzero(non_binary)[0])
        raise DataParseError(
            f"treatment must be 0 or 1, got {treatment[pos]:g}", row=pos + 2, column=schema.treatment_col
        )

    if schema.continuous is None:
        continuous = [c for c in covariates if not np.isin(numeric[c], (0.0, 1.0)).all()]
    else:
        continuous = list(schema.continuous)
        unknown = [c for c in continuous if c not in covariates]
        if unknown:
            raise ConfigurationError(f"continuous columns {unknown} are not covariates")

    rows = []
    positions = frame.groupby(schema.cluster_col, sort=False).indices
    for cluster_id in pd.unique(frame[schema.cluster_col]):
        idx = np.asarray(positions[cluster_id])
        order = idx[np.argsort(frame[schema.unit_col].to_numpy()[idx], kind='stable')]
        units = frame[schema.unit_col].to_numpy()[order]
        repeated = np.flatnonzero(units[1:] == units[:-1])
        if repeated.size:
            second = int(order[repeated[0] + 1])
            raise DataParseError(
                f"unit {units[repeated[0] + 1]} appears more than once in cluster {cluster_id}",
                row=second + 2, column=schema.unit_col,
            )
        if order.size > cap:
            raise CapacityError(order.size, cap)
        type_label = None
        if schema.type_col:
            labels = numeric[schema.type_col][order]
            if not (labels == labels[0]).all():
                raise DataParseError(
                    f"cluster {cluster_id} has more than one type label", row=int(order[0]) + 2, column=schema.type_col
                )
            if labels[0] != int(labels[0]) or labels[0] < 1:
                raise DataParseError(
                    f"type labels must be positive integers, got {labels[0]:g}",
                    row=int(order[0]) + 2, column=schema.type_col,
                )
            type_label = int(labels[0])
        x = np.column_stack([numeric[c][order] for c in covariates]) if covariates else np.zeros((order.size, 0))
        rows.append((cluster_id, type_label, numeric[schema.outcome_col][order], treatment[order], x, int(order[0])))

    if schema.type_col is None:
        size_labels = {size: k + 1 for k, size in enumerate(sorted({r[2].size for r in rows}))}
        rows = [(cid, size_labels[y.size], y, a, x, first) for cid, _, y, a, x, first in rows]
    else:
        sizes: Dict[int, int] = {}
        for cid, k, y, _, _, first in rows:
            if sizes.setdefault(k, y.size) != y.size:
                raise DataParseError(
                    f"type {k} mixes cluster sizes {sizes[k]} and {y.size} (cluster {cid})", row=first + 2
                )

    clusters = [ClusterObservation(cid, k, y, a, x) for cid, k, y, a, x, _ in rows]
    dataset = Dataset.from_clusters(clusters, covariates, continuous)
    logger.info(f"Loaded {dataset.N} clusters in {len(dataset.types)} types")
    return dataset


def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    """Long-format frame in the standard column layout, with a `type` column."""
    records = []
    for cluster in dataset.clusters:
        for j in range(cluster.size):
            record = {
                'cluster_id': cluster.cluster_id,
                'unit_id': j + 1,
                'y': cluster.y[j],
                'a': int(cluster.a[j]),
            }
            record.update({name: cluster.x[j, i] for i, name in enumerate(dataset.covariate_names)})
            record['type'] = cluster.type_label
            records.append(record)
    columns = ['cluster_id', 'unit_id', 'y', 'a', *dataset.covariate_names, 'type']
    return pd.DataFrame.from_records(records, columns=columns)


def write_dataset(dataset: Dataset, path: str):
    """Write the dataset to CSV; load_dataset with type_col='type' reads it back unchanged."""
    dataset_to_frame(dataset).to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Wrote {dataset.N} clusters to {path}")

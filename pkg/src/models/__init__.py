"""
Models package for netfx.

Cluster-structured data, estimand weight systems, result records and run configuration.
"""

from .cluster_data import ClusterObservation, Dataset, TypeProportions, load_dataset, write_dataset
from .estimands import EstimandSpec, PolicyAllocation, de_spec, ie_spec

__all__ = [
    'ClusterObservation',
    'Dataset',
    'TypeProportions',
    'load_dataset',
    'write_dataset',
    'EstimandSpec',
    'PolicyAllocation',
    'de_spec',
    'ie_spec',
]

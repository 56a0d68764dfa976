"""
Run Configuration

One JSON document per analysis:

    {
      "schema":     {"covariates": ["x1", "x2"], "continuous": ["x2"]},
      "estimand":   {"kind": "DE", "alpha": {"1": 0.5, "2": 0.5}},
      "propensity": {"kind": "known", "prob": {"1": 0.628, "2": 0.449}},
      "outcome":    {"kind": "linear_mixed"},
      "estimator":  {"kind": "crossfit", "seed": 1, "p_known": false, "pool_types": false},
      "level": 0.05,
      "output": {"result": "result.json", "surface": "surface.csv"}
    }
"""

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

from core.errors import ConfigurationError
from .cluster_data import Dataset, IngestSchema, TypeProportions
from .estimands import EstimandSpec, estimand_from_config

ESTIMATOR_KINDS = ('aipw', 'crossfit', 'ipw')
TOP_LEVEL_KEYS = {'schema', 'estimand', 'propensity', 'outcome', 'estimator', 'level', 'output'}


@dataclass(frozen=True)
class EstimatorConfig:
    """
    Attributes:
        kind: 'aipw', 'crossfit' or 'ipw' (AIPW with a zero outcome model)
        seed: fold seed for cross-fitting
        p_known: False, True (treat N_k / N as known) or a mapping k -> known p_k
        pool_types: one pooled stratum
    """
    kind: str = 'aipw'
    seed: int = 0
    p_known: Union[bool, Dict[int, float]] = False
    pool_types: bool = False

    @classmethod
    def from_dict(cls, block: Optional[dict]) -> 'EstimatorConfig':
        block = dict(block or {})
        unknown = set(block) - {'kind', 'seed', 'p_known', 'pool_types'}
        if unknown:
            raise ConfigurationError(f"unknown estimator keys: {sorted(unknown)}")
        kind = block.get('kind', 'aipw')
        if kind not in ESTIMATOR_KINDS:
            raise ConfigurationError(f"estimator.kind must be one of {list(ESTIMATOR_KINDS)}, got '{kind}'")
        p_known = block.get('p_known', False)
        if isinstance(p_known, dict):
            try:
                p_known = {int(k): float(v) for k, v in p_known.items()}
            except (TypeError, ValueError):
                raise ConfigurationError("estimator.p_known must map type labels to numbers")
        elif not isinstance(p_known, bool):
            raise ConfigurationError("estimator.p_known must be a boolean or a mapping")
        try:
            seed = int(block.get('seed', 0))
        except (TypeError, ValueError):
            raise ConfigurationError("estimator.seed must be an integer")
        return cls(kind=kind, seed=seed, p_known=p_known, pool_types=bool(block.get('pool_types', False)))

    def proportions(self, data: Dataset) -> TypeProportions:
        if isinstance(self.p_known, dict):
            return data.type_proportions(known=self.p_known)
        estimated = data.type_proportions()
        return TypeProportions(estimated.p_hat, known=True) if self.p_known else estimated

    def to_dict(self) -> dict:
        p_known = ({str(k): v for k, v in sorted(self.p_known.items())}
                   if isinstance(self.p_known, dict) else self.p_known)
        return {"kind": self.kind, "seed": self.seed, "p_known": p_known, "pool_types": self.pool_types}


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration."""
    estimand: dict
    propensity: dict
    outcome: dict = field(default_factory=lambda: {"kind": "zero"})
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    schema: IngestSchema = field(default_factory=IngestSchema)
    level: float = 0.05
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunConfig':
        if not isinstance(data, dict):
            raise ConfigurationError("run configuration must be a JSON object")
        unknown = set(data) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        for key in ('estimand', 'propensity'):
            if not isinstance(data.get(key), dict):
                raise ConfigurationError(f"configuration needs a '{key}' block")
        try:
            level = float(data.get('level', 0.05))
        except (TypeError, ValueError):
            raise ConfigurationError("level must be a number")
        if not 0.0 < level <= 1.0:
            raise ConfigurationError(f"level must lie in (0, 1], got {level}")
        config = cls(
            estimand=data['estimand'],
            propensity=data['propensity'],
            outcome=data.get('outcome') or {"kind": "zero"},
            estimator=EstimatorConfig.from_dict(data.get('estimator')),
            schema=IngestSchema.from_dict(data.get('schema')),
            level=level,
            output=dict(data.get('output') or {}),
        )
        # fail early on malformed estimand blocks
        config.estimand_spec()
        return config

    @classmethod
    def load(cls, path: str) -> 'RunConfig':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
        return cls.from_dict(data)

    def estimand_spec(self, overrides: Optional[dict] = None) -> EstimandSpec:
        """Estimand built from the config, with optional replacement keys (e.g. a sweep's alpha)."""
        block = dict(self.estimand)
        block.update(overrides or {})
        return estimand_from_config(block)

    def check_against(self, data: Dataset):
        """
        Raises:
            ConfigurationError: a type referenced by the config is absent from
                the data, or a data type has no alpha
        """
        spec = self.estimand_spec()
        if spec.allocation is not None:
            spec.allocation.check_types(data.type_labels)
        prob = self.propensity.get('prob')
        if isinstance(prob, dict):
            extra = sorted({int(k) for k in prob} - set(data.type_labels))
            if extra:
                raise ConfigurationError(f"propensity prob references cluster type(s) {extra} absent from the data")
            missing = sorted(set(data.type_labels) - {int(k) for k in prob})
            if missing:
                raise ConfigurationError(f"propensity prob missing for cluster type(s) {missing}")
        if isinstance(self.estimator.p_known, dict):
            extra = sorted(set(self.estimator.p_known) - set(data.type_labels))
            if extra:
                raise ConfigurationError(f"p_known references cluster type(s) {extra} absent from the data")

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "propensity": self.propensity,
            "outcome": self.outcome,
            "estimator": self.estimator.to_dict(),
            "level": self.level,
            "output": self.output,
        }

"""
Effect Service

Orchestration of an analysis: dataset and config loading, nuisance fitting,
estimation, alpha sweeps, simulation and Monte-Carlo studies. Every CLI
command goes through this service.
"""

import itertools
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from models.cluster_data import Dataset, load_dataset, write_dataset
from models.results import EstimateResult
from models.run_config import RunConfig
from simulation.monte_carlo import (
    MCTarget, glmm_plan, known_design_plan, mc_results_frame, run_mc, variance_curve,
)
from simulation.scenarios import GlmmSpecification, build_scenario
from .errors import ConfigurationError
from .estimators import PrefitNuisances, cross_fit_split, estimate_with_nuisances, fit_fold_nuisances
from .logging_setup import log_event
from .outcome import ZeroOutcomeModel, outcome_from_config
from .propensity import propensity_from_config
from .settings import NetfxSettings, get_settings

logger = logging.getLogger('netfx.' + __name__)


def parse_grid(text: str) -> np.ndarray:
    """
    'start:stop:count' -> evenly spaced values, all inside (0, 1).

    Raises:
        ConfigurationError: malformed spec or a value outside (0, 1)
    """
    parts = text.split(':')
    if len(parts) != 3:
        raise ConfigurationError(f"grid must look like start:stop:count, got '{text}'")
    try:
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigurationError(f"grid must look like start:stop:count, got '{text}'")
    if count < 1:
        raise ConfigurationError(f"grid count must be >= 1, got {count}")
    values = np.linspace(start, stop, count)
    if not ((values > 0.0) & (values < 1.0)).all():
        raise ConfigurationError(f"grid '{text}' leaves the open interval (0, 1)")
    return values


class EffectService:
    """
    Network treatment effect analyses.

    This service handles:
    - dataset and configuration validation
    - nuisance fitting (full sample or cross-fitted)
    - point estimates and alpha sweeps
    - simulated datasets and Monte-Carlo studies
    """

    def __init__(self, settings: Optional[NetfxSettings] = None):
        self.settings = settings or get_settings()

    # Loading

    def load(self, data_path: str, config: RunConfig) -> Dataset:
        """Load a dataset with the config's schema and check the two agree."""
        data = load_dataset(data_path, config.schema, self.settings.enum_cap)
        config.check_against(data)
        logger.info(f"Loaded {data.N} clusters from {data_path}")
        log_event(logger, 'DATASET', data.summary())
        return data

    def validate(self, data_path: str, config_path: str) -> dict:
        """Run every consistency check without fitting anything."""
        config = RunConfig.load(config_path)
        data = self.load(data_path, config)
        spec = config.estimand_spec()
        for k in data.type_labels:
            spec.weight_table(k, data.clusters_of_type(k)[0].x)
        propensity_from_config(config.propensity, data, self.settings.propensity_floor)
        outcome_from_config(config.outcome, data)
        return {"status": "success", "dataset": data.summary(), "config": config.to_dict()}

    # Estimation

    def _fitters(self, data: Dataset, config: RunConfig):
        fit_e = propensity_from_config(config.propensity, data, self.settings.propensity_floor)
        if config.estimator.kind == 'ipw':
            zero = ZeroOutcomeModel()
            fit_g = lambda _: zero
        else:
            fit_g = outcome_from_config(config.outcome, data)
        return fit_e, fit_g

    def nuisances(self, data: Dataset, config: RunConfig):
        """Fitted nuisances per the estimator block."""
        fit_e, fit_g = self._fitters(data, config)
        if config.estimator.kind == 'crossfit':
            folds = cross_fit_split(data, config.estimator.seed)
            return fit_fold_nuisances(data, fit_e, fit_g, folds, self.settings.threads)
        return PrefitNuisances(fit_e(data), fit_g(data))

    def estimate(self, data: Dataset, config: RunConfig, nuisances=None, overrides: Optional[dict] = None,
                 threads: Optional[int] = None) -> EstimateResult:
        nuisances = nuisances or self.nuisances(data, config)
        result = estimate_with_nuisances(
            data,
            nuisances,
            config.estimand_spec(overrides),
            p=config.estimator.proportions(data),
            level=config.level,
            floor=self.settings.propensity_floor,
            pool_types=config.estimator.pool_types,
            threads=self.settings.threads if threads is None else threads,
        )
        result.diagnostics["estimator"] = config.estimator.to_dict()
        return result

    def sweep(self, data: Dataset, config: RunConfig, grids: Sequence[str]) -> pd.DataFrame:
        """
        Estimates over a grid of alpha vectors, nuisances fitted once.

        Args:
            grids: one 'start:stop:count' per type in ascending type order, or a
                single spec used for every type

        Returns:
            DataFrame with columns alpha_1..alpha_K, tau, se, ci_lo, ci_hi, significant
        """
        types = data.type_labels
        if len(grids) == 1:
            grids = list(grids) * len(types)
        if len(grids) != len(types):
            raise ConfigurationError(f"sweep needs 1 or {len(types)} grid specs, got {len(grids)}")
        axes = [parse_grid(g) for g in grids]
        points: List[Tuple[float, ...]] = list(itertools.product(*axes))
        nuisances = self.nuisances(data, config)

        def one(point: Tuple[float, ...]) -> dict:
            alpha = {str(k): float(a) for k, a in zip(types, point)}
            result = self.estimate(data, config, nuisances, {"alpha": alpha}, threads=1)
            row: Dict[str, object] = {f"alpha_{k}": float(a) for k, a in zip(types, point)}
            row.update({
                "tau": result.tau_hat,
                "se": result.se,
                "ci_lo": result.ci[0] if result.ci else None,
                "ci_hi": result.ci[1] if result.ci else None,
                "significant": result.significant,
            })
            return row

        rows = Parallel(n_jobs=self.settings.threads, prefer='threads')(delayed(one)(p) for p in points)
        logger.info(f"Sweep finished over {len(rows)} grid points")
        return pd.DataFrame(rows)

    # Simulation

    def simulate(self, scenario: str, n: int, seed: int, path: str, p_A: float = 0.5) -> Dataset:
        data = build_scenario(scenario, p_A).simulate(n, seed)
        write_dataset(data, path)
        logger.info(f"Wrote {n} simulated '{scenario}' clusters to {path}")
        return data

    def mc_study(
        self,
        scenario: str,
        reps: int,
        n: int,
        seed: int,
        spec: str = 'CO,CP,CT',
        p_A: float = 0.5,
        alpha_grid: Optional[str] = None,
        estimator: str = 'aipw',
    ) -> pd.DataFrame:
        """
        Monte-Carlo study.

        glmm: DE(0.4) and IE(0.2, 0.8) under the given specification.
        noint: variance curve of the direct effect over `alpha_grid`.
        smooth: cross-fitted kernel outcome model with the known design.
        """
        threads = self.settings.threads
        if scenario == 'noint':
            alphas = parse_grid(alpha_grid or '0.05:0.95:19')
            return variance_curve(p_A, alphas, reps, n, seed, threads)
        targets = [MCTarget('DE', 0.4), MCTarget('IE', 0.2, 0.8)]
        if scenario == 'glmm':
            plan = glmm_plan(GlmmSpecification.parse(spec), self.settings.quad_nodes)
        elif scenario == 'smooth':
            plan = known_design_plan(p_A, outcome='kernel')
            estimator = 'crossfit'
        else:
            raise ConfigurationError(f"unknown scenario '{scenario}'")
        results = run_mc(build_scenario(scenario, p_A), plan, targets, reps, n, seed, estimator, 0.05, threads)
        return mc_results_frame(results)


def write_json(payload: dict, path: Optional[str]):
    """Write (or print, when path is None) a JSON document."""
    text = json.dumps(payload, indent=2, default=_json_default)
    if path is None:
        print(text)
        return
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text + '\n')


def _json_default(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")

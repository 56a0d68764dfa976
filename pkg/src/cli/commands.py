"""
Command Line Interface

Subcommands:
    estimate   DATA CONFIG          point estimate, SE and CI as JSON
    sweep      DATA CONFIG --grid   estimates over an alpha grid as CSV
    simulate   --scenario ...       write a simulated dataset
    mc-study   --scenario ...       Monte-Carlo study summary as CSV
    validate   DATA CONFIG          consistency checks and a dataset summary

Exit codes: 0 success; 2 configuration or data errors, bad flags and config
values that do not parse; 1 estimation and numerical failures.
"""

import argparse
import dataclasses
import json
import logging
import sys
from typing import List, Optional

import numpy as np
import pandas as pd

from core.effect_service import EffectService, write_json
from core.errors import ConfigurationError, DataParseError, NetfxError
from core.logging_setup import setup_logging
from core.settings import NetfxSettings, set_settings
from models.run_config import RunConfig

logger = logging.getLogger('netfx.' + __name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='netfx',
        description='Direct and spillover effects under partial interference.',
    )
    parser.add_argument('--threads', type=_positive_int, default=None,
                        help='worker threads (default: NETFX_THREADS, else all cores)')
    parser.add_argument('--log-level', default=None, help='logging level (default: NETFX_LOG_LEVEL or INFO)')
    parser.add_argument('--no-log-file', action='store_true', help='log to stderr only')
    sub = parser.add_subparsers(dest='command', required=True)

    estimate = sub.add_parser('estimate', help='estimate one effect')
    estimate.add_argument('data', help='long-format CSV')
    estimate.add_argument('config', help='JSON run configuration')
    estimate.add_argument('--output', help='result JSON path (default: config output.result, else stdout)')

    sweep = sub.add_parser('sweep', help='estimate over a grid of allocation strategies')
    sweep.add_argument('data', help='long-format CSV')
    sweep.add_argument('config', help='JSON run configuration')
    sweep.add_argument('--grid', action='append', required=True,
                       help='start:stop:count; repeat once per type or give one for all types')
    sweep.add_argument('--output', help='surface CSV path (default: config output.surface, else stdout)')

    simulate = sub.add_parser('simulate', help='write a simulated dataset')
    simulate.add_argument('--scenario', choices=['glmm', 'noint', 'smooth'], required=True)
    simulate.add_argument('--n', type=_positive_int, required=True, help='number of clusters')
    simulate.add_argument('--seed', type=int, default=0)
    simulate.add_argument('--p', type=float, default=0.5, help='treatment probability (noint, smooth)')
    simulate.add_argument('--output', help='CSV path (default: <scenario>_n<N>_seed<seed>.csv)')

    study = sub.add_parser('mc-study', help='run a Monte-Carlo study')
    study.add_argument('--scenario', choices=['glmm', 'noint', 'smooth'], required=True)
    study.add_argument('--spec', default='CO,CP,CT', help='glmm nuisance specification, e.g. MO,MP,CT')
    study.add_argument('--reps', type=_positive_int, default=200)
    study.add_argument('--n', type=_positive_int, default=1000, help='clusters per replicate')
    study.add_argument('--seed', type=int, default=0)
    study.add_argument('--p', type=float, default=0.5, help='treatment probability (noint, smooth)')
    study.add_argument('--alpha-grid', default=None, help='noint alpha grid start:stop:count')
    study.add_argument('--estimator', choices=['aipw', 'crossfit'], default='aipw')
    study.add_argument('--output', help='CSV path (default: stdout)')

    validate = sub.add_parser('validate', help='check a dataset against a configuration')
    validate.add_argument('data', help='long-format CSV')
    validate.add_argument('config', help='JSON run configuration')
    return parser


def _write_csv(frame: pd.DataFrame, path: Optional[str]):
    if path is None:
        frame.to_csv(sys.stdout, index=False, float_format='%.17g')
    else:
        frame.to_csv(path, index=False, float_format='%.17g')
        print(f"✅ Wrote {len(frame)} rows to {path}", file=sys.stderr)


def cmd_estimate(service: EffectService, args) -> int:
    config = RunConfig.load(args.config)
    data = service.load(args.data, config)
    result = service.estimate(data, config)
    write_json(result.to_dict(), args.output or config.output.get('result'))
    return EXIT_OK


def cmd_sweep(service: EffectService, args) -> int:
    config = RunConfig.load(args.config)
    data = service.load(args.data, config)
    surface = service.sweep(data, config, args.grid)
    _write_csv(surface, args.output or config.output.get('surface'))
    return EXIT_OK


def cmd_simulate(service: EffectService, args) -> int:
    path = args.output or f"{args.scenario}_n{args.n}_seed{args.seed}.csv"
    service.simulate(args.scenario, args.n, args.seed, path, args.p)
    print(f"✅ Wrote {args.n} clusters to {path}", file=sys.stderr)
    return EXIT_OK


def cmd_mc_study(service: EffectService, args) -> int:
    frame = service.mc_study(
        args.scenario, args.reps, args.n, args.seed,
        spec=args.spec, p_A=args.p, alpha_grid=args.alpha_grid, estimator=args.estimator,
    )
    _write_csv(frame, args.output)
    return EXIT_OK


def cmd_validate(service: EffectService, args) -> int:
    write_json(service.validate(args.data, args.config), None)
    return EXIT_OK


COMMANDS = {
    'estimate': cmd_estimate,
    'sweep': cmd_sweep,
    'simulate': cmd_simulate,
    'mc-study': cmd_mc_study,
    'validate': cmd_validate,
}


def _error(message: str, code: int) -> int:
    print(json.dumps({"status": "error", "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, configure settings and logging, run one subcommand."""
    args = build_parser().parse_args(argv)
    try:
        settings = NetfxSettings.from_env()
        overrides = {}
        if args.threads is not None:
            overrides['threads'] = args.threads
        if args.log_level is not None:
            overrides['log_level'] = args.log_level.upper()
        settings = dataclasses.replace(settings, **overrides)
        set_settings(settings)
        setup_logging(settings, to_file=not args.no_log_file)
        return COMMANDS[args.command](EffectService(settings), args)
    except (ConfigurationError, DataParseError) as e:
        logger.error(f"{args.command} failed: {e}")
        return _error(str(e), EXIT_USAGE)
    except NetfxError as e:
        logger.error(f"{args.command} failed: {e}")
        return _error(str(e), EXIT_FAILURE)
    except np.linalg.LinAlgError as e:
        logger.exception(f"{args.command} failed in linear algebra")
        return _error(f"numerical failure: {e}", EXIT_FAILURE)
    except (ValueError, TypeError, KeyError) as e:
        logger.error(f"{args.command} failed: invalid value: {e}")
        return _error(f"invalid configuration value: {e}", EXIT_USAGE)

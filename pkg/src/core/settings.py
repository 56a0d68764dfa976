"""
Settings

Environment-driven settings for the network effects toolkit. Values come
from the process environment or from config/.env, loaded with python-dotenv.
"""

import os
from dataclasses import dataclass, field
from typing import Optional

from dotenv import load_dotenv

from .errors import ConfigurationError

ENV_FILE = os.path.join(os.path.dirname(__file__), '..', '..', 'config', '.env')

DEFAULT_ENUM_CAP = 15
DEFAULT_PROPENSITY_FLOOR = 1e-6
DEFAULT_QUAD_NODES = 30


def _read_int(name: str, default: int, minimum: int = 1) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{name} must be an integer, got {raw!r}")
    if value < minimum:
        raise ConfigurationError(f"{name} must be >= {minimum}, got {value}")
    return value


def _read_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigurationError(f"{name} must be a number, got {raw!r}")


@dataclass(frozen=True)
class NetfxSettings:
    """
    Process-wide settings.

    Attributes:
        threads: number of worker threads for joblib
        enum_cap: largest cluster size whose 2^M assignments may be enumerated
        propensity_floor: truncation floor for group propensities
        quad_nodes: Gauss-Hermite order for the logistic mixed model
        log_dir: directory receiving dated log files
        log_level: logging level name
    """
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    enum_cap: int = DEFAULT_ENUM_CAP
    propensity_floor: float = DEFAULT_PROPENSITY_FLOOR
    quad_nodes: int = DEFAULT_QUAD_NODES
    log_dir: str = 'logs'
    log_level: str = 'INFO'

    def __post_init__(self):
        if not 0.0 <= self.propensity_floor < 0.5:
            raise ConfigurationError(
                f"propensity floor must lie in [0, 0.5), got {self.propensity_floor}"
            )
        if self.enum_cap < 0:
            raise ConfigurationError("enumeration cap must be non-negative")

    @classmethod
    def from_env(cls, env_file: Optional[str] = None) -> 'NetfxSettings':
        """Build settings from the environment, reading config/.env first."""
        load_dotenv(dotenv_path=env_file or ENV_FILE)
        return cls(
            threads=_read_int('NETFX_THREADS', os.cpu_count() or 1),
            enum_cap=_read_int('NETFX_ENUM_CAP', DEFAULT_ENUM_CAP, minimum=0),
            propensity_floor=_read_float('NETFX_PROPENSITY_FLOOR', DEFAULT_PROPENSITY_FLOOR),
            quad_nodes=_read_int('NETFX_QUAD_NODES', DEFAULT_QUAD_NODES),
            log_dir=os.getenv('NETFX_LOG_DIR', 'logs'),
            log_level=os.getenv('NETFX_LOG_LEVEL', 'INFO').upper(),
        )


_settings: Optional[NetfxSettings] = None


def get_settings() -> NetfxSettings:
    """Return the cached process settings, loading them on first use."""
    global _settings
    if _settings is None:
        _settings = NetfxSettings.from_env()
    return _settings


def set_settings(settings: NetfxSettings):
    """Replace the cached settings (used by the CLI after parsing flags)."""
    global _settings
    _settings = settings

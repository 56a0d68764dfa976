"""
Core package for netfx.

Settings, logging, errors, nuisance models, estimators and the estimation service.
Submodules are imported directly (e.g. `from core.estimators import aipw_estimate`).
"""

from .errors import NetfxError
from .settings import NetfxSettings, get_settings

__all__ = ['NetfxError', 'NetfxSettings', 'get_settings']

"""
Tests for environment settings and logging setup.
"""

import json
import logging
from datetime import datetime

import pytest

from core.errors import ConfigurationError
from core.logging_setup import log_event, setup_logging
from core.settings import NetfxSettings


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    for name in ('NETFX_THREADS', 'NETFX_ENUM_CAP', 'NETFX_PROPENSITY_FLOOR', 'NETFX_QUAD_NODES',
                 'NETFX_LOG_DIR', 'NETFX_LOG_LEVEL'):
        monkeypatch.delenv(name, raising=False)
    return tmp_path / 'missing.env'


class TestSettings:
    def test_defaults(self, clean_env):
        settings = NetfxSettings.from_env(str(clean_env))
        assert settings.enum_cap == 15
        assert settings.propensity_floor == 1e-6
        assert settings.quad_nodes == 30
        assert settings.log_level == 'INFO'
        assert settings.threads >= 1

    def test_environment_values(self, clean_env, monkeypatch):
        monkeypatch.setenv('NETFX_THREADS', '3')
        monkeypatch.setenv('NETFX_PROPENSITY_FLOOR', '0.01')
        monkeypatch.setenv('NETFX_LOG_LEVEL', 'debug')
        settings = NetfxSettings.from_env(str(clean_env))
        assert settings.threads == 3
        assert settings.propensity_floor == 0.01
        assert settings.log_level == 'DEBUG'

    @pytest.mark.parametrize("name, value", [
        ('NETFX_THREADS', 'two'),
        ('NETFX_THREADS', '0'),
        ('NETFX_PROPENSITY_FLOOR', 'tiny'),
        ('NETFX_PROPENSITY_FLOOR', '0.5'),
    ])
    def test_invalid_values(self, clean_env, monkeypatch, name, value):
        monkeypatch.setenv(name, value)
        with pytest.raises(ConfigurationError):
            NetfxSettings.from_env(str(clean_env))


class TestLogging:
    def test_dated_file_with_events(self, tmp_path):
        settings = NetfxSettings(threads=1, log_dir=str(tmp_path / 'logs'))
        logger = setup_logging(settings)
        log_event(logging.getLogger('netfx.tests'), 'FIT', {"model": "kernel", "n": 3})
        for handler in logger.handlers:
            handler.flush()
        path = tmp_path / 'logs' / f"netfx_{datetime.now().strftime('%Y%m%d')}.log"
        line = path.read_text(encoding='utf-8').strip().splitlines()[-1]
        payload = line.split('FIT: ', 1)[1]
        assert json.loads(payload) == {"model": "kernel", "n": 3}

    def test_repeated_setup_does_not_duplicate_handlers(self, tmp_path):
        settings = NetfxSettings(threads=1, log_dir=str(tmp_path))
        setup_logging(settings)
        logger = setup_logging(settings)
        assert len(logger.handlers) == 2

    def test_stderr_only(self, tmp_path):
        settings = NetfxSettings(threads=1, log_dir=str(tmp_path / 'never'))
        logger = setup_logging(settings, to_file=False)
        assert len(logger.handlers) == 1
        assert not (tmp_path / 'never').exists()

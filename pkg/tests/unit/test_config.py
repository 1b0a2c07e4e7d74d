"""
Unit tests for configuration management.
"""

import logging
from unittest.mock import patch

from act_lab.config import Config, setup_logging, validate_environment


class TestConfig:
    """Test configuration class functionality."""

    def test_config_initialization(self):
        """Test that config initializes with expected defaults."""
        config = Config()
        # In pytest environment, ENVIRONMENT may be set to 'testing'
        assert config.ENVIRONMENT in ["development", "testing", "production"]
        assert config.DEFAULT_FORMAT in ["csv", "jsonl"]
        assert isinstance(config.DEFAULT_SEED, int)
        assert config.EVAL_BATCH_SIZE >= 1

    @patch("act_lab.config.Config.LOG_LEVEL", "DEBUG")
    def test_get_log_level(self):
        """Test log level conversion."""
        config = Config()
        assert config.get_log_level() == logging.DEBUG

    @patch("act_lab.config.Config.LOG_LEVEL", "chatty")
    def test_unknown_log_level_falls_back(self):
        """Test that an unknown level maps to INFO."""
        assert Config().get_log_level() == logging.INFO

    @patch("act_lab.config.Config.ENVIRONMENT", "Development")
    def test_is_development(self):
        """Test case-insensitive development environment detection."""
        assert Config().is_development() is True

    @patch("act_lab.config.Config.ENVIRONMENT", "production")
    def test_production_is_not_development(self):
        """Test that other environments are not development."""
        assert Config().is_development() is False


class TestValidateSettings:
    """Test range checks on environment values."""

    @patch("act_lab.config.Config.LOG_LEVEL", "INFO")
    @patch("act_lab.config.Config.DEFAULT_FORMAT", "csv")
    @patch("act_lab.config.Config.EVAL_BATCH_SIZE", 64)
    @patch("act_lab.config.Config.ENVIRONMENT", "testing")
    def test_valid(self):
        """Test that sane values report no problems."""
        assert Config.validate_settings() == []

    @patch("act_lab.config.Config.DEFAULT_FORMAT", "xml")
    @patch("act_lab.config.Config.EVAL_BATCH_SIZE", 0)
    def test_problems_listed(self):
        """Test one message per bad value."""
        problems = Config.validate_settings()
        assert "DEFAULT_FORMAT=xml" in problems
        assert "EVAL_BATCH_SIZE=0" in problems


class TestEnvironmentValidation:
    """Test environment validation functions."""

    @patch("act_lab.config.Config.LOG_LEVEL", "INFO")
    @patch("act_lab.config.Config.DEFAULT_FORMAT", "jsonl")
    @patch("act_lab.config.Config.EVAL_BATCH_SIZE", 256)
    @patch("act_lab.config.Config.ENVIRONMENT", "testing")
    def test_validate_environment_success(self):
        """Test successful environment validation."""
        assert validate_environment() is True

    @patch("act_lab.config.Config.LOG_LEVEL", "LOUD")
    def test_validate_environment_failure(self):
        """Test failed environment validation."""
        assert validate_environment() is False


class TestSetupLogging:
    """Test logging setup."""

    @patch("act_lab.config.Config.ENVIRONMENT", "development")
    def test_development_writes_log_file(self, tmp_path):
        """Test that development logging creates the log directory."""
        log_dir = tmp_path / "logs"
        with patch("act_lab.config.Config.LOG_DIR", str(log_dir)), patch(
            "logging.basicConfig"
        ) as basic_config:
            setup_logging()
        assert log_dir.is_dir()
        handlers = basic_config.call_args.kwargs["handlers"]
        assert len(handlers) == 2
        for handler in handlers:
            handler.close()

    @patch("act_lab.config.Config.ENVIRONMENT", "production")
    def test_production_logs_to_stderr_only(self):
        """Test a single stream handler outside development."""
        with patch("logging.basicConfig") as basic_config:
            setup_logging()
        handlers = basic_config.call_args.kwargs["handlers"]
        assert len(handlers) == 1
        assert isinstance(handlers[0], logging.StreamHandler)

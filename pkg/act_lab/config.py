"""
Configuration management for ACT Lab.
Loads environment variables and provides configuration validation.
"""

import os
import sys
import logging
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file (or custom env file)
env_file = os.getenv("ENV_FILE", ".env")
load_dotenv(env_file)

logger = logging.getLogger(__name__)


class Config:
    """Configuration class for environment variable management."""

    # Environment Configuration
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "development")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_DIR: str = os.getenv("LOG_DIR", "logs")

    # Experiment Defaults (overridden by --seed/--out/--format)
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "runs")
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "0"))
    DEFAULT_FORMAT: str = os.getenv("DEFAULT_FORMAT", "csv")

    # Evaluation
    EVAL_BATCH_SIZE: int = int(os.getenv("EVAL_BATCH_SIZE", "256"))

    @classmethod
    def validate_settings(cls) -> list[str]:
        """
        Check environment values that parse but are out of range.

        Returns:
            list[str]: One message per invalid setting.
        """
        problems = []
        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            problems.append(f"LOG_LEVEL={cls.LOG_LEVEL}")
        if cls.DEFAULT_FORMAT not in ("csv", "jsonl"):
            problems.append(f"DEFAULT_FORMAT={cls.DEFAULT_FORMAT}")
        if cls.EVAL_BATCH_SIZE < 1:
            problems.append(f"EVAL_BATCH_SIZE={cls.EVAL_BATCH_SIZE}")
        if cls.ENVIRONMENT.lower() not in ("development", "production", "testing"):
            problems.append(f"ENVIRONMENT={cls.ENVIRONMENT}")

        if problems:
            logger.error(f"Invalid environment settings: {problems}")

        return problems

    @classmethod
    def get_log_level(cls) -> int:
        """
        Convert LOG_LEVEL string to logging level constant.

        Returns:
            int: Logging level constant.
        """
        level_map = {
            "DEBUG": logging.DEBUG,
            "INFO": logging.INFO,
            "WARNING": logging.WARNING,
            "ERROR": logging.ERROR,
            "CRITICAL": logging.CRITICAL,
        }
        return level_map.get(cls.LOG_LEVEL.upper(), logging.INFO)

    @classmethod
    def is_development(cls) -> bool:
        """Check if running in development environment."""
        return cls.ENVIRONMENT.lower() == "development"


# Global config instance
config = Config()


def setup_logging() -> None:
    """Setup logging configuration based on environment."""
    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # stdout carries command output, so logs go to stderr
    stream_handler = logging.StreamHandler(sys.stderr)

    if config.is_development():
        Path(config.LOG_DIR).mkdir(parents=True, exist_ok=True)
        logging.basicConfig(
            level=config.get_log_level(),
            format=log_format,
            handlers=[
                stream_handler,
                logging.FileHandler(
                    Path(config.LOG_DIR) / "act_lab.log", mode="a", encoding="utf-8"
                ),
            ],
        )
    else:
        logging.basicConfig(
            level=config.get_log_level(),
            format=log_format,
            handlers=[stream_handler],
        )


def validate_environment() -> bool:
    """
    Validate the complete environment configuration.

    Returns:
        bool: True if environment is valid for operation.
    """
    logger.info("Validating environment configuration...")
    logger.info(f"Environment: {config.ENVIRONMENT}")

    if config.validate_settings():
        logger.error("Environment validation failed: invalid settings")
        return False

    logger.info("Environment validation completed successfully")
    return True

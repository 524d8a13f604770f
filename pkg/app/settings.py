from __future__ import annotations

import logging
import sys

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

_ACTIVATIONS = ("tanh", "softplus")


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    # Core
    ENV: str = Field(default="dev")  # dev|prod
    LOG_LEVEL: str = Field(default="INFO")  # INFO|DEBUG
    OUTPUT_DIR: str = Field(default="runs")
    DATA_DIR: str = Field(default="data/uci")

    # Training defaults (every value is overridable per experiment)
    DEFAULT_EPOCHS: int = Field(default=100)
    DEFAULT_BATCH_SIZE_SYNTHETIC: int = Field(default=256)
    DEFAULT_BATCH_SIZE_UCI: int = Field(default=64)
    DEFAULT_LEARNING_RATE: float = Field(default=1e-3)
    LR_DECAY_FACTOR: float = Field(default=0.1)
    LR_DECAY_AT: float = Field(default=0.75, description="Fraction of epochs after which the decay applies")
    ADAM_BETA1: float = Field(default=0.9)
    ADAM_BETA2: float = Field(default=0.999)
    ADAM_EPS: float = Field(default=1e-8)
    BETA_NLL_BETA: float = Field(default=0.5)
    HIDDEN_DIMS: str = Field(default="64,64", description="Comma-separated hidden layer widths")
    ACTIVATION: str = Field(default="tanh")  # tanh|softplus

    # Evaluation
    EVAL_CHUNK_SIZE: int = Field(default=2048)
    RECORD_WALL_TIME: bool = Field(
        default=False,
        description="Write measured wall time to results.csv; off keeps reruns byte-identical.",
    )

    # Redis / Queue (only needed for --backend rq)
    REDIS_URL: str = Field(default="redis://localhost:6379/0")
    RQ_QUEUE_NAME: str = Field(default="trials")
    RQ_JOB_TIMEOUT_SECONDS: int = Field(default=6 * 60 * 60)
    RQ_POLL_SECONDS: float = Field(default=2.0)
    RQ_RESULT_TTL_SECONDS: int = Field(default=7 * 24 * 60 * 60)

    # UCI downloads
    HTTP_TIMEOUT_SECONDS: float = Field(default=60.0)
    UCI_SOURCES_JSON: str = Field(
        default="",
        description="Optional JSON object overriding/extending the UCI download registry",
    )

    def hidden_dims(self) -> tuple[int, ...]:
        parts = [p.strip() for p in self.HIDDEN_DIMS.split(",") if p.strip()]
        return tuple(int(p) for p in parts)

    def validate_configuration(self) -> list[str]:
        """
        Validates settings and returns list of warnings/errors.
        Critical errors should prevent startup.
        """
        errors = []
        warnings = []

        if self.ACTIVATION not in _ACTIVATIONS:
            errors.append(f"ACTIVATION must be one of: {', '.join(_ACTIVATIONS)} (got: {self.ACTIVATION})")

        try:
            dims = self.hidden_dims()
            if any(d < 1 for d in dims):
                errors.append(f"HIDDEN_DIMS entries must be positive (got: {self.HIDDEN_DIMS})")
        except ValueError:
            errors.append(f"HIDDEN_DIMS must be comma-separated integers (got: {self.HIDDEN_DIMS})")

        if self.DEFAULT_EPOCHS < 1:
            errors.append("DEFAULT_EPOCHS must be >= 1")
        if self.DEFAULT_BATCH_SIZE_SYNTHETIC < 1 or self.DEFAULT_BATCH_SIZE_UCI < 1:
            errors.append("Default batch sizes must be >= 1")
        if self.DEFAULT_LEARNING_RATE <= 0:
            errors.append("DEFAULT_LEARNING_RATE must be > 0")
        if not 0.0 < self.LR_DECAY_FACTOR <= 1.0:
            errors.append("LR_DECAY_FACTOR must be in (0, 1]")
        if not 0.0 < self.LR_DECAY_AT <= 1.0:
            errors.append("LR_DECAY_AT must be in (0, 1]")
        if not (0.0 <= self.ADAM_BETA1 < 1.0 and 0.0 <= self.ADAM_BETA2 < 1.0):
            errors.append("ADAM_BETA1 and ADAM_BETA2 must be in [0, 1)")
        if not 0.0 <= self.BETA_NLL_BETA <= 1.0:
            errors.append("BETA_NLL_BETA must be in [0, 1]")
        if self.EVAL_CHUNK_SIZE < 1:
            errors.append("EVAL_CHUNK_SIZE must be >= 1")

        if not self.REDIS_URL:
            warnings.append("REDIS_URL not set - the rq trial backend will be unavailable")
        if self.RECORD_WALL_TIME:
            warnings.append("RECORD_WALL_TIME=true - results.csv will differ between otherwise identical reruns")

        all_messages = []
        if errors:
            all_messages.extend([f"ERROR: {e}" for e in errors])
        if warnings:
            all_messages.extend([f"WARNING: {w}" for w in warnings])

        return all_messages

    def validate_and_fail_fast(self) -> None:
        """
        Validates configuration and exits if critical errors found.
        Logs warnings but continues.
        """
        messages = self.validate_configuration()

        errors = [msg for msg in messages if msg.startswith("ERROR:")]
        warnings = [msg for msg in messages if msg.startswith("WARNING:")]

        if warnings:
            logger.warning("Configuration warnings detected:")
            for warning in warnings:
                logger.warning("  %s", warning)

        if errors:
            logger.error("Critical configuration errors detected:")
            for error in errors:
                logger.error("  %s", error)
            logger.error("Cannot start. Please fix configuration errors above.")
            sys.exit(1)

        logger.debug("Configuration validation passed")


_settings: Settings | None = None


def get_settings() -> Settings:
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings

from __future__ import annotations

from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.settings import Settings


class MethodKind(str, Enum):
    TIC = "tic"
    NLL_FULL = "nll"
    NLL_DIAG = "diagonal"
    BETA_NLL = "beta_nll"
    FAITHFUL = "faithful"
    MSE = "mse"


class ExperimentKind(str, Enum):
    UNIVARIATE = "univariate"
    MULTIVARIATE = "multivariate"
    UCI = "uci"


class UnivariateVariant(str, Enum):
    CONST_5 = "const_5"
    ABS_X = "abs_x"
    FIVE_MINUS_ABS_X = "five_minus_abs_x"


DEFAULT_DIMS = [4, 6, 8, 10, 12, 14, 16, 18, 20]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: MethodKind
    seed: int = Field(default=0)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=256, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    lr_decay_factor: float = Field(default=0.1, gt=0, le=1)
    lr_decay_at: float = Field(default=0.75, gt=0, le=1)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    beta: float = Field(default=0.5, ge=0, le=1, description="Only used by beta_nll")
    hidden_dims: tuple[int, ...] = Field(default=(64, 64))
    activation: Literal["tanh", "softplus"] = Field(default="tanh")
    workers: int = Field(default=1, ge=1, description="Threads for per-sample gradient work inside a batch")

    @field_validator("hidden_dims")
    @classmethod
    def _positive_hidden(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if any(d < 1 for d in v):
            raise ValueError(f"hidden_dims entries must be positive, got {v}")
        return v


class ExperimentConfig(BaseModel):
    """Flat experiment description; mirrors the `run` flags one-to-one."""

    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentKind
    methods: list[MethodKind] = Field(default_factory=lambda: list(MethodKind))
    trials: int = Field(default=1, ge=1)
    seed: int = Field(default=0)
    output_dir: str = Field(default="")

    # univariate
    variant: UnivariateVariant = Field(default=UnivariateVariant.CONST_5)
    count: int = Field(default=10_000, ge=1)

    # multivariate
    dims: list[int] = Field(default_factory=lambda: list(DEFAULT_DIMS))
    samples_per_dim: int = Field(default=1000, ge=1)

    # uci
    csv_path: str = Field(default="")
    dataset_name: str = Field(default="")
    drop_columns: list[str] = Field(default_factory=list)

    # TrainConfig overrides; None means the Settings default
    epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    learning_rate: Optional[float] = Field(default=None, gt=0)
    beta: Optional[float] = Field(default=None, ge=0, le=1)
    hidden_dims: Optional[list[int]] = Field(default=None)
    activation: Optional[Literal["tanh", "softplus"]] = Field(default=None)
    workers: int = Field(default=1, ge=1)

    # orchestration
    jobs: int = Field(default=1, ge=1)
    backend: Literal["local", "rq"] = Field(default="local")
    record_wall_time: Optional[bool] = Field(default=None)

    @field_validator("methods")
    @classmethod
    def _methods_unique(cls, v: list[MethodKind]) -> list[MethodKind]:
        if not v:
            raise ValueError("at least one method is required")
        if len(set(v)) != len(v):
            raise ValueError(f"methods must be unique, got {[m.value for m in v]}")
        return v

    @field_validator("dims")
    @classmethod
    def _dims_in_range(cls, v: list[int]) -> list[int]:
        for d in v:
            if d % 2 != 0 or not 4 <= d <= 20:
                raise ValueError(f"multivariate dims must be even and within [4, 20], got {d}")
        return v

    @model_validator(mode="after")
    def _experiment_requirements(self) -> ExperimentConfig:
        if self.experiment == ExperimentKind.UCI and not self.csv_path:
            raise ValueError("uci experiments require csv_path")
        if self.experiment == ExperimentKind.MULTIVARIATE and not self.dims:
            raise ValueError("multivariate experiments require at least one dim")
        return self

    def train_config(self, method: MethodKind, seed: int, settings: Settings) -> TrainConfig:
        if self.batch_size is not None:
            batch_size = self.batch_size
        elif self.experiment == ExperimentKind.UCI:
            batch_size = settings.DEFAULT_BATCH_SIZE_UCI
        else:
            batch_size = settings.DEFAULT_BATCH_SIZE_SYNTHETIC
        hidden = tuple(self.hidden_dims) if self.hidden_dims is not None else settings.hidden_dims()
        return TrainConfig(
            method=method,
            seed=seed,
            epochs=self.epochs if self.epochs is not None else settings.DEFAULT_EPOCHS,
            batch_size=batch_size,
            learning_rate=self.learning_rate if self.learning_rate is not None else settings.DEFAULT_LEARNING_RATE,
            lr_decay_factor=settings.LR_DECAY_FACTOR,
            lr_decay_at=settings.LR_DECAY_AT,
            adam_beta1=settings.ADAM_BETA1,
            adam_beta2=settings.ADAM_BETA2,
            adam_eps=settings.ADAM_EPS,
            beta=self.beta if self.beta is not None else settings.BETA_NLL_BETA,
            hidden_dims=hidden,
            activation=self.activation or settings.ACTIVATION,  # type: ignore[arg-type]
            workers=self.workers,
        )

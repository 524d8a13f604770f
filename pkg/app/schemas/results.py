from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

# Column order of results.csv; part of the output contract.
RESULT_COLUMNS = ["method", "dataset", "dim", "trial", "seed", "tac", "mse", "mean_nll", "wall_time_s"]


class TrialResult(BaseModel):
    method: str
    dataset: str
    dim: int
    trial: int
    seed: int
    tac: Optional[float] = Field(default=None, description="Undefined for univariate targets")
    mse: float
    mean_nll: float
    wall_time_s: float = Field(default=0.0)


class CalibrationResult(BaseModel):
    """Univariate report: how well the predicted spread tracks the true noise level."""

    method: str
    dataset: str
    trial: int
    seed: int
    std_pearson: float
    std_ratio_mean: float
    mean_fit_rmse: float


class TrialFailure(BaseModel):
    method: str
    dataset: str
    dim: int
    trial: int
    seed: int
    error_type: str
    error: str


class AggregateRow(BaseModel):
    method: str
    dataset: str
    dim: int
    trials: int
    tac: Optional[float] = None
    mse: float
    mean_nll: float


class TrialOutcome(BaseModel):
    """Everything one trial unit (a dataset realization, all methods) produced."""

    results: list[TrialResult] = Field(default_factory=list)
    calibrations: list[CalibrationResult] = Field(default_factory=list)
    failures: list[TrialFailure] = Field(default_factory=list)
    deterministic: bool = Field(default=True)

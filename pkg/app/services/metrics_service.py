"""
Evaluation metrics: Task Agnostic Correlations (leave-one-dimension-out conditional
mean error), squared error, NLL, and the univariate calibration report.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike
from scipy import stats

from app.schemas.experiment import MethodKind
from app.services.covariance_service import predict_gaussian
from app.services.data_service import Dataset
from app.services.linalg_service import ConditionSpec, SymMatrix, condition_gaussian
from app.services.loss_service import nll_full
from app.services.mlp_service import Mlp
from app.settings import get_settings

logger = logging.getLogger(__name__)

# Mean TAC over ten trials on the full UCI datasets, for context next to desk-scale runs.
UCI_REFERENCE_TAC: dict[str, dict[str, float]] = {
    "abalone": {"diagonal": 5.49, "nll": 3.28, "beta_nll": 2.85, "faithful": 2.96, "tic": 1.83},
    "air": {"diagonal": 8.03, "nll": 3.42, "beta_nll": 5.67, "faithful": 3.27, "tic": 2.27},
    "appliances": {"diagonal": 11.71, "nll": 2.41, "beta_nll": 4.89, "faithful": 1.79, "tic": 1.39},
    "concrete": {"diagonal": 7.86, "nll": 4.16, "beta_nll": 7.21, "faithful": 3.93, "tic": 2.82},
    "electrical": {"diagonal": 10.06, "nll": 7.14, "beta_nll": 8.41, "faithful": 7.36, "tic": 4.89},
    "energy": {"diagonal": 7.12, "nll": 5.10, "beta_nll": 6.17, "faithful": 2.90, "tic": 2.34},
    "turbine": {"diagonal": 7.07, "nll": 3.40, "beta_nll": 5.03, "faithful": 3.29, "tic": 2.40},
    "naval": {"diagonal": 4.31, "nll": 0.18, "beta_nll": 1.15, "faithful": 0.20, "tic": 0.28},
    "parkinson": {"diagonal": 8.56, "nll": 1.86, "beta_nll": 5.48, "faithful": 1.68, "tic": 2.54},
    "power": {"diagonal": 8.16, "nll": 6.22, "beta_nll": 6.73, "faithful": 5.81, "tic": 3.87},
    "red_wine": {"diagonal": 7.96, "nll": 5.81, "beta_nll": 6.96, "faithful": 5.74, "tic": 4.05},
    "white_wine": {"diagonal": 8.44, "nll": 7.26, "beta_nll": 7.08, "faithful": 6.89, "tic": 4.60},
}


class MetricsError(Exception):
    pass


class DimensionTooSmall(MetricsError):
    pass


@dataclass(frozen=True)
class MetricReport:
    tac: Optional[float]
    mse: float
    mean_nll: float
    n_samples: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationReport:
    std_pearson: float
    std_ratio_mean: float


def tac(y: ArrayLike, y_hat: ArrayLike, cov: SymMatrix | ArrayLike) -> float:
    """Mean over dimensions i of |ŷᵢ + Σ12·Σ22⁻¹·(y_rest − ŷ_rest) − yᵢ|."""
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    mv = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    n = yv.shape[0]
    if n < 2:
        raise DimensionTooSmall(f"TAC needs at least 2 target dimensions, got {n}")
    errors = np.empty(n)
    for i in range(n):
        observed = tuple(j for j in range(n) if j != i)
        cond_mean, _ = condition_gaussian(mv, cov, ConditionSpec(observed, yv[list(observed)]))
        errors[i] = abs(cond_mean[0] - yv[i])
    return float(errors.mean())


def tac_per_sample(y: np.ndarray, y_hat: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """
    Batched TAC for (B, n) targets and (B, n, n) covariances.

    Each leave-one-out solve runs for the whole batch at once; samples whose observed
    block fails a plain Cholesky are redone one at a time under the jitter policy.
    """
    yb = np.atleast_2d(np.asarray(y, dtype=np.float64))
    mb = np.atleast_2d(np.asarray(y_hat, dtype=np.float64))
    cb = np.asarray(covs, dtype=np.float64)
    if cb.ndim == 2:
        cb = cb[None]
    batch, n = yb.shape
    if n < 2:
        raise DimensionTooSmall(f"TAC needs at least 2 target dimensions, got {n}")

    errors = np.empty((batch, n))
    for i in range(n):
        obs = [j for j in range(n) if j != i]
        s22 = cb[:, obs][:, :, obs]
        s12 = cb[:, i, obs]
        delta = yb[:, obs] - mb[:, obs]
        try:
            np.linalg.cholesky(s22)
            gain_delta = np.einsum("bj,bj->b", s12, np.linalg.solve(s22, delta[..., None])[..., 0])
            errors[:, i] = np.abs(mb[:, i] + gain_delta - yb[:, i])
        except np.linalg.LinAlgError:
            for b in range(batch):
                cond_mean, _ = condition_gaussian(mb[b], cb[b], ConditionSpec(tuple(obs), yb[b, obs]))
                errors[b, i] = abs(cond_mean[0] - yb[b, i])
    return errors.mean(axis=1)


def mean_fit_rmse(predicted_mean: ArrayLike, true_mean: ArrayLike) -> float:
    diff = np.asarray(predicted_mean, dtype=np.float64) - np.asarray(true_mean, dtype=np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def variance_calibration(predicted_std: ArrayLike, true_std: ArrayLike) -> CalibrationReport:
    pred = np.asarray(predicted_std, dtype=np.float64).reshape(-1)
    true = np.asarray(true_std, dtype=np.float64).reshape(-1)
    if np.ptp(pred) == 0.0 or np.ptp(true) == 0.0:
        pearson = 0.0
    else:
        pearson = float(stats.pearsonr(pred, true)[0])
    mask = true > 0
    ratio = float(np.mean(pred[mask] / true[mask])) if np.any(mask) else float("nan")
    return CalibrationReport(std_pearson=pearson, std_ratio_mean=ratio)


def evaluate(
    dataset: Dataset,
    mean_net: Mlp,
    method: MethodKind,
    cov_net: Optional[Mlp],
) -> MetricReport:
    """
    Average TAC, squared error and NLL over all samples, using each sample's own
    predicted covariance. TAC is None for univariate targets.
    """
    x = dataset.inputs
    y = dataset.targets
    n_samples, n = y.shape
    chunk = get_settings().EVAL_CHUNK_SIZE

    tac_sum = 0.0
    se_sum = 0.0
    nll_sum = 0.0
    for start in range(0, n_samples, chunk):
        stop = min(start + chunk, n_samples)
        pred = predict_gaussian(mean_net, cov_net, method, x[start:stop])
        residual = y[start:stop] - pred.mean
        se_sum += float(np.sum(residual * residual))
        nll_sum += float(np.sum(nll_full(residual, pred.cov).value))
        if n >= 2:
            tac_sum += float(np.sum(tac_per_sample(y[start:stop], pred.mean, pred.cov)))

    report = MetricReport(
        tac=tac_sum / n_samples if n >= 2 else None,
        mse=se_sum / (n_samples * n),
        mean_nll=nll_sum / n_samples,
        n_samples=n_samples,
    )
    logger.debug("Evaluation complete. method=%s n_samples=%d tac=%s mse=%.6f", method.value, n_samples, report.tac, report.mse)
    return report

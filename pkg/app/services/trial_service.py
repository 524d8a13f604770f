"""
Multi-trial orchestration.

A trial unit is one dataset realization (fresh seed, fresh multivariate
distribution or UCI split) on which every configured method is trained with the
same batch schedule. Units run sequentially, in a local process pool, or on the
RQ queue.
"""

from __future__ import annotations

import json
import logging
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import psutil
from rq.job import JobStatus

from app.schemas.experiment import ExperimentConfig, ExperimentKind, MethodKind
from app.schemas.results import AggregateRow, CalibrationResult, TrialFailure, TrialOutcome, TrialResult
from app.services.covariance_service import predict_gaussian
from app.services.data_service import (
    UNIVARIATE_X_RANGE,
    DataError,
    Dataset,
    UciSchema,
    gen_multivariate,
    gen_univariate,
    load_uci,
    noiseless_sinusoid,
    random_feature_split,
    univariate_noise_std,
)
from app.services.linalg_service import LinalgError
from app.services.loss_service import LossError
from app.services.metrics_service import MetricsError, evaluate, mean_fit_rmse, variance_calibration
from app.services.mlp_service import MlpError, save_mlp
from app.services.rq_service import default_retry, get_queue
from app.services.training_service import TrainedPair, TrainingError, make_batch_schedule, train
from app.settings import Settings, get_settings
from app.util.time import Stopwatch

logger = logging.getLogger(__name__)

CALIBRATION_GRID_POINTS = 1000

# Numerical failures inside one method's run; recorded, never retried.
TRIAL_ERRORS = (TrainingError, LinalgError, LossError, MetricsError, MlpError, DataError, FloatingPointError, np.linalg.LinAlgError)

_QUEUE_FAILED = (JobStatus.FAILED, JobStatus.STOPPED, JobStatus.CANCELED)


@dataclass(frozen=True)
class TrialUnit:
    trial: int
    seed: int
    dim: Optional[int] = None


def plan_units(config: ExperimentConfig) -> list[TrialUnit]:
    if config.experiment == ExperimentKind.MULTIVARIATE:
        return [TrialUnit(trial=t, seed=config.seed + t, dim=d) for d in config.dims for t in range(config.trials)]
    return [TrialUnit(trial=t, seed=config.seed + t) for t in range(config.trials)]


def dataset_label(config: ExperimentConfig, unit: TrialUnit) -> str:
    if config.experiment == ExperimentKind.UNIVARIATE:
        return f"univariate_{config.variant.value}"
    if config.experiment == ExperimentKind.MULTIVARIATE:
        return f"multivariate_d{unit.dim}"
    return config.dataset_name or Path(config.csv_path).stem


def build_dataset(config: ExperimentConfig, unit: TrialUnit) -> Dataset:
    if config.experiment == ExperimentKind.UNIVARIATE:
        return gen_univariate(config.variant, config.count, unit.seed)
    if config.experiment == ExperimentKind.MULTIVARIATE:
        assert unit.dim is not None
        dataset, _ = gen_multivariate(unit.dim, unit.seed, samples=config.samples_per_dim * unit.dim)
        return dataset
    table = load_uci(UciSchema(path=config.csv_path, drop_columns=tuple(config.drop_columns), name=dataset_label(config, unit)))
    return random_feature_split(table, unit.seed)


def _record_wall_time(config: ExperimentConfig, settings: Settings) -> bool:
    return settings.RECORD_WALL_TIME if config.record_wall_time is None else config.record_wall_time


def _save_artifacts(artifacts_dir: Path, label: str, unit: TrialUnit, pairs: dict[str, TrainedPair]) -> None:
    trial_dir = artifacts_dir / label / f"trial{unit.trial:03d}"
    trial_dir.mkdir(parents=True, exist_ok=True)
    for method, pair in pairs.items():
        save_mlp(pair.mean_net, trial_dir / f"{method}_mean")
        if pair.cov_net is not None:
            save_mlp(pair.cov_net, trial_dir / f"{method}_cov")
    traces = {method: pair.loss_trace for method, pair in pairs.items()}
    (trial_dir / "loss_trace.json").write_text(json.dumps(traces, indent=2) + "\n", encoding="utf-8")


def _univariate_calibration(
    config: ExperimentConfig, unit: TrialUnit, label: str, method: MethodKind, pair: TrainedPair
) -> CalibrationResult:
    grid = np.linspace(*UNIVARIATE_X_RANGE, CALIBRATION_GRID_POINTS)
    pred = predict_gaussian(pair.mean_net, pair.cov_net, method, grid[:, None])
    predicted_std = np.sqrt(pred.cov[:, 0, 0])
    report = variance_calibration(predicted_std, univariate_noise_std(grid))
    return CalibrationResult(
        method=method.value,
        dataset=label,
        trial=unit.trial,
        seed=unit.seed,
        std_pearson=report.std_pearson,
        std_ratio_mean=report.std_ratio_mean,
        mean_fit_rmse=mean_fit_rmse(pred.mean[:, 0], noiseless_sinusoid(config.variant, grid)),
    )


def failed_unit_outcome(config: ExperimentConfig, unit: TrialUnit, error_type: str, error: str) -> TrialOutcome:
    label = dataset_label(config, unit)
    return TrialOutcome(
        failures=[
            TrialFailure(
                method=m.value,
                dataset=label,
                dim=unit.dim or 0,
                trial=unit.trial,
                seed=unit.seed,
                error_type=error_type,
                error=error,
            )
            for m in config.methods
        ]
    )


def run_trial_unit(
    config: ExperimentConfig,
    unit: TrialUnit,
    artifacts_dir: Optional[Path] = None,
) -> TrialOutcome:
    settings = get_settings()
    label = dataset_label(config, unit)
    try:
        dataset = build_dataset(config, unit)
    except DataError as e:
        logger.warning("Trial unit failed to build its dataset. dataset=%s trial=%d error=%s", label, unit.trial, e)
        return failed_unit_outcome(config, unit, type(e).__name__, str(e))

    dim = dataset.target_dim
    first = config.train_config(config.methods[0], unit.seed, settings)
    schedule = make_batch_schedule(dataset.n_samples, first.batch_size, first.epochs, unit.seed)

    outcome = TrialOutcome()
    pairs: dict[str, TrainedPair] = OrderedDict()
    for method in config.methods:
        train_config = config.train_config(method, unit.seed, settings)
        watch = Stopwatch(enabled=_record_wall_time(config, settings))
        try:
            pair = train(train_config, dataset, schedule)
            report = evaluate(dataset, pair.mean_net, method, pair.cov_net)
            calibration = None
            if config.experiment == ExperimentKind.UNIVARIATE:
                calibration = _univariate_calibration(config, unit, label, method, pair)
        except TRIAL_ERRORS as e:
            logger.warning(
                "Trial failed; excluded from aggregates. method=%s dataset=%s trial=%d seed=%d error_type=%s error=%s",
                method.value,
                label,
                unit.trial,
                unit.seed,
                type(e).__name__,
                e,
            )
            outcome.failures.append(
                TrialFailure(
                    method=method.value,
                    dataset=label,
                    dim=dim,
                    trial=unit.trial,
                    seed=unit.seed,
                    error_type=type(e).__name__,
                    error=str(e),
                )
            )
            continue

        outcome.results.append(
            TrialResult(
                method=method.value,
                dataset=label,
                dim=dim,
                trial=unit.trial,
                seed=unit.seed,
                tac=report.tac,
                mse=report.mse,
                mean_nll=report.mean_nll,
                wall_time_s=watch.elapsed(),
            )
        )
        if calibration is not None:
            outcome.calibrations.append(calibration)
        outcome.deterministic = outcome.deterministic and pair.deterministic
        pairs[method.value] = pair

    if artifacts_dir is not None and pairs:
        _save_artifacts(artifacts_dir, label, unit, pairs)

    rss_mb = psutil.Process().memory_info().rss / (1024 * 1024)
    logger.info(
        "Trial unit complete. dataset=%s trial=%d seed=%d ok=%d failed=%d rss_mb=%.1f",
        label,
        unit.trial,
        unit.seed,
        len(outcome.results),
        len(outcome.failures),
        rss_mb,
    )
    return outcome


def _run_on_queue(config: ExperimentConfig, units: list[TrialUnit], artifacts_dir: Optional[Path]) -> list[TrialOutcome]:
    settings = get_settings()
    queue = get_queue()
    payload = config.model_dump_json()
    jobs = [
        queue.enqueue(
            "app.jobs.trial_jobs.run_trial_job",
            payload,
            unit.trial,
            unit.seed,
            unit.dim,
            str(artifacts_dir) if artifacts_dir is not None else None,
            retry=default_retry(),
            job_timeout=settings.RQ_JOB_TIMEOUT_SECONDS,
            result_ttl=settings.RQ_RESULT_TTL_SECONDS,
        )
        for unit in units
    ]
    logger.info("Enqueued trial units. queue=%s jobs=%d", settings.RQ_QUEUE_NAME, len(jobs))

    outcomes: list[Optional[TrialOutcome]] = [None] * len(jobs)
    pending = set(range(len(jobs)))
    while pending:
        for i in sorted(pending):
            job = jobs[i]
            status = job.get_status(refresh=True)
            if status == JobStatus.FINISHED:
                outcomes[i] = TrialOutcome.model_validate(job.return_value())
                pending.discard(i)
            elif status in _QUEUE_FAILED:
                logger.warning("Queued trial unit failed. job_id=%s status=%s", job.id, status)
                outcomes[i] = failed_unit_outcome(config, units[i], "QueueJobFailed", str(job.exc_info or status))
                pending.discard(i)
        if pending:
            time.sleep(settings.RQ_POLL_SECONDS)
    return [o for o in outcomes if o is not None]


def run_trials(config: ExperimentConfig, artifacts_dir: Optional[Path] = None) -> list[TrialOutcome]:
    units = plan_units(config)
    logger.info(
        "Starting trials. experiment=%s units=%d methods=%s backend=%s jobs=%d cpus=%s available_mb=%.0f",
        config.experiment.value,
        len(units),
        ",".join(m.value for m in config.methods),
        config.backend,
        config.jobs,
        psutil.cpu_count(logical=False),
        psutil.virtual_memory().available / (1024 * 1024),
    )

    if config.backend == "rq":
        return _run_on_queue(config, units, artifacts_dir)
    if config.jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(units))) as pool:
            futures = [pool.submit(run_trial_unit, config, unit, artifacts_dir) for unit in units]
            return [f.result() for f in futures]
    return [run_trial_unit(config, unit, artifacts_dir) for unit in units]


def aggregate(results: list[TrialResult]) -> list[AggregateRow]:
    """Arithmetic mean per (method, dataset, dim), in first-seen order."""
    groups: dict[tuple[str, str, int], list[TrialResult]] = OrderedDict()
    for r in results:
        groups.setdefault((r.method, r.dataset, r.dim), []).append(r)

    rows = []
    for (method, dataset, dim), rs in groups.items():
        tacs = [r.tac for r in rs if r.tac is not None]
        rows.append(
            AggregateRow(
                method=method,
                dataset=dataset,
                dim=dim,
                trials=len(rs),
                tac=float(np.mean(tacs)) if tacs else None,
                mse=float(np.mean([r.mse for r in rs])),
                mean_nll=float(np.mean([r.mean_nll for r in rs])),
            )
        )
    return rows

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from app.jobs.retry import JobContext, run_trial_guarded
from app.schemas.experiment import ExperimentConfig
from app.services.trial_service import TrialUnit, dataset_label, failed_unit_outcome, run_trial_unit

logger = logging.getLogger(__name__)


def run_trial_job(
    config_json: str,
    trial: int,
    seed: int,
    dim: Optional[int],
    artifacts_dir: Optional[str],
) -> dict:
    """RQ entry point for one trial unit; returns a `TrialOutcome` as a plain dict."""
    config = ExperimentConfig.model_validate_json(config_json)
    unit = TrialUnit(trial=trial, seed=seed, dim=dim)
    ctx = JobContext(
        experiment=config.experiment.value,
        dataset=dataset_label(config, unit),
        trial=trial,
        seed=seed,
        dim=dim,
    )

    def _handler() -> dict:
        out_dir = Path(artifacts_dir) if artifacts_dir else None
        return run_trial_unit(config, unit, out_dir).model_dump(mode="json")

    def _on_permanent(exc: BaseException) -> dict:
        return failed_unit_outcome(config, unit, type(exc).__name__, str(exc)).model_dump(mode="json")

    return run_trial_guarded(ctx, _handler, _on_permanent)

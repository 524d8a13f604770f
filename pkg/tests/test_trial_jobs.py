from __future__ import annotations

import httpx
import pytest
from redis.exceptions import ConnectionError as RedisConnectionError

import app.jobs.trial_jobs as trial_jobs
from app.jobs.retry import JobContext, PermanentJobError, TransientJobError, _is_transient_exc, run_trial_guarded
from app.schemas.experiment import ExperimentConfig
from app.schemas.results import TrialOutcome


def _payload() -> str:
    return ExperimentConfig(
        experiment="multivariate",
        methods=["nll", "mse"],
        dims=[4],
        samples_per_dim=20,
        epochs=1,
        batch_size=40,
        hidden_dims=[4],
    ).model_dump_json()


@pytest.mark.parametrize(
    "exc, transient",
    [
        (TransientJobError("retry me"), True),
        (PermanentJobError("stop"), False),
        (RedisConnectionError("gone"), True),
        (httpx.ConnectTimeout("slow"), True),
        (OSError(28, "No space left on device"), True),
        (ValueError("bad config"), False),
        (ZeroDivisionError(), False),
    ],
)
def test_transient_classification(exc, transient):
    assert _is_transient_exc(exc) is transient


def test_guard_returns_handler_result():
    ctx = JobContext(experiment="uci", dataset="abalone", trial=0, seed=0, dim=None)
    assert run_trial_guarded(ctx, lambda: {"ok": True}, lambda e: {"ok": False}) == {"ok": True}


def test_run_trial_job_returns_outcome_dict(settings, tmp_path):
    result = trial_jobs.run_trial_job(_payload(), 0, 3, 4, str(tmp_path / "trials"))
    outcome = TrialOutcome.model_validate(result)
    assert [r.method for r in outcome.results] == ["nll", "mse"]
    assert all(r.seed == 3 and r.dim == 4 for r in outcome.results)
    assert (tmp_path / "trials" / "multivariate_d4" / "trial000" / "loss_trace.json").exists()


def test_permanent_error_becomes_failure_record(settings, monkeypatch):
    def boom(config, unit, artifacts_dir=None):
        raise ValueError("matrix shape surprise")

    monkeypatch.setattr(trial_jobs, "run_trial_unit", boom)
    outcome = TrialOutcome.model_validate(trial_jobs.run_trial_job(_payload(), 1, 2, 4, None))
    assert outcome.results == []
    assert [f.method for f in outcome.failures] == ["nll", "mse"]
    assert outcome.failures[0].error_type == "ValueError"
    assert outcome.failures[0].dataset == "multivariate_d4"
    assert outcome.failures[0].trial == 1


def test_transient_error_is_reraised_for_retry(settings, monkeypatch):
    def disk_full(config, unit, artifacts_dir=None):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(trial_jobs, "run_trial_unit", disk_full)
    with pytest.raises(OSError):
        trial_jobs.run_trial_job(_payload(), 0, 0, 4, None)

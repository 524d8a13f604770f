from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import app.services.trial_service as trial_service
from app.schemas.experiment import ExperimentConfig, ExperimentKind, MethodKind
from app.schemas.results import TrialResult
from app.services.training_service import DivergedLoss
from app.services.trial_service import (
    TrialUnit,
    aggregate,
    dataset_label,
    plan_units,
    run_trial_unit,
    run_trials,
)
from tests.util_fake_queue import FakeQueue

FIXTURES = Path(__file__).parent / "fixtures"


def _multivariate(**overrides) -> ExperimentConfig:
    base = dict(
        experiment="multivariate",
        methods=["tic", "nll"],
        dims=[4],
        samples_per_dim=25,
        epochs=2,
        batch_size=32,
        hidden_dims=[8],
        seed=1,
    )
    base.update(overrides)
    return ExperimentConfig.model_validate(base)


def test_plan_units_enumerates_dims_and_trials():
    units = plan_units(_multivariate(dims=[4, 6], trials=2, seed=10))
    assert units == [
        TrialUnit(trial=0, seed=10, dim=4),
        TrialUnit(trial=1, seed=11, dim=4),
        TrialUnit(trial=0, seed=10, dim=6),
        TrialUnit(trial=1, seed=11, dim=6),
    ]
    uni = ExperimentConfig(experiment=ExperimentKind.UNIVARIATE, trials=3, seed=5)
    assert [u.seed for u in plan_units(uni)] == [5, 6, 7]
    assert all(u.dim is None for u in plan_units(uni))


def test_dataset_labels():
    assert dataset_label(_multivariate(), TrialUnit(0, 0, 6)) == "multivariate_d6"
    uni = ExperimentConfig(experiment="univariate", variant="abs_x")
    assert dataset_label(uni, TrialUnit(0, 0)) == "univariate_abs_x"
    uci = ExperimentConfig(experiment="uci", csv_path=str(FIXTURES / "uci_small.csv"))
    assert dataset_label(uci, TrialUnit(0, 0)) == "uci_small"


def test_one_trial_two_methods(settings):
    outcomes = run_trials(_multivariate())
    assert len(outcomes) == 1
    rows = outcomes[0].results
    assert [r.method for r in rows] == ["tic", "nll"]
    for r in rows:
        assert r.dataset == "multivariate_d4"
        assert r.dim == 4 and r.trial == 0 and r.seed == 1
        assert r.tac is not None and np.isfinite(r.tac)
        assert r.wall_time_s == 0.0
    assert outcomes[0].failures == []
    assert outcomes[0].deterministic


def test_runs_are_reproducible(settings):
    first = run_trials(_multivariate())
    second = run_trials(_multivariate())
    assert [r.model_dump() for r in first[0].results] == [r.model_dump() for r in second[0].results]


def test_methods_share_dataset_and_schedule(settings, monkeypatch):
    seen = []
    real_train = trial_service.train

    def spy(config, dataset, schedule=None):
        seen.append((config.method, id(dataset), id(schedule)))
        return real_train(config, dataset, schedule)

    monkeypatch.setattr(trial_service, "train", spy)
    run_trials(_multivariate(methods=["tic", "nll", "mse"]))
    assert [m for m, _, _ in seen] == [MethodKind.TIC, MethodKind.NLL_FULL, MethodKind.MSE]
    assert len({d for _, d, _ in seen}) == 1
    assert len({s for _, _, s in seen}) == 1


def test_failed_method_is_recorded_and_others_continue(settings, monkeypatch):
    real_train = trial_service.train

    def flaky(config, dataset, schedule=None):
        if config.method == MethodKind.TIC:
            raise DivergedLoss("loss went to nan")
        return real_train(config, dataset, schedule)

    monkeypatch.setattr(trial_service, "train", flaky)
    (outcome,) = run_trials(_multivariate())
    assert [r.method for r in outcome.results] == ["nll"]
    assert len(outcome.failures) == 1
    failure = outcome.failures[0]
    assert failure.method == "tic"
    assert failure.error_type == "DivergedLoss"
    assert failure.dim == 4


def test_univariate_trial_reports_calibration(settings):
    config = ExperimentConfig(
        experiment="univariate",
        variant="abs_x",
        count=200,
        methods=["tic", "diagonal"],
        epochs=2,
        batch_size=64,
        hidden_dims=[8],
    )
    (outcome,) = run_trials(config)
    assert all(r.tac is None for r in outcome.results)
    assert all(r.dim == 1 for r in outcome.results)
    assert [c.method for c in outcome.calibrations] == ["tic", "diagonal"]
    for c in outcome.calibrations:
        assert -1.0 <= c.std_pearson <= 1.0
        assert c.mean_fit_rmse >= 0.0


def test_uci_trial_and_artifacts(settings, tmp_path):
    config = ExperimentConfig(
        experiment="uci",
        csv_path=str(FIXTURES / "uci_small.csv"),
        methods=["faithful", "mse"],
        epochs=2,
        hidden_dims=[8],
    )
    (outcome,) = run_trials(config, artifacts_dir=tmp_path / "trials")
    assert [r.dim for r in outcome.results] == [4, 4]
    trial_dir = tmp_path / "trials" / "uci_small" / "trial000"
    names = sorted(p.name for p in trial_dir.iterdir())
    assert names == [
        "faithful_cov.bin",
        "faithful_cov.json",
        "faithful_mean.bin",
        "faithful_mean.json",
        "loss_trace.json",
        "mse_mean.bin",
        "mse_mean.json",
    ]


def test_unusable_dataset_fails_every_method(settings):
    config = ExperimentConfig(experiment="uci", csv_path=str(FIXTURES / "uci_too_narrow.csv"), methods=["tic", "nll"])
    outcome = run_trial_unit(config, TrialUnit(trial=0, seed=0))
    assert outcome.results == []
    assert [f.method for f in outcome.failures] == ["tic", "nll"]
    assert {f.error_type for f in outcome.failures} == {"TooFewColumns"}


def test_process_pool_matches_sequential(settings):
    config = _multivariate(trials=2, methods=["nll"])
    sequential = run_trials(config)
    pooled = run_trials(config.model_copy(update={"jobs": 2}))
    key = lambda o: [(r.trial, r.seed, r.tac, r.mse, r.mean_nll) for r in o.results]  # noqa: E731
    assert [key(o) for o in pooled] == [key(o) for o in sequential]


def test_rq_backend_enqueues_one_job_per_unit(settings, monkeypatch):
    queue = FakeQueue()
    monkeypatch.setattr(trial_service, "get_queue", lambda: queue)
    config = _multivariate(trials=2, methods=["nll"], backend="rq")

    outcomes = run_trials(config)
    assert len(queue.enqueued) == 2
    assert queue.enqueued[0]["func"] == "app.jobs.trial_jobs.run_trial_job"
    assert queue.enqueued[0]["kwargs"]["retry"].max == 3
    assert [o.results[0].seed for o in outcomes] == [1, 2]

    local = run_trials(config.model_copy(update={"backend": "local"}))
    assert [o.results[0].tac for o in outcomes] == [o.results[0].tac for o in local]


def test_rq_backend_records_failed_jobs(settings, monkeypatch):
    monkeypatch.setattr(trial_service, "get_queue", lambda: FakeQueue(fail_all=True))
    (outcome,) = run_trials(_multivariate(backend="rq"))
    assert outcome.results == []
    assert [f.error_type for f in outcome.failures] == ["QueueJobFailed", "QueueJobFailed"]


def _row(method: str, trial: int, tac: float | None, mse: float) -> TrialResult:
    return TrialResult(method=method, dataset="d", dim=4, trial=trial, seed=trial, tac=tac, mse=mse, mean_nll=1.0)


def test_aggregate_takes_means_per_method():
    rows = [_row("tic", t, float(t), 2.0 * t) for t in range(10)] + [_row("nll", 0, None, 1.0)]
    agg = aggregate(rows)
    assert [a.method for a in agg] == ["tic", "nll"]
    assert agg[0].trials == 10
    assert agg[0].tac == pytest.approx(4.5)
    assert agg[0].mse == pytest.approx(9.0)
    assert agg[1].tac is None
    assert aggregate([]) == []

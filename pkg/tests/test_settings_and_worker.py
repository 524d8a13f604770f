from __future__ import annotations

import pytest
from redis.exceptions import ConnectionError as RedisConnectionError

import app.worker as worker
from app.schemas.experiment import ExperimentConfig, MethodKind
from app.services.redis_client import RedisUnavailable, require_redis
from app.settings import Settings


def test_defaults_validate_cleanly():
    messages = Settings().validate_configuration()
    assert not [m for m in messages if m.startswith("ERROR:")]


def test_bad_values_are_reported():
    s = Settings(ACTIVATION="relu", HIDDEN_DIMS="64,x", LR_DECAY_AT=0.0, EVAL_CHUNK_SIZE=0)
    errors = [m for m in s.validate_configuration() if m.startswith("ERROR:")]
    assert len(errors) == 4
    assert any("ACTIVATION" in e for e in errors)
    assert any("HIDDEN_DIMS" in e for e in errors)


def test_hidden_dims_parsing():
    assert Settings(HIDDEN_DIMS="32, 16").hidden_dims() == (32, 16)


def test_train_config_falls_back_to_settings():
    s = Settings(DEFAULT_EPOCHS=7, DEFAULT_BATCH_SIZE_UCI=11, HIDDEN_DIMS="5", BETA_NLL_BETA=0.25)
    uci = ExperimentConfig(experiment="uci", csv_path="x.csv")
    tc = uci.train_config(MethodKind.BETA_NLL, seed=3, settings=s)
    assert (tc.epochs, tc.batch_size, tc.hidden_dims, tc.beta, tc.seed) == (7, 11, (5,), 0.25, 3)

    multi = ExperimentConfig(experiment="multivariate", epochs=2, batch_size=9, hidden_dims=[4, 4])
    tc = multi.train_config(MethodKind.TIC, seed=0, settings=s)
    assert (tc.epochs, tc.batch_size, tc.hidden_dims) == (2, 9, (4, 4))


class _PingOk:
    def ping(self) -> bool:
        return True


class _PingDown:
    def ping(self) -> bool:
        raise RedisConnectionError("connection refused")


def test_worker_listens_on_trial_queue(settings, monkeypatch):
    started = {}

    class FakeWorker:
        def __init__(self, queues, connection, name):
            started["queues"] = queues
            self.name = name

        def work(self, with_scheduler: bool = False):
            started["with_scheduler"] = with_scheduler

    class FakeRqQueue:
        def __init__(self, name, connection):
            self.name = name

    monkeypatch.setattr(worker, "get_redis_bytes", lambda: _PingOk())
    monkeypatch.setattr(worker, "Queue", FakeRqQueue)
    monkeypatch.setattr(worker, "Worker", FakeWorker)
    worker.main()
    assert [q.name for q in started["queues"]] == [settings.RQ_QUEUE_NAME]
    assert started["with_scheduler"] is True
    assert worker.worker_name().startswith("trials-")


def test_worker_refuses_to_start_without_redis(settings, monkeypatch):
    monkeypatch.setattr(worker, "get_redis_bytes", lambda: _PingDown())
    with pytest.raises(RedisUnavailable):
        worker.main()
    require_redis(_PingOk())


def test_wall_time_is_off_by_default():
    s = Settings()
    assert s.RECORD_WALL_TIME is False
    assert not any("RECORD_WALL_TIME" in m for m in s.validate_configuration())
    assert any("RECORD_WALL_TIME" in m for m in Settings(RECORD_WALL_TIME=True).validate_configuration())

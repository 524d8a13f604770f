from __future__ import annotations

import importlib
from typing import Any, Callable, Optional

from rq.job import JobStatus


def _resolve(func: str | Callable[..., Any]) -> Callable[..., Any]:
    if callable(func):
        return func
    module, _, name = func.rpartition(".")
    return getattr(importlib.import_module(module), name)


class FakeJob:
    def __init__(self, job_id: str, status: JobStatus, result: Any = None, exc_info: Optional[str] = None) -> None:
        self.id = job_id
        self._status = status
        self._result = result
        self.exc_info = exc_info

    def get_status(self, refresh: bool = True) -> JobStatus:
        return self._status

    def return_value(self) -> Any:
        return self._result


class FakeQueue:
    """Runs enqueued functions inline, the way a worker would."""

    def __init__(self, fail_all: bool = False) -> None:
        self.fail_all = fail_all
        self.enqueued: list[dict[str, Any]] = []

    def enqueue(self, func: str | Callable[..., Any], *args: Any, **kwargs: Any) -> FakeJob:
        job_id = f"job-{len(self.enqueued)}"
        self.enqueued.append({"func": func, "args": args, "kwargs": kwargs})
        if self.fail_all:
            return FakeJob(job_id, JobStatus.FAILED, exc_info="Traceback: worker died")
        try:
            result = _resolve(func)(*args)
        except Exception as e:  # noqa: BLE001
            return FakeJob(job_id, JobStatus.FAILED, exc_info=repr(e))
        return FakeJob(job_id, JobStatus.FINISHED, result=result)

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import httpx
from redis.exceptions import ConnectionError as RedisConnectionError
from redis.exceptions import TimeoutError as RedisTimeoutError
from rq import get_current_job

logger = logging.getLogger(__name__)


class TransientJobError(Exception):
    """An error that should be retried with backoff."""


class PermanentJobError(Exception):
    """An error that should not be retried."""


@dataclass(frozen=True)
class JobContext:
    experiment: str
    dataset: str
    trial: int
    seed: int
    dim: Optional[int]


def _is_transient_exc(exc: BaseException) -> bool:
    if isinstance(exc, TransientJobError):
        return True
    if isinstance(exc, PermanentJobError):
        return False
    if isinstance(exc, (RedisConnectionError, RedisTimeoutError)):
        return True
    if isinstance(exc, (httpx.TimeoutException, httpx.NetworkError)):
        return True
    # Disk full, NFS hiccups and the like while writing trial artifacts.
    if isinstance(exc, OSError):
        return True
    return False


def _retries_left() -> Optional[int]:
    job = get_current_job()
    if not job:
        return None
    # rq exposes retries_left when Retry is used.
    return getattr(job, "retries_left", None)


def run_trial_guarded(
    ctx: JobContext,
    handler: Callable[[], dict],
    on_permanent: Callable[[BaseException], dict],
) -> dict:
    """
    Wrapper providing:
    - Structured start/finish logging per trial unit
    - Respecting RQ Retry: raise to retry on transient errors
    - Permanent errors become a recorded failure payload instead of a retry
    """
    logger.info(
        "Processing trial unit. experiment=%s dataset=%s trial=%d seed=%d dim=%s",
        ctx.experiment,
        ctx.dataset,
        ctx.trial,
        ctx.seed,
        ctx.dim,
    )
    try:
        return handler()
    except Exception as e:  # noqa: BLE001
        transient = _is_transient_exc(e)
        retries_left = _retries_left()
        logger.exception(
            "Trial job error. transient=%s retries_left=%s dataset=%s trial=%d",
            transient,
            retries_left,
            ctx.dataset,
            ctx.trial,
        )
        if transient:
            raise
        # Permanent failure: return the failure record; raising would let RQ Retry reschedule it.
        return on_permanent(e)

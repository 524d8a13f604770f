from __future__ import annotations

import logging

from redis import Redis
from redis.exceptions import RedisError

from app.settings import get_settings

logger = logging.getLogger(__name__)

_redis_bytes: Redis | None = None


class RedisUnavailable(Exception):
    """The trial queue's Redis could not be reached."""


def get_redis_bytes() -> Redis:
    """
    Redis client that returns raw bytes.
    Required for RQ, which stores pickled job payloads and TrialOutcome results.
    """
    global _redis_bytes
    if _redis_bytes is None:
        settings = get_settings()
        _redis_bytes = Redis.from_url(settings.REDIS_URL, decode_responses=False)
    return _redis_bytes


def require_redis(redis: Redis) -> None:
    try:
        redis.ping()
    except RedisError as e:
        logger.error("Redis ping failed. url=%s error=%s", get_settings().REDIS_URL, e)
        raise RedisUnavailable(str(e)) from e

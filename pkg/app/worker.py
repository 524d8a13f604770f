from __future__ import annotations

import logging
import os
import socket

import psutil
from rq import Queue, Worker

from app.logging import configure_logging
from app.services.redis_client import get_redis_bytes, require_redis
from app.settings import get_settings

logger = logging.getLogger(__name__)


def worker_name() -> str:
    return f"trials-{socket.gethostname()}-{os.getpid()}"


def main() -> None:
    settings = get_settings()
    configure_logging(settings.LOG_LEVEL)

    # Validate configuration and fail fast if critical errors found
    settings.validate_and_fail_fast()

    redis = get_redis_bytes()
    require_redis(redis)
    queue = Queue(name=settings.RQ_QUEUE_NAME, connection=redis)
    worker = Worker([queue], connection=redis, name=worker_name())
    logger.info(
        "Starting trial worker. name=%s queue=%s redis=%s cpus=%s mem_gb=%.1f",
        worker.name,
        settings.RQ_QUEUE_NAME,
        settings.REDIS_URL,
        psutil.cpu_count(logical=False),
        psutil.virtual_memory().total / 1024**3,
    )
    worker.work(with_scheduler=True)


if __name__ == "__main__":
    main()

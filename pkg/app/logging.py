from __future__ import annotations

import logging
import sys

# Chatty at INFO during long sweeps; raised to WARNING unless running at DEBUG.
_NOISY_LOGGERS = ("httpx", "httpcore", "rq.worker", "rq.queue")


def configure_logging(level: str) -> None:
    """Route everything to standard error; stdout carries command results only."""
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    root = logging.getLogger()
    root.setLevel(numeric_level)

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(numeric_level)
    handler.setFormatter(
        logging.Formatter(
            fmt="%(asctime)s %(levelname)s %(name)s - %(message)s",
            datefmt="%Y-%m-%dT%H:%M:%S%z",
        )
    )

    root.handlers.clear()
    root.addHandler(handler)

    # numpy RuntimeWarnings (overflow in exp, invalid sqrt) land in the same stream.
    logging.captureWarnings(True)

    noisy_level = logging.DEBUG if numeric_level <= logging.DEBUG else logging.WARNING
    for name in _NOISY_LOGGERS:
        logging.getLogger(name).setLevel(noisy_level)

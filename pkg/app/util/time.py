from __future__ import annotations

import time
from dataclasses import dataclass, field


@dataclass
class Stopwatch:
    """Wall-clock timer; `elapsed()` is 0.0 when disabled so reruns stay byte-identical."""

    enabled: bool = True
    _start: float = field(default_factory=time.perf_counter)

    def restart(self) -> None:
        self._start = time.perf_counter()

    def elapsed(self) -> float:
        if not self.enabled:
            return 0.0
        return time.perf_counter() - self._start

"""Structured JSON-lines event logging shared by controller and learner.

One JSON object per line with the keys ts, round, event, learner_id and
duration_ms (null where not applicable), plus free-form extras such as
loss or version. Timestamps come from a monotonic clock so interval
arithmetic on one component's log is safe against wall-clock steps.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path

__all__ = ["EventLogger", "read_events"]


class EventLogger:
    """Thread-safe append-only event sink: an in-memory list plus an
    optional JSONL file flushed per line so it can be tailed live."""

    def __init__(self, path: str | Path | None = None, clock=time.monotonic) -> None:
        self._clock = clock
        self._lock = threading.Lock()
        self._events: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")

    def log(
        self,
        event: str,
        *,
        round: int | None = None,
        learner_id: str | None = None,
        duration_ms: float | None = None,
        **extra,
    ) -> float:
        """Record one event and return its timestamp."""
        record = {
            "ts": self._clock(),
            "round": round,
            "event": event,
            "learner_id": learner_id,
            "duration_ms": duration_ms,
        }
        record.update(extra)
        with self._lock:
            self._events.append(record)
            if self._fh is not None:
                self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
                self._fh.flush()
        return record["ts"]

    def events(self) -> list[dict]:
        with self._lock:
            return list(self._events)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_events(path: str | Path) -> list[dict]:
    """Parse a JSONL event file; tolerates a torn final line."""
    events = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    events.append(json.loads(line))
                except json.JSONDecodeError:
                    break  # torn tail of a live file
    except FileNotFoundError:
        return []
    return events

"""Chrome trace-event timeline of collective phases.

Each rank keeps its events in memory and writes one JSON array at shutdown;
the launcher concatenates the per-rank arrays. Load the result in
chrome://tracing or ui.perfetto.dev; every rank shows up as its own pid lane.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import TimelineError

log = logging.getLogger(__name__)


class Category(str, enum.Enum):
    NEGOTIATE = "NEGOTIATE"
    MEMCPY_IN_FUSION_BUFFER = "MEMCPY_IN_FUSION_BUFFER"
    COMMUNICATE = "COMMUNICATE"
    MEMCPY_OUT_FUSION_BUFFER = "MEMCPY_OUT_FUSION_BUFFER"
    BROADCAST = "BROADCAST"


@dataclass(frozen=True)
class TraceEvent:
    name: str
    category: str
    phase: str  # "B" or "E"
    timestamp_us: int
    pid: int
    tid: int = 0

    def to_json(self) -> dict:
        return {"name": self.name, "cat": self.category, "ph": self.phase,
                "ts": self.timestamp_us, "pid": self.pid, "tid": self.tid}


def check_balanced(events: Iterable[TraceEvent]) -> None:
    """Raise TimelineError unless B/E events nest properly per (pid, tid)."""
    stacks: dict[tuple[int, int], list[TraceEvent]] = {}
    for i, ev in enumerate(events):
        stack = stacks.setdefault((ev.pid, ev.tid), [])
        if ev.phase == "B":
            stack.append(ev)
        elif ev.phase == "E":
            if not stack:
                raise TimelineError(f"event #{i} ({ev.category} {ev.name!r}, pid {ev.pid}) ends a span never begun")
            top = stack.pop()
            if (top.name, top.category) != (ev.name, ev.category):
                raise TimelineError(f"event #{i} ({ev.category} {ev.name!r}, pid {ev.pid}) closes "
                                    f"open span {top.category} {top.name!r}")
        else:
            raise TimelineError(f"event #{i} has unsupported phase {ev.phase!r}")
    for (pid, tid), stack in stacks.items():
        if stack:
            ev = stack[-1]
            raise TimelineError(f"unterminated span {ev.category} {ev.name!r} on pid {pid} tid {tid}")


def serialize_chrome_trace(events: list[TraceEvent]) -> str:
    check_balanced(events)
    return json.dumps([ev.to_json() for ev in events])


def parse_chrome_trace(text: str) -> list[TraceEvent]:
    raw = json.loads(text)
    if not isinstance(raw, list):
        raise TimelineError("trace must be a JSON array of events")
    return [TraceEvent(e["name"], e["cat"], e["ph"], int(e["ts"]), int(e["pid"]), int(e.get("tid", 0)))
            for e in raw]


def merge_rank_traces(paths: Iterable[str | os.PathLike], out_path: str | os.PathLike) -> int:
    """Concatenate per-rank trace files into ``out_path``; returns the event count.

    Timestamps are left as recorded. Each rank's clock starts at its own
    init, so lanes line up only approximately.
    """
    merged = []
    for p in paths:
        try:
            events = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise TimelineError(f"cannot read trace file {p}: {exc}") from exc
        if not isinstance(events, list):
            raise TimelineError(f"trace file {p} is not a JSON array")
        merged.extend(events)
    Path(out_path).write_text(json.dumps(merged))
    return len(merged)


class Timeline:
    """Event sink for one rank. With ``path=None`` every call is a no-op."""

    def __init__(self, path: str | os.PathLike | None = None, pid: int = 0, tid: int = 0):
        self.path = None if path is None else str(path).replace("{rank}", str(pid))
        self.pid = pid
        self.tid = tid
        self.events: list[TraceEvent] = []
        self._t0 = time.monotonic_ns()
        self._last = 0

    @property
    def enabled(self) -> bool:
        return self.path is not None

    def now_us(self) -> int:
        # monotonic_ns never goes backwards; the max() guards integer truncation only.
        ts = (time.monotonic_ns() - self._t0) // 1000
        self._last = max(self._last, ts)
        return self._last

    def record(self, event: TraceEvent) -> None:
        if self.enabled:
            self.events.append(event)

    def begin(self, name: str, category: Category, ts: int | None = None) -> None:
        if self.enabled:
            self.events.append(TraceEvent(name, category.value, "B", self.now_us() if ts is None else ts,
                                          self.pid, self.tid))

    def end(self, name: str, category: Category, ts: int | None = None) -> None:
        if self.enabled:
            self.events.append(TraceEvent(name, category.value, "E", self.now_us() if ts is None else ts,
                                          self.pid, self.tid))

    @contextmanager
    def span(self, name: str, category: Category):
        self.begin(name, category)
        try:
            yield
        finally:
            self.end(name, category)

    def flush(self) -> None:
        if not self.enabled:
            return
        try:
            Path(self.path).write_text(serialize_chrome_trace(self.events))
        except OSError as exc:
            log.warning("timeline disabled, cannot write %s: %s", self.path, exc)
            self.path = None


def record(sink: Timeline | None, event: TraceEvent) -> None:
    if sink is not None:
        sink.record(event)

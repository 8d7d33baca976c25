"""Workload families and phase schedules.

A :class:`WorkloadSpec` is reduced to the axes Table-1-style experiments
vary: access pattern, operation mix, request size and number of streams.
Streams are deterministic request generators; pacing (rate limits, cache
backpressure, waiting on reads) is applied by whoever drives them.
"""

from __future__ import annotations

import bisect
import random
from collections import deque
from dataclasses import dataclass
from typing import Deque, List, NamedTuple, Optional, Sequence, Tuple

PATTERNS = ("random", "sequential")
OPS = ("write", "read", "readwrite")

GiB = 1 << 30
DEFAULT_EXTENT = GiB
# streams get disjoint regions this far apart; reads of a mixed stream use
# the upper half of the stream's region
STREAM_STRIDE = 1 << 50
READ_REGION = 1 << 49


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    pattern: str
    op: str
    request_size: int
    streams: int = 1
    rate_limit: Optional[float] = None  # bytes/s per stream; None = unbounded, 0 = idle
    whole_file: Optional[int] = None  # file size for the write-all/read-all cycle
    extent: int = DEFAULT_EXTENT  # address range for random offsets

    def __post_init__(self) -> None:
        if self.pattern not in PATTERNS:
            raise WorkloadError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.op not in OPS:
            raise WorkloadError(f"op must be one of {OPS}, got {self.op!r}")
        if not isinstance(self.request_size, int) or self.request_size <= 0:
            raise WorkloadError(f"request_size must be a positive integer, got {self.request_size!r}")
        if not isinstance(self.streams, int) or self.streams < 1:
            raise WorkloadError(f"streams must be >= 1, got {self.streams!r}")
        if self.rate_limit is not None and self.rate_limit < 0:
            raise WorkloadError("rate_limit must be >= 0")
        if self.rate_limit is not None and 0 < self.rate_limit < self.request_size:
            raise WorkloadError("rate_limit must allow at least one request per second")
        if self.whole_file is not None:
            if self.whole_file < self.request_size or self.whole_file % self.request_size:
                raise WorkloadError("whole_file must be a positive multiple of request_size")
        if self.extent < self.request_size:
            raise WorkloadError("extent must hold at least one request")

    @property
    def label(self) -> str:
        size = self.request_size
        if size % (1 << 20) == 0:
            txt = f"{size >> 20}m"
        elif size % 1024 == 0:
            txt = f"{size >> 10}k"
        else:
            txt = f"{size}b"
        kind = "wholefile" if self.whole_file else self.pattern
        streams = f"x{self.streams}" if self.streams > 1 else ""
        return f"{kind}-{self.op}-{txt}{streams}"


class Request(NamedTuple):
    op: str  # "read" or "write"
    offset: int
    size: int


class Stream:
    """Endless request generator for one stream of a workload."""

    def __init__(self, spec: WorkloadSpec, index: int, rng: random.Random):
        self.spec = spec
        self.index = index
        self._rng = rng
        self._seq = 0
        self._writes = 0
        self._reads = 0
        self._base = index * STREAM_STRIDE
        self._slots = spec.extent // spec.request_size

    def _op(self) -> str:
        spec = self.spec
        if spec.whole_file:
            per_pass = spec.whole_file // spec.request_size
            if spec.op == "write":
                return "write"
            if spec.op == "read":
                return "read"
            return "write" if (self._seq // per_pass) % 2 == 0 else "read"
        if spec.op == "readwrite":
            return "write" if self._seq % 2 == 0 else "read"
        return spec.op

    def _offset(self, op: str) -> int:
        spec = self.spec
        size = spec.request_size
        if spec.whole_file:
            per_pass = spec.whole_file // size
            return self._base + (self._seq % per_pass) * size
        if spec.pattern == "random":
            return self._base + self._rng.randrange(self._slots) * size
        if op == "read":
            return self._base + READ_REGION + self._reads * size
        return self._base + self._writes * size

    def next_request(self) -> Request:
        op = self._op()
        req = Request(op, self._offset(op), self.spec.request_size)
        self._seq += 1
        if op == "read":
            self._reads += 1
        else:
            self._writes += 1
        return req

    def skip(self, n: int) -> None:
        """Advance past ``n`` requests of a sequential write-only stream."""
        self._seq += n
        self._writes += n

    def take(self, n: int) -> List[Request]:
        return [self.next_request() for _ in range(n)]


def stream_seed(seed: int, *parts: object) -> str:
    # str seeds go through sha512 in random.Random, stable across processes
    return ":".join(str(p) for p in (seed,) + parts)


def build_workload(spec: WorkloadSpec, seed: int, *scope: object) -> List[Stream]:
    """One :class:`Stream` per ``spec.streams``; ``scope`` salts the seed."""
    return [
        Stream(spec, i, random.Random(stream_seed(seed, *scope, i)))
        for i in range(spec.streams)
    ]


@dataclass(frozen=True)
class PhaseSchedule:
    phases: Tuple[Tuple[float, WorkloadSpec], ...]

    def __post_init__(self) -> None:
        if not self.phases:
            raise WorkloadError("schedule needs at least one phase")
        starts = [start for start, _ in self.phases]
        if starts[0] != 0:
            raise WorkloadError("first phase must start at 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise WorkloadError("phase start times must be strictly increasing")

    @classmethod
    def of(cls, phases: Sequence[Tuple[float, WorkloadSpec]]) -> "PhaseSchedule":
        return cls(tuple((float(s), w) for s, w in phases))

    @property
    def starts(self) -> List[float]:
        return [start for start, _ in self.phases]

    def phase_index(self, t: float) -> int:
        if t < 0:
            raise ValueError("t must be >= 0")
        return bisect.bisect_right(self.starts, t) - 1

    def bounds(self, index: int, end: float) -> Tuple[float, float]:
        start = self.phases[index][0]
        stop = self.phases[index + 1][0] if index + 1 < len(self.phases) else end
        return start, min(stop, end)


def active_spec(schedule: PhaseSchedule, t: float) -> WorkloadSpec:
    return schedule.phases[schedule.phase_index(t)][1]


class SlidingWindowLimiter:
    """Admit byte counts so that no ``window``-second span exceeds ``rate``."""

    def __init__(self, rate: float, window: float = 1.0):
        self.budget = rate * window
        self.window = window
        self._log: Deque[Tuple[float, int]] = deque()
        self._used = 0

    def _expire(self, now: float) -> None:
        log = self._log
        while log and log[0][0] <= now - self.window:
            self._used -= log.popleft()[1]

    def room(self, now: float) -> float:
        self._expire(now)
        return self.budget - self._used

    def admit(self, now: float, nbytes: int) -> bool:
        if self.room(now) < nbytes:
            return False
        self._log.append((now, nbytes))
        self._used += nbytes
        return True

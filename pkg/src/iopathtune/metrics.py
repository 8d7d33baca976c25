"""Client statistics snapshots: the record format, and window derivation.

A snapshot is a plain ``key: value`` block, one key per line, terminated by
a blank line::

    snapshot_version: 1
    timestamp_ms: 10000
    client_id: node1
    cur_dirty_bytes: 67108864
    pages_cached_total: 25600
    rpcs_formed_total: 100
    bytes_transferred_total: 104857600
    max_pages_per_rpc: 256
    max_rpcs_in_flight: 8

A trace is any number of such blocks back to back.  Counters ending in
``_total`` are cumulative; rates are derived by the consumer.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Iterator, List, Tuple

from .tuner import TunableParams, WindowMetrics

SNAPSHOT_VERSION = 1

KEYS = (
    "snapshot_version",
    "timestamp_ms",
    "client_id",
    "cur_dirty_bytes",
    "pages_cached_total",
    "rpcs_formed_total",
    "bytes_transferred_total",
    "max_pages_per_rpc",
    "max_rpcs_in_flight",
)
CUMULATIVE = ("pages_cached_total", "rpcs_formed_total", "bytes_transferred_total")


class SnapshotError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingKey(SnapshotError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        super().__init__(f"missing key {name!r}", line)


class DuplicateKey(SnapshotError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        super().__init__(f"duplicate key {name!r}", line)


class UnknownKey(SnapshotError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        super().__init__(f"unknown key {name!r}", line)


class MalformedValue(SnapshotError):
    def __init__(self, name: str, line: int | None = None, detail: str = ""):
        self.name = name
        super().__init__(f"malformed value for {name!r}" + (f": {detail}" if detail else ""), line)


class UnsupportedVersion(SnapshotError):
    def __init__(self, version: int, line: int | None = None):
        self.version = version
        super().__init__(f"unsupported snapshot_version {version}", line)


class WindowError(ValueError):
    pass


class CounterRegression(WindowError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"cumulative counter {name!r} decreased")


class ClockRegression(WindowError):
    def __init__(self) -> None:
        super().__init__("snapshot timestamps do not advance")


class ClientMismatch(WindowError):
    def __init__(self, a: str, b: str):
        super().__init__(f"snapshots belong to different clients: {a!r} vs {b!r}")


@dataclass(frozen=True)
class Snapshot:
    timestamp_ms: int
    client_id: str
    cur_dirty_bytes: int
    pages_cached_total: int
    rpcs_formed_total: int
    bytes_transferred_total: int
    max_pages_per_rpc: int
    max_rpcs_in_flight: int

    @property
    def params(self) -> TunableParams:
        return TunableParams(self.max_pages_per_rpc, self.max_rpcs_in_flight)


_INT_FIELDS = tuple(f.name for f in fields(Snapshot) if f.name != "client_id")


def _parse_int(name: str, raw: str, line: int | None) -> int:
    if not raw.isdigit() or not raw.isascii():
        raise MalformedValue(name, line, f"expected a non-negative integer, got {raw!r}")
    return int(raw)


def _parse_lines(lines: List[Tuple[int | None, str]]) -> Snapshot:
    values: Dict[str, str] = {}
    where: Dict[str, int | None] = {}
    for lineno, text in lines:
        key, sep, raw = text.partition(":")
        key = key.strip()
        if not sep or not key:
            raise SnapshotError(f"expected 'key: value', got {text!r}", lineno)
        if key not in KEYS:
            raise UnknownKey(key, lineno)
        if key in values:
            raise DuplicateKey(key, lineno)
        values[key] = raw.strip()
        where[key] = lineno

    first = lines[0][0] if lines else None
    if "snapshot_version" not in values:
        raise MissingKey("snapshot_version", first)
    version = _parse_int("snapshot_version", values["snapshot_version"], where["snapshot_version"])
    if version != SNAPSHOT_VERSION:
        raise UnsupportedVersion(version, where["snapshot_version"])
    for key in KEYS:
        if key not in values:
            raise MissingKey(key, first)

    kwargs: Dict[str, object] = {}
    for name in _INT_FIELDS:
        kwargs[name] = _parse_int(name, values[name], where[name])
    client_id = values["client_id"]
    if not client_id or any(c.isspace() for c in client_id):
        raise MalformedValue("client_id", where["client_id"], "must be non-empty without whitespace")
    kwargs["client_id"] = client_id
    for name in ("max_pages_per_rpc", "max_rpcs_in_flight"):
        if kwargs[name] == 0:
            raise MalformedValue(name, where[name], "must be >= 1")
    return Snapshot(**kwargs)  # type: ignore[arg-type]


def parse_snapshot(text: str) -> Snapshot:
    """Parse exactly one record; a trailing blank line is optional."""
    lines = [(i, ln) for i, ln in enumerate(text.split("\n"), start=1)]
    while lines and lines[-1][1] == "":
        lines.pop()
    if any(ln.strip() == "" for _, ln in lines):
        raise SnapshotError("blank line inside a single record")
    return _parse_lines(lines)


def serialize_snapshot(s: Snapshot) -> str:
    out = [f"snapshot_version: {SNAPSHOT_VERSION}"]
    out += [f"{key}: {getattr(s, key)}" for key in KEYS[1:]]
    return "\n".join(out) + "\n\n"


def iter_records(text: str) -> Iterator[Tuple[int, Snapshot]]:
    """Yield ``(first_line, snapshot)`` for each record of a trace."""
    block: List[Tuple[int | None, str]] = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line.strip() == "":
            if block:
                yield block[0][0], _parse_lines(block)  # type: ignore[misc]
                block = []
            continue
        block.append((lineno, line))
    if block:
        yield block[0][0], _parse_lines(block)  # type: ignore[misc]


def iter_trace(text: str) -> Iterator[Snapshot]:
    """Yield snapshots from a trace; errors carry the offending line number."""
    for _, snap in iter_records(text):
        yield snap


def parse_trace(text: str) -> List[Snapshot]:
    return list(iter_trace(text))


def serialize_trace(snapshots) -> str:
    return "".join(serialize_snapshot(s) for s in snapshots)


def derive_window(prev: Snapshot, cur: Snapshot) -> WindowMetrics:
    if prev.client_id != cur.client_id:
        raise ClientMismatch(prev.client_id, cur.client_id)
    if cur.timestamp_ms <= prev.timestamp_ms:
        raise ClockRegression()
    for name in CUMULATIVE:
        if getattr(cur, name) < getattr(prev, name):
            raise CounterRegression(name)
    dt = (cur.timestamp_ms - prev.timestamp_ms) / 1000
    return WindowMetrics(
        dirty_bytes=cur.cur_dirty_bytes,
        page_cache_rate=(cur.pages_cached_total - prev.pages_cached_total) / dt,
        rpc_gen_rate=(cur.rpcs_formed_total - prev.rpcs_formed_total) / dt,
        transfer_bw=(cur.bytes_transferred_total - prev.bytes_transferred_total) / dt,
        window_len=dt,
    )

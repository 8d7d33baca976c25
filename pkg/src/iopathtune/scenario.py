"""Scenario description and its YAML config format.

A config mirrors :class:`Scenario` key for key::

    name: standalone-seqwrite-1m
    sim: {duration_s: 600, tick_ms: 10, seed: 1}
    server:
      capacity: 1250MB        # bytes/s; size suffixes allowed
      rpc_overhead_ms: 0.4
      rtt_ms: 0.5
      queue_penalty_ms: 0.1   # extra service time per RPC waiting behind
      penalty_depth: 16       # waiting RPCs that still add a penalty, 0 = all
      queue_limit: 0          # waiting RPCs before arrivals are bounced, 0 = none
      resend_delay_ms: 10
      bounce_cost_ms: 0.05    # server time spent turning one RPC away
    tuner: {enabled: true, period_s: 10, ...}
    defaults: {max_pages_per_rpc: 256, max_rpcs_in_flight: 8}
    clients:
      - id: node1
        max_dirty_bytes: 256MiB
        schedule:
          - start_s: 0
            workload: {pattern: sequential, op: write, request_size: 1MiB, streams: 1}

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml

from .tuner import ConfigError as TunerConfigError
from .tuner import Direction, Memory, Param, TunableParams, TunerConfig
from .workloads import PhaseSchedule, WorkloadError, WorkloadSpec

MiB = 1 << 20


class ConfigError(ValueError):
    """Bad scenario config; ``key`` names the offending location."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class ServerModel:
    capacity: float = 1250e6  # bytes/s
    rpc_overhead: float = 0.4e-3  # s per RPC
    rtt: float = 0.5e-3  # s round trip
    queue_penalty: float = 0.1e-3  # s added per RPC already waiting
    penalty_depth: int = 16  # only this many waiting RPCs add a penalty; 0 = no cap
    queue_limit: int = 0  # 0 disables bouncing
    resend_delay: float = 10e-3  # s before a bounced RPC is sent again
    bounce_cost: float = 0.05e-3  # server s spent rejecting one RPC

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise ConfigError("server.capacity", "must be > 0")
        for name in ("rpc_overhead", "rtt", "queue_penalty", "resend_delay", "bounce_cost"):
            if getattr(self, name) < 0:
                raise ConfigError(f"server.{name}", "must be >= 0")
        if self.queue_limit < 0:
            raise ConfigError("server.queue_limit", "must be >= 0")
        if self.penalty_depth < 0:
            raise ConfigError("server.penalty_depth", "must be >= 0")
        if self.queue_limit and self.rtt + self.resend_delay <= 0:
            raise ConfigError("server.resend_delay", "bounced RPCs need rtt + resend_delay > 0")


@dataclass(frozen=True)
class SimConfig:
    duration_s: float = 600.0
    tick_ms: int = 10
    seed: int = 1
    page_size: int = 4096
    flush_age_s: float = 1.0


@dataclass(frozen=True)
class ClientConfig:
    id: str
    schedule: PhaseSchedule
    max_dirty_bytes: int = 256 * MiB
    tuned: bool = True
    params: Optional[TunableParams] = None  # overrides Scenario.defaults


@dataclass(frozen=True)
class Scenario:
    clients: Tuple[ClientConfig, ...]
    server: ServerModel = ServerModel()
    sim: SimConfig = SimConfig()
    tuner: TunerConfig = TunerConfig()
    tuner_enabled: bool = True
    defaults: TunableParams = TunableParams()
    name: str = "scenario"

    def __post_init__(self) -> None:
        validate(self)

    def params_for(self, client: ClientConfig) -> TunableParams:
        return client.params or self.defaults

    def with_params(self, params: TunableParams) -> "Scenario":
        """Static-params copy: every client pinned to ``params``, tuner off."""
        clients = tuple(replace(c, params=params) for c in self.clients)
        return replace(self, clients=clients, tuner_enabled=False)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, sim=replace(self.sim, seed=seed))


def validate(sc: Scenario) -> None:
    if not sc.clients:
        raise ConfigError("clients", "at least one client is required")
    ids = [c.id for c in sc.clients]
    if len(set(ids)) != len(ids):
        raise ConfigError("clients", "client ids must be unique")
    try:
        sc.tuner.check_params(sc.defaults)
    except TunerConfigError as exc:
        raise ConfigError("defaults", str(exc)) from None
    for i, c in enumerate(sc.clients):
        if not c.id or any(ch.isspace() for ch in c.id):
            raise ConfigError(f"clients[{i}].id", "must be non-empty without whitespace")
        if c.max_dirty_bytes < sc.sim.page_size:
            raise ConfigError(f"clients[{i}].max_dirty_bytes", "must hold at least one page")
        for j, (_, spec) in enumerate(c.schedule.phases):
            where = f"clients[{i}].schedule[{j}].workload"
            if spec.request_size % sc.sim.page_size:
                raise ConfigError(f"{where}.request_size", "must be a multiple of the page size")
            if spec.op != "read" and spec.request_size > c.max_dirty_bytes:
                raise ConfigError(f"{where}.request_size", "larger than max_dirty_bytes")
        try:
            sc.tuner.check_params(sc.params_for(c))
        except TunerConfigError as exc:
            raise ConfigError(f"clients[{i}].params", str(exc)) from None
    if sc.sim.duration_s <= 0:
        raise ConfigError("sim.duration_s", "must be > 0")
    if not isinstance(sc.sim.tick_ms, int) or sc.sim.tick_ms <= 0:
        raise ConfigError("sim.tick_ms", "must be a positive integer")
    period_ms = sc.tuner.period * 1000
    if period_ms != int(period_ms) or int(period_ms) % sc.sim.tick_ms:
        raise ConfigError("sim.tick_ms", "must divide the tuner period")
    if (sc.sim.duration_s * 1000) % sc.sim.tick_ms:
        raise ConfigError("sim.duration_s", "must be a whole number of ticks")
    if sc.sim.flush_age_s <= 0:
        raise ConfigError("sim.flush_age_s", "must be > 0")


# ---------------------------------------------------------------- parsing

_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([KMGT]i?B|B)?\s*$", re.IGNORECASE)
_UNITS = {
    "b": 1, "kb": 1e3, "mb": 1e6, "gb": 1e9, "tb": 1e12,
    "kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30, "tib": 1 << 40,
}


def parse_size(value: Any, key: str) -> float:
    """Bytes from an int/float or a string like ``1MiB`` / ``1250MB``."""
    if isinstance(value, bool):
        raise ConfigError(key, f"expected a size, got {value!r}")
    if isinstance(value, (int, float)):
        return value
    if isinstance(value, str):
        m = _SIZE.match(value)
        if m:
            return float(m.group(1)) * _UNITS[(m.group(2) or "b").lower()]
    raise ConfigError(key, f"expected a size, got {value!r}")


def _int_size(value: Any, key: str) -> int:
    n = parse_size(value, key)
    if n != int(n):
        raise ConfigError(key, f"must be a whole number of bytes, got {value!r}")
    return int(n)


def _number(value: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    return value


def _integer(value: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    return value


def _mapping(value: Any, key: str, allowed: Tuple[str, ...], required: Tuple[str, ...] = ()) -> Mapping:
    if value is None:
        value = {}
    if not isinstance(value, Mapping):
        raise ConfigError(key, "expected a mapping")
    for k in value:
        if k not in allowed:
            raise ConfigError(f"{key}.{k}" if key else str(k), "unknown key")
    for k in required:
        if k not in value:
            raise ConfigError(f"{key}.{k}" if key else k, "missing required key")
    return value


def _workload(raw: Any, key: str) -> WorkloadSpec:
    raw = _mapping(
        raw, key,
        ("pattern", "op", "request_size", "streams", "rate_limit", "whole_file", "extent"),
        ("pattern", "op", "request_size"),
    )
    kwargs: Dict[str, Any] = {
        "pattern": raw["pattern"],
        "op": raw["op"],
        "request_size": _int_size(raw["request_size"], f"{key}.request_size"),
        "streams": _integer(raw.get("streams", 1), f"{key}.streams"),
    }
    if raw.get("rate_limit") is not None:
        kwargs["rate_limit"] = parse_size(raw["rate_limit"], f"{key}.rate_limit")
    if raw.get("whole_file") is not None:
        kwargs["whole_file"] = _int_size(raw["whole_file"], f"{key}.whole_file")
    if raw.get("extent") is not None:
        kwargs["extent"] = _int_size(raw["extent"], f"{key}.extent")
    try:
        return WorkloadSpec(**kwargs)
    except WorkloadError as exc:
        raise ConfigError(key, str(exc)) from None


def _params(raw: Any, key: str) -> TunableParams:
    raw = _mapping(raw, key, ("max_pages_per_rpc", "max_rpcs_in_flight"))
    base = TunableParams()
    return TunableParams(
        _integer(raw.get("max_pages_per_rpc", base.max_pages_per_rpc), f"{key}.max_pages_per_rpc"),
        _integer(raw.get("max_rpcs_in_flight", base.max_rpcs_in_flight), f"{key}.max_rpcs_in_flight"),
    )


def _bounds(raw: Any, key: str) -> Tuple[int, int]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 2:
        raise ConfigError(key, "expected [min, max]")
    return (_integer(raw[0], f"{key}[0]"), _integer(raw[1], f"{key}[1]"))


def scenario_from_dict(doc: Any) -> Scenario:
    doc = _mapping(doc, "", ("name", "sim", "server", "tuner", "defaults", "clients"), ("clients",))

    sim_raw = _mapping(doc.get("sim"), "sim", ("duration_s", "tick_ms", "seed", "page_size", "flush_age_s"))
    d = SimConfig()
    sim = SimConfig(
        duration_s=_number(sim_raw.get("duration_s", d.duration_s), "sim.duration_s"),
        tick_ms=_integer(sim_raw.get("tick_ms", d.tick_ms), "sim.tick_ms"),
        seed=_integer(sim_raw.get("seed", d.seed), "sim.seed"),
        page_size=_int_size(sim_raw.get("page_size", d.page_size), "sim.page_size"),
        flush_age_s=_number(sim_raw.get("flush_age_s", d.flush_age_s), "sim.flush_age_s"),
    )

    srv_raw = _mapping(
        doc.get("server"), "server",
        ("capacity", "rpc_overhead_ms", "rtt_ms", "queue_penalty_ms", "penalty_depth", "queue_limit", "resend_delay_ms", "bounce_cost_ms"),
    )
    s = ServerModel()
    server = ServerModel(
        capacity=parse_size(srv_raw.get("capacity", s.capacity), "server.capacity"),
        rpc_overhead=_number(srv_raw.get("rpc_overhead_ms", s.rpc_overhead * 1e3), "server.rpc_overhead_ms") / 1e3,
        rtt=_number(srv_raw.get("rtt_ms", s.rtt * 1e3), "server.rtt_ms") / 1e3,
        queue_penalty=_number(srv_raw.get("queue_penalty_ms", s.queue_penalty * 1e3), "server.queue_penalty_ms") / 1e3,
        penalty_depth=_integer(srv_raw.get("penalty_depth", s.penalty_depth), "server.penalty_depth"),
        queue_limit=_integer(srv_raw.get("queue_limit", s.queue_limit), "server.queue_limit"),
        resend_delay=_number(srv_raw.get("resend_delay_ms", s.resend_delay * 1e3), "server.resend_delay_ms") / 1e3,
        bounce_cost=_number(srv_raw.get("bounce_cost_ms", s.bounce_cost * 1e3), "server.bounce_cost_ms") / 1e3,
    )

    tun_raw = _mapping(
        doc.get("tuner"), "tuner",
        ("enabled", "period_s", "improve_eps", "contention_drop", "supply_hold", "idle_threshold",
         "mppr_bounds", "mrif_bounds", "initial_direction", "initial_param", "memory"),
    )
    t = TunerConfig()
    try:
        tuner = TunerConfig(
            period=_number(tun_raw.get("period_s", t.period), "tuner.period_s"),
            improve_eps=_number(tun_raw.get("improve_eps", t.improve_eps), "tuner.improve_eps"),
            contention_drop=_number(tun_raw.get("contention_drop", t.contention_drop), "tuner.contention_drop"),
            supply_hold=_number(tun_raw.get("supply_hold", t.supply_hold), "tuner.supply_hold"),
            idle_threshold=parse_size(tun_raw.get("idle_threshold", t.idle_threshold), "tuner.idle_threshold"),
            mppr_bounds=_bounds(tun_raw.get("mppr_bounds", list(t.mppr_bounds)), "tuner.mppr_bounds"),
            mrif_bounds=_bounds(tun_raw.get("mrif_bounds", list(t.mrif_bounds)), "tuner.mrif_bounds"),
            initial_direction=Direction(tun_raw.get("initial_direction", t.initial_direction.value)),
            initial_param=Param(tun_raw.get("initial_param", t.initial_param.value)),
            memory=Memory(tun_raw.get("memory", t.memory.value)),
            page_size=sim.page_size,
        )
    except (TunerConfigError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("tuner", str(exc)) from None
    enabled = tun_raw.get("enabled", True)
    if not isinstance(enabled, bool):
        raise ConfigError("tuner.enabled", "expected true or false")

    defaults = _params(doc.get("defaults"), "defaults")

    raw_clients = doc["clients"]
    if not isinstance(raw_clients, list) or not raw_clients:
        raise ConfigError("clients", "expected a non-empty list")
    clients: List[ClientConfig] = []
    for i, rc in enumerate(raw_clients):
        key = f"clients[{i}]"
        rc = _mapping(rc, key, ("id", "schedule", "max_dirty_bytes", "tuned", "params"), ("id", "schedule"))
        raw_sched = rc["schedule"]
        if not isinstance(raw_sched, list) or not raw_sched:
            raise ConfigError(f"{key}.schedule", "expected a non-empty list")
        phases = []
        for j, rp in enumerate(raw_sched):
            pkey = f"{key}.schedule[{j}]"
            rp = _mapping(rp, pkey, ("start_s", "workload"), ("start_s", "workload"))
            phases.append((_number(rp["start_s"], f"{pkey}.start_s"), _workload(rp["workload"], f"{pkey}.workload")))
        try:
            schedule = PhaseSchedule.of(phases)
        except WorkloadError as exc:
            raise ConfigError(f"{key}.schedule", str(exc)) from None
        tuned = rc.get("tuned", True)
        if not isinstance(tuned, bool):
            raise ConfigError(f"{key}.tuned", "expected true or false")
        clients.append(ClientConfig(
            id=str(rc["id"]),
            schedule=schedule,
            max_dirty_bytes=_int_size(rc.get("max_dirty_bytes", 256 * MiB), f"{key}.max_dirty_bytes"),
            tuned=tuned,
            params=_params(rc["params"], f"{key}.params") if rc.get("params") is not None else None,
        ))

    name = doc.get("name", "scenario")
    if not isinstance(name, str):
        raise ConfigError("name", "expected a string")
    return Scenario(
        clients=tuple(clients), server=server, sim=sim, tuner=tuner,
        tuner_enabled=enabled, defaults=defaults, name=name,
    )


def load_scenario(path: str | Path) -> Scenario:
    """Load a config file; raises ``OSError`` or :class:`ConfigError`."""
    text = Path(path).read_text(encoding="utf-8")
    return loads_scenario(text)


def loads_scenario(text: str) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML: {exc}") from None
    return scenario_from_dict(doc)


def template_names() -> List[str]:
    root = resources.files("iopathtune") / "templates"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def template_text(name: str) -> str:
    path = resources.files("iopathtune") / "templates" / f"{name}.yaml"
    if not path.is_file():
        raise KeyError(name)
    return path.read_text(encoding="utf-8")


def load_template(name: str) -> Scenario:
    return loads_scenario(template_text(name))


def resolve(config: str) -> Scenario:
    """A config path, or the name of a bundled template."""
    path = Path(config)
    if path.exists():
        return load_scenario(path)
    try:
        text = template_text(config)
    except KeyError:
        raise FileNotFoundError(f"no such config file or template: {config}") from None
    return loads_scenario(text)

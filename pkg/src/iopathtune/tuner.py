"""Client-side decision engine for the two I/O-path knobs.

Everything in here is pure: no clock, no I/O.  A driver (the simulator or
the trace replayer) feeds one :class:`WindowMetrics` per tuning period into
:func:`plan_action` and applies whatever comes back.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union


class ConfigError(ValueError):
    """Raised for invalid tuner configuration or initial parameters."""


class Param(str, enum.Enum):
    MPPR = "max_pages_per_rpc"
    MRIF = "max_rpcs_in_flight"

    @property
    def other(self) -> "Param":
        return Param.MRIF if self is Param.MPPR else Param.MPPR


class Direction(str, enum.Enum):
    MULTIPLY = "multiply"
    DIVIDE = "divide"

    @property
    def opposite(self) -> "Direction":
        return Direction.DIVIDE if self is Direction.MULTIPLY else Direction.MULTIPLY


class Verdict(str, enum.Enum):
    IMPROVED = "improved"
    NOT_IMPROVED = "not_improved"


class Memory(str, enum.Enum):
    """Where the repeat/reverse rule looks for the direction to reuse.

    ``GLOBAL`` carries one direction across both knobs: the verdict on the
    action just taken decides the direction of the next action, whichever
    knob that touches.  ``PER_PARAM`` keeps one direction per knob and
    judges it by the window that followed that knob's own last change.
    """

    GLOBAL = "global"
    PER_PARAM = "per_param"


def is_power_of_two(n: int) -> bool:
    return isinstance(n, int) and not isinstance(n, bool) and n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class TunableParams:
    max_pages_per_rpc: int = 256
    max_rpcs_in_flight: int = 8

    def get(self, param: Param) -> int:
        return getattr(self, param.value)

    def with_value(self, param: Param, value: int) -> "TunableParams":
        return replace(self, **{param.value: value})


@dataclass(frozen=True)
class WindowMetrics:
    """What the client saw during one observation window.

    Rates are per second; ``dirty_bytes`` is the level at the window's end.
    """

    dirty_bytes: float
    page_cache_rate: float
    rpc_gen_rate: float
    transfer_bw: float
    window_len: float

    def __post_init__(self) -> None:
        for name in ("dirty_bytes", "page_cache_rate", "rpc_gen_rate", "transfer_bw"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.window_len <= 0:
            raise ValueError(f"window_len must be > 0, got {self.window_len}")


@dataclass(frozen=True)
class TunerConfig:
    period: float = 10.0
    improve_eps: float = 0.02
    contention_drop: float = 0.30
    supply_hold: float = 0.90
    idle_threshold: float = 1e6  # bytes/s
    mppr_bounds: Tuple[int, int] = (16, 4096)
    mrif_bounds: Tuple[int, int] = (1, 256)
    initial_direction: Direction = Direction.MULTIPLY
    initial_param: Param = Param.MPPR
    memory: Memory = Memory.PER_PARAM
    page_size: int = 4096

    def __post_init__(self) -> None:
        if not self.period > 0:
            raise ConfigError(f"period must be > 0, got {self.period}")
        if not 0 < self.improve_eps < 1:
            raise ConfigError(f"improve_eps must be in (0, 1), got {self.improve_eps}")
        if not 0 < self.contention_drop < 1:
            raise ConfigError(f"contention_drop must be in (0, 1), got {self.contention_drop}")
        if not 0 < self.supply_hold <= 1:
            raise ConfigError(f"supply_hold must be in (0, 1], got {self.supply_hold}")
        if self.idle_threshold < 0:
            raise ConfigError(f"idle_threshold must be >= 0, got {self.idle_threshold}")
        if not is_power_of_two(self.page_size):
            raise ConfigError(f"page_size must be a power of two, got {self.page_size}")
        for name in ("mppr_bounds", "mrif_bounds"):
            lo, hi = getattr(self, name)
            if not (is_power_of_two(lo) and is_power_of_two(hi)) or lo > hi:
                raise ConfigError(f"{name} must be powers of two with min <= max, got {(lo, hi)}")
        # enum coercion keeps configs built from plain strings working
        object.__setattr__(self, "initial_direction", Direction(self.initial_direction))
        object.__setattr__(self, "initial_param", Param(self.initial_param))
        object.__setattr__(self, "memory", Memory(self.memory))

    def bounds(self, param: Param) -> Tuple[int, int]:
        return self.mppr_bounds if param is Param.MPPR else self.mrif_bounds

    def check_params(self, params: TunableParams) -> None:
        for param in Param:
            value = params.get(param)
            lo, hi = self.bounds(param)
            if not is_power_of_two(value):
                raise ConfigError(f"{param.value}={value!r} is not a power of two")
            if not lo <= value <= hi:
                raise ConfigError(f"{param.value}={value} outside bounds [{lo}, {hi}]")


@dataclass(frozen=True)
class TuningAction:
    param: Param
    direction: Direction
    pre_value: int
    post_value: int


@dataclass(frozen=True)
class Hold:
    kind = "hold"


@dataclass(frozen=True)
class Apply:
    action: TuningAction
    kind = "apply"


@dataclass(frozen=True)
class Revert:
    param: Param
    restored_value: int
    action: TuningAction  # the revert itself, as stored in last_action
    kind = "revert"


ActionDecision = Union[Hold, Apply, Revert]


@dataclass(frozen=True)
class TunerState:
    cfg: TunerConfig
    params: TunableParams
    turn: int = 0
    next_param: Param = Param.MPPR
    last_action: Optional[TuningAction] = None
    prev_window: Optional[WindowMetrics] = None
    # per-knob (direction, verdict) of that knob's latest action; PER_PARAM memory only
    mppr_memory: Optional[Tuple[Direction, Verdict]] = field(default=None, repr=False)
    mrif_memory: Optional[Tuple[Direction, Verdict]] = field(default=None, repr=False)

    def memory_for(self, param: Param) -> Optional[Tuple[Direction, Verdict]]:
        return self.mppr_memory if param is Param.MPPR else self.mrif_memory


def init_state(cfg: TunerConfig, initial: TunableParams) -> TunerState:
    cfg.check_params(initial)
    return TunerState(cfg=cfg, params=initial, next_param=cfg.initial_param)


def apply_step(value: int, direction: Direction, bounds: Tuple[int, int]) -> int:
    lo, hi = bounds
    stepped = value * 2 if direction is Direction.MULTIPLY else value // 2
    return min(max(stepped, lo), hi)


def evaluate_improvement(prev_bw: float, cur_bw: float, eps: float) -> Verdict:
    if prev_bw == 0:
        return Verdict.IMPROVED if cur_bw > 0 else Verdict.NOT_IMPROVED
    if cur_bw >= prev_bw * (1 + eps):
        return Verdict.IMPROVED
    return Verdict.NOT_IMPROVED


def detect_contention(prev: WindowMetrics, cur: WindowMetrics, cfg: TunerConfig) -> bool:
    """Delivery collapsed while supply held up and the backlog grew."""
    return (
        cur.transfer_bw < (1 - cfg.contention_drop) * prev.transfer_bw
        and cur.rpc_gen_rate >= cfg.supply_hold * prev.rpc_gen_rate
        and cur.dirty_bytes >= prev.dirty_bytes
    )


def _is_idle(window: WindowMetrics, cfg: TunerConfig) -> bool:
    return (
        window.transfer_bw < cfg.idle_threshold
        and window.page_cache_rate * cfg.page_size < cfg.idle_threshold
    )


def _step(state: TunerState, param: Param, direction: Direction) -> TuningAction:
    pre = state.params.get(param)
    post = apply_step(pre, direction, state.cfg.bounds(param))
    return TuningAction(param, direction, pre, post)


def _remember(state: TunerState, param: Param, entry: Tuple[Direction, Verdict]) -> TunerState:
    if param is Param.MPPR:
        return replace(state, mppr_memory=entry)
    return replace(state, mrif_memory=entry)


def plan_action(state: TunerState, window: WindowMetrics) -> Tuple[TunerState, ActionDecision]:
    cfg = state.cfg
    advanced = replace(state, turn=state.turn + 1, prev_window=window)

    if _is_idle(window, cfg):
        return advanced, Hold()

    last = state.last_action
    if last is None:
        action = _step(state, state.next_param, cfg.initial_direction)
        new_state = replace(
            advanced,
            params=state.params.with_value(action.param, action.post_value),
            last_action=action,
            next_param=action.param.other,
        )
        return new_state, Apply(action)

    prev = state.prev_window
    if prev is not None and detect_contention(prev, window, cfg):
        current = state.params.get(last.param)
        undo = TuningAction(last.param, last.direction.opposite, current, last.pre_value)
        new_state = replace(
            advanced,
            params=state.params.with_value(last.param, last.pre_value),
            last_action=undo,
        )
        return new_state, Revert(last.param, last.pre_value, undo)

    if prev is None:
        verdict = Verdict.NOT_IMPROVED
    else:
        verdict = evaluate_improvement(prev.transfer_bw, window.transfer_bw, cfg.improve_eps)

    target = state.next_param
    if cfg.memory is Memory.GLOBAL:
        base = last.direction
        ok = verdict is Verdict.IMPROVED
    else:
        advanced = _remember(advanced, last.param, (last.direction, verdict))
        remembered = advanced.memory_for(target)
        if remembered is None:
            base, ok = cfg.initial_direction, True
        else:
            base, ok = remembered[0], remembered[1] is Verdict.IMPROVED
    direction = base if ok else base.opposite

    action = _step(state, target, direction)
    new_state = replace(
        advanced,
        params=state.params.with_value(target, action.post_value),
        last_action=action,
        next_param=target.other,
    )
    return new_state, Apply(action)

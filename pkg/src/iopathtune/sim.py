"""Fixed-timestep model of N clients writing through one storage server.

Each tick runs the I/O path in order:

1. applications issue requests (writes land in the dirty cache, blocking
   when the client's dirty limit is reached; reads become read RPCs),
2. dirty runs are cut into RPCs: full RPCs eagerly from contiguous pages;
   the rest is flushed once a run has sat for ``flush_age``, or at once when
   a writer is blocked on the dirty limit and nothing is queued to send
   (cache pressure).  Flushed runs are packed whole into RPCs of up to
   ``max_pages_per_rpc`` pages,
3. queued RPCs are dispatched up to ``max_rpcs_in_flight``,
4. the server drains its FIFO inside the tick.  Service is tracked in
   continuous time, so an ack that lands mid-tick frees a window slot and
   dispatches the next RPC right away,
5. on tuning-period boundaries every client is snapshotted and its tuner
   (if any) decides the next parameters.

Per-RPC service cost is ``rpc_overhead + size / capacity`` plus
``queue_penalty`` for every RPC already waiting, counting at most
``penalty_depth`` of them.  When more than
``queue_limit`` RPCs are waiting, new arrivals are bounced: the server
spends ``bounce_cost`` turning each away and the client sends it again
after ``rtt + resend_delay``.  A resend counts as a newly formed RPC.
"""

from __future__ import annotations

import bisect
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from .metrics import Snapshot, derive_window
from .scenario import ClientConfig, ConfigError, Scenario, validate
from .tuner import (
    ActionDecision,
    Apply,
    Hold,
    Revert,
    TunableParams,
    TunerState,
    init_state,
    is_power_of_two,
    plan_action,
)
from .workloads import Request, SlidingWindowLimiter, WorkloadSpec, build_workload

log = logging.getLogger(__name__)

INF = float("inf")


class InvalidScenario(ValueError):
    """The scenario cannot be simulated; ``key`` names where it went wrong."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message)


class UnknownClient(KeyError):
    pass


class InvariantViolation(AssertionError):
    pass


class _Run:
    """A contiguous stretch of dirty pages from one stream."""

    __slots__ = ("end", "pages", "stamp", "listed")

    def __init__(self, end: int, pages: int, stamp: float):
        self.end = end  # byte offset just past the run
        self.pages = pages
        self.stamp = stamp  # time of the latest append
        self.listed = False


class _StreamState:
    __slots__ = ("stream", "limiter", "pending", "reads_out", "open_run")

    def __init__(self, stream, rate: Optional[float]):
        self.stream = stream
        self.limiter = SlidingWindowLimiter(rate) if rate else None
        self.pending: Optional[Request] = None  # drawn but not yet admitted
        self.reads_out = 0
        self.open_run: Optional[_Run] = None


class _Client:
    def __init__(self, cfg: ClientConfig, params: TunableParams, page_size: int):
        self.cfg = cfg
        self.id = cfg.id
        self.mppr = params.max_pages_per_rpc
        self.mrif = params.max_rpcs_in_flight
        self.max_dirty = cfg.max_dirty_bytes
        self.page_size = page_size
        self.phase = -1
        self.spec: Optional[WorkloadSpec] = None
        self.idle = False
        self.streams: List[_StreamState] = []
        self.runs: List[_Run] = []
        # lets _form skip its scan: a lower bound on run stamps, and whether
        # some run may hold a full RPC
        self.oldest_stamp = INF
        self.may_fill = False
        # batches of [count, pages, stream-or-None]; None marks a write RPC
        self.rpc_queue: Deque[list] = deque()
        self.pending_acks: Deque[Tuple[float, tuple]] = deque()
        self.in_flight = 0
        self.in_flight_bytes = 0
        self.queued_bytes = 0
        self.cache_bytes = 0
        self.unacked_write = 0
        # cumulative counters
        self.issued = 0
        self.pages_cached = 0
        self.rpcs_formed = 0
        self.acked = 0
        # formed/dispatched RPCs survive a shrink; these bound the leftovers
        self.window_grace = 0
        self.size_grace = 0

    @property
    def params(self) -> TunableParams:
        return TunableParams(self.mppr, self.mrif)

    def snapshot(self, t_ms: int) -> Snapshot:
        return Snapshot(
            timestamp_ms=t_ms,
            client_id=self.id,
            cur_dirty_bytes=self.unacked_write,
            pages_cached_total=self.pages_cached,
            rpcs_formed_total=self.rpcs_formed,
            bytes_transferred_total=self.acked,
            max_pages_per_rpc=self.mppr,
            max_rpcs_in_flight=self.mrif,
        )


@dataclass
class Decision:
    client_id: str
    turn: int
    time_s: float
    decision: str  # hold | apply | revert
    param: str = ""
    old: Optional[int] = None
    new: Optional[int] = None

    @classmethod
    def from_action(cls, client_id: str, turn: int, time_s: float, d: ActionDecision) -> "Decision":
        if isinstance(d, Apply):
            a = d.action
            return cls(client_id, turn, time_s, "apply", a.param.value, a.pre_value, a.post_value)
        if isinstance(d, Revert):
            a = d.action
            return cls(client_id, turn, time_s, "revert", a.param.value, a.pre_value, a.post_value)
        return cls(client_id, turn, time_s, "hold")


@dataclass
class ClientResult:
    id: str
    snapshots: List[Snapshot] = field(default_factory=list)
    decisions: List[Decision] = field(default_factory=list)
    phase_starts_ms: List[int] = field(default_factory=list)
    phase_labels: List[str] = field(default_factory=list)


@dataclass
class SimResult:
    scenario: Scenario
    clients: Dict[str, ClientResult]
    ticks: int = 0

    def bandwidth(self, client_id: str, start_s: float, end_s: float) -> float:
        """Mean acked bytes/s between the snapshots nearest ``start_s``/``end_s``."""
        snaps = self.clients[client_id].snapshots
        times = [s.timestamp_ms for s in snaps]
        i = bisect.bisect_left(times, round(start_s * 1000))
        j = bisect.bisect_right(times, round(end_s * 1000)) - 1
        if i >= len(snaps) or j <= i:
            return 0.0
        a, b = snaps[i], snaps[j]
        return (b.bytes_transferred_total - a.bytes_transferred_total) / ((b.timestamp_ms - a.timestamp_ms) / 1000)

    def steady_bandwidth(self, client_id: str, start_s: float, end_s: float) -> float:
        """Mean bandwidth over the final half of ``[start_s, end_s]``."""
        return self.bandwidth(client_id, start_s + (end_s - start_s) / 2, end_s)

    def total_steady_bandwidth(self) -> float:
        end = self.scenario.sim.duration_s
        return sum(self.steady_bandwidth(cid, 0.0, end) for cid in self.clients)

    def phase_windows(self, client_id: str) -> List[Tuple[int, str, float, float]]:
        cr = self.clients[client_id]
        end = self.scenario.sim.duration_s
        out = []
        for k, (start_ms, label) in enumerate(zip(cr.phase_starts_ms, cr.phase_labels)):
            stop = cr.phase_starts_ms[k + 1] / 1000 if k + 1 < len(cr.phase_starts_ms) else end
            out.append((k, label, start_ms / 1000, min(stop, end)))
        return out


class Simulation:
    """One run of a :class:`Scenario`; drive with :meth:`run` or :meth:`step`."""

    def __init__(self, scenario: Scenario, check: bool = False):
        try:
            validate(scenario)
        except ConfigError as exc:
            raise InvalidScenario(str(exc), exc.key) from exc
        self.sc = scenario
        self.check = check
        sim = scenario.sim
        self.tick_ms = sim.tick_ms
        self.dt = sim.tick_ms / 1000
        self.page = sim.page_size
        self.flush_age = sim.flush_age_s
        self.n_ticks = round(sim.duration_s * 1000) // sim.tick_ms
        self.period_ticks = round(scenario.tuner.period * 1000) // sim.tick_ms
        srv = scenario.server
        self.capacity = srv.capacity
        self.overhead = srv.rpc_overhead
        self.half_rtt = srv.rtt / 2
        self.penalty = srv.queue_penalty
        self.depth = srv.penalty_depth or INF
        self.queue_limit = srv.queue_limit or None
        self.bounce = srv.rtt + srv.resend_delay
        self.bounce_cost = srv.bounce_cost
        self.clients: Dict[str, _Client] = {}
        self.results: Dict[str, ClientResult] = {}
        self.tuners: Dict[str, TunerState] = {}
        for c in scenario.clients:
            self.clients[c.id] = _Client(c, scenario.params_for(c), self.page)
            self.results[c.id] = ClientResult(c.id)
            if scenario.tuner_enabled and c.tuned:
                self.tuners[c.id] = init_state(scenario.tuner, scenario.params_for(c))
        self.order = list(self.clients.values())
        self.arrivals: List[tuple] = []  # sorted (time, seq, rpc)
        self.seq = 0
        self.free_at = 0.0
        self.busy_in_tick = 0.0
        self.tick = 0
        for cl in self.order:
            self.results[cl.id].snapshots.append(cl.snapshot(0))

    # ------------------------------------------------------------ control

    def set_params(self, client_id: str, params: TunableParams) -> None:
        try:
            cl = self.clients[client_id]
        except KeyError:
            raise UnknownClient(client_id) from None
        for v in (params.max_pages_per_rpc, params.max_rpcs_in_flight):
            if not is_power_of_two(v):
                raise ValueError(f"parameter {v!r} is not a power of two")
        if params.max_rpcs_in_flight < cl.mrif:
            cl.window_grace = max(cl.window_grace, cl.in_flight)
        if params.max_pages_per_rpc < cl.mppr:
            cl.size_grace = max(cl.size_grace, cl.mppr)
            cl.may_fill = True
        cl.mppr = params.max_pages_per_rpc
        cl.mrif = params.max_rpcs_in_flight

    def snapshot(self, client_id: str) -> Snapshot:
        try:
            cl = self.clients[client_id]
        except KeyError:
            raise UnknownClient(client_id) from None
        return cl.snapshot(self.tick * self.tick_ms)

    # ------------------------------------------------------------ tick phases

    def _switch_phase(self, cl: _Client, t_ms: int) -> None:
        sched = cl.cfg.schedule
        k = sched.phase_index(t_ms / 1000)
        if k == cl.phase:
            return
        cl.phase = k
        spec = sched.phases[k][1]
        cl.spec = spec
        cl.idle = spec.rate_limit == 0
        streams = build_workload(spec, self.sc.sim.seed, cl.id, k)
        cl.streams = [_StreamState(s, spec.rate_limit) for s in streams]
        res = self.results[cl.id]
        res.phase_starts_ms.append(t_ms)
        res.phase_labels.append(spec.label)

    def _write(self, cl: _Client, st: _StreamState, req: Request, now: float) -> None:
        pages = req.size // self.page
        run = st.open_run
        if run is not None and run.end == req.offset:
            run.end += req.size
            run.pages += pages
            run.stamp = now
            if not run.listed:
                run.listed = True
                cl.runs.append(run)
                if now < cl.oldest_stamp:
                    cl.oldest_stamp = now
        else:
            run = _Run(req.offset + req.size, pages, now)
            run.listed = True
            st.open_run = run
            cl.runs.append(run)
            if now < cl.oldest_stamp:
                cl.oldest_stamp = now
        if run.pages >= cl.mppr:
            cl.may_fill = True
        cl.cache_bytes += req.size
        cl.unacked_write += req.size
        cl.pages_cached += pages
        cl.issued += req.size

    def _read(self, cl: _Client, st: _StreamState, req: Request) -> None:
        chunk = cl.mppr * self.page
        full, rest = divmod(req.size, chunk)
        if full:
            cl.rpc_queue.append([full, cl.mppr, st])
        if rest:
            cl.rpc_queue.append([1, rest // self.page, st])
        n = full + (1 if rest else 0)
        st.reads_out = n
        cl.rpcs_formed += n
        cl.queued_bytes += req.size
        cl.issued += req.size

    def _issue(self, cl: _Client, st: _StreamState, now: float) -> None:
        """Let one stream issue requests until it blocks."""
        spec = cl.spec
        limiter = st.limiter
        stream = st.stream
        size = spec.request_size
        while st.reads_out == 0:
            req = st.pending
            if req is None:
                # sequential writes are batched: a run of n requests is one append
                if spec.pattern == "sequential" and not spec.whole_file and spec.op == "write":
                    room = (cl.max_dirty - cl.unacked_write) // size
                    if limiter is not None:
                        room = min(room, int(limiter.room(now) // size))
                    if room <= 0:
                        return
                    first = stream.next_request()
                    stream.skip(room - 1)
                    batch = Request("write", first.offset, size * room)
                    if limiter is not None:
                        limiter.admit(now, batch.size)
                    self._write(cl, st, batch, now)
                    return
                req = stream.next_request()
            if req.op == "write":
                if cl.unacked_write + req.size > cl.max_dirty:
                    st.pending = req
                    return
                if limiter is not None and not limiter.admit(now, req.size):
                    st.pending = req
                    return
                st.pending = None
                self._write(cl, st, req, now)
            else:
                if limiter is not None and not limiter.admit(now, req.size):
                    st.pending = req
                    return
                st.pending = None
                self._read(cl, st, req)

    def _form(self, cl: _Client, now: float) -> None:
        if not cl.runs:
            return
        m = cl.mppr
        page = self.page
        aged_before = now - self.flush_age
        if not cl.rpc_queue and any(st.pending is not None and st.pending.op == "write" for st in cl.streams):
            aged_before = INF
        elif not cl.may_fill and cl.oldest_stamp > aged_before:
            return
        q = cl.rpc_queue
        keep = []
        formed = 0
        formed_bytes = 0
        pack = 0  # pages of flushed runs gathered into the current partial RPC
        for run in cl.runs:
            full = run.pages // m
            if full:
                q.append([full, m, None])
                run.pages -= full * m
                formed += full
                formed_bytes += full * m * page
            if run.pages and run.stamp <= aged_before:
                # the flusher packs whole runs into one RPC, like a multi-extent BRW
                if pack + run.pages > m:
                    q.append([1, pack, None])
                    formed += 1
                    pack = 0
                pack += run.pages
                formed_bytes += run.pages * page
                run.pages = 0
            if run.pages:
                keep.append(run)
            else:
                run.listed = False
        if pack:
            q.append([1, pack, None])
            formed += 1
        cl.runs = keep
        cl.may_fill = False
        cl.oldest_stamp = min((r.stamp for r in keep), default=INF)
        cl.rpcs_formed += formed
        cl.cache_bytes -= formed_bytes
        cl.queued_bytes += formed_bytes

    def _dispatch(self, cl: _Client, now: float) -> None:
        q = cl.rpc_queue
        if not q or cl.in_flight >= cl.mrif:
            return
        arrive = now + self.half_rtt
        page = self.page
        arrivals = self.arrivals
        while q and cl.in_flight < cl.mrif:
            batch = q[0]
            nbytes = batch[1] * page
            rpc = (cl, nbytes, batch[2])
            batch[0] -= 1
            if batch[0] == 0:
                q.popleft()
            cl.in_flight += 1
            cl.in_flight_bytes += nbytes
            cl.queued_bytes -= nbytes
            self.seq += 1
            entry = (arrive, self.seq, rpc)
            if not arrivals or arrivals[-1] < entry:
                arrivals.append(entry)
            else:
                bisect.insort(arrivals, entry)

    def _ack(self, rpc: tuple, at: float) -> None:
        cl, nbytes, st = rpc
        cl.in_flight -= 1
        cl.in_flight_bytes -= nbytes
        cl.acked += nbytes
        if st is None:
            cl.unacked_write -= nbytes
        else:
            st.reads_out -= 1
            if st.reads_out == 0 and not cl.idle and st in cl.streams:
                self._issue(cl, st, at)
        self._dispatch(cl, at)

    def _serve(self, t0: float, t1: float) -> None:
        arrivals = self.arrivals
        overhead = self.overhead
        capacity = self.capacity
        penalty = self.penalty
        limit = self.queue_limit
        depth = self.depth
        half = self.half_rtt
        page = self.page
        insort = bisect.insort
        bisect_right = bisect.bisect_right
        free_at = self.free_at
        busy = min(free_at, t1) - t0 if free_at > t0 else 0.0
        while arrivals:
            s = arrivals[0][0]
            if s < free_at:
                s = free_at
            if s >= t1:
                break
            waiting = bisect_right(arrivals, (s, INF))
            if limit is not None and waiting > limit:
                bounced = arrivals[limit:waiting]
                del arrivals[limit:waiting]
                for when, _, rpc in bounced:
                    rpc[0].rpcs_formed += 1
                    self.seq += 1
                    insort(arrivals, (when + self.bounce, self.seq, rpc))
                free_at = s + self.bounce_cost * len(bounced)
                busy += min(free_at, t1) - s
                continue
            rpc = arrivals.pop(0)[2]
            cl, nbytes, st = rpc
            free_at = s + overhead + nbytes / capacity + penalty * (waiting - 1 if waiting <= depth else depth)
            busy += (free_at if free_at < t1 else t1) - s
            ack = free_at + half
            if ack >= t1:
                cl.pending_acks.append((ack, rpc))
                continue
            if st is not None:
                self.free_at = free_at
                self._ack(rpc, ack)
                continue
            # write ack, inlined: free the slot and refill the window
            cl.in_flight -= 1
            cl.in_flight_bytes -= nbytes
            cl.acked += nbytes
            cl.unacked_write -= nbytes
            q = cl.rpc_queue
            if q and cl.in_flight < cl.mrif:
                arrive = ack + half
                while q and cl.in_flight < cl.mrif:
                    batch = q[0]
                    nb = batch[1] * page
                    batch[0] -= 1
                    if batch[0] == 0:
                        q.popleft()
                    cl.in_flight += 1
                    cl.in_flight_bytes += nb
                    cl.queued_bytes -= nb
                    self.seq += 1
                    entry = (arrive, self.seq, (cl, nb, batch[2]))
                    if arrivals and arrivals[-1] > entry:
                        insort(arrivals, entry)
                    else:
                        arrivals.append(entry)
        self.free_at = free_at
        self.busy_in_tick = busy

    # ------------------------------------------------------------ main loop

    def step(self) -> None:
        t_ms = self.tick * self.tick_ms
        t0 = t_ms / 1000
        t1 = (t_ms + self.tick_ms) / 1000
        for cl in self.order:
            self._switch_phase(cl, t_ms)
            if not cl.idle:
                for st in cl.streams:
                    self._issue(cl, st, t0)
            self._form(cl, t0)
            self._dispatch(cl, t0)
        for cl in self.order:
            pend = cl.pending_acks
            while pend and pend[0][0] < t1:
                at, rpc = pend.popleft()
                self._ack(rpc, at)
        self._serve(t0, t1)
        self.tick += 1
        if self.check:
            self._check_invariants()
        if self.tick % self.period_ticks == 0:
            self._period_boundary()

    def _period_boundary(self) -> None:
        t_ms = self.tick * self.tick_ms
        turn_time = t_ms / 1000
        for cl in self.order:
            res = self.results[cl.id]
            snap = cl.snapshot(t_ms)
            prev = res.snapshots[-1]
            res.snapshots.append(snap)
            turn = len(res.decisions) + 1
            state = self.tuners.get(cl.id)
            if state is None:
                res.decisions.append(Decision(cl.id, turn, turn_time, "hold"))
                continue
            state, decision = plan_action(state, derive_window(prev, snap))
            self.tuners[cl.id] = state
            if not isinstance(decision, Hold):
                self.set_params(cl.id, state.params)
            res.decisions.append(Decision.from_action(cl.id, turn, turn_time, decision))

    def run(self) -> SimResult:
        while self.tick < self.n_ticks:
            self.step()
        return SimResult(self.sc, self.results, self.tick)

    def _check_invariants(self) -> None:
        if self.busy_in_tick > self.dt + 1e-12:
            raise InvariantViolation(f"server busy {self.busy_in_tick} s in a {self.dt} s tick")
        for cl in self.order:
            cache = sum(r.pages for r in cl.runs) * self.page
            queued = sum(b[0] * b[1] for b in cl.rpc_queue) * self.page
            if cache != cl.cache_bytes or queued != cl.queued_bytes:
                raise InvariantViolation(f"{cl.id}: byte bookkeeping drifted")
            if cl.issued != cl.cache_bytes + cl.queued_bytes + cl.in_flight_bytes + cl.acked:
                raise InvariantViolation(f"{cl.id}: bytes not conserved at tick {self.tick}")
            if cl.in_flight > max(cl.mrif, cl.window_grace):
                raise InvariantViolation(f"{cl.id}: {cl.in_flight} RPCs in flight > {cl.mrif}")
            cl.window_grace = min(cl.window_grace, cl.in_flight)
            if cl.unacked_write > cl.max_dirty:
                raise InvariantViolation(f"{cl.id}: dirty bytes over the limit")
            largest = max((b[1] for b in cl.rpc_queue), default=0)
            if largest > max(cl.mppr, cl.size_grace):
                raise InvariantViolation(f"{cl.id}: RPC of {largest} pages > {cl.mppr}")
            if not cl.rpc_queue:
                cl.size_grace = 0


def run(scenario: Scenario, check: bool = False) -> SimResult:
    return Simulation(scenario, check=check).run()


def power_grid(bounds: Tuple[int, int]) -> List[int]:
    lo, hi = bounds
    out = []
    v = lo
    while v <= hi:
        out.append(v)
        v *= 2
    return out


def full_grid(scenario: Scenario) -> List[TunableParams]:
    """Every power-of-two pair inside the tuner bounds, mppr-major."""
    cfg = scenario.tuner
    return [
        TunableParams(m, r)
        for m in power_grid(cfg.mppr_bounds)
        for r in power_grid(cfg.mrif_bounds)
    ]


@dataclass
class SweepResult:
    points: List[Tuple[TunableParams, float]]  # (params, steady bytes/s), grid order

    @property
    def argmax(self) -> Tuple[TunableParams, float]:
        # strict > keeps the first maximum in grid order on ties
        best = self.points[0]
        for p in self.points[1:]:
            if p[1] > best[1]:
                best = p
        return best

    def bandwidth(self, params: TunableParams) -> float:
        for p, bw in self.points:
            if p == params:
                return bw
        raise KeyError(params)

    def matrix(self) -> Tuple[List[int], List[int], List[List[float]]]:
        """Rows are mrif values, columns mppr values."""
        mpprs = sorted({p.max_pages_per_rpc for p, _ in self.points})
        mrifs = sorted({p.max_rpcs_in_flight for p, _ in self.points})
        lookup = {(p.max_pages_per_rpc, p.max_rpcs_in_flight): bw for p, bw in self.points}
        return mpprs, mrifs, [[lookup.get((m, r), float("nan")) for m in mpprs] for r in mrifs]


def steady_point(
    scenario: Scenario, params: TunableParams, windows: Optional[Sequence[Tuple[float, float]]] = None
) -> List[float]:
    """Total steady bandwidth with every client pinned to ``params``.

    One value per ``(start, end)`` window, each measured over its final
    half; the default is the whole run.
    """
    res = run(scenario.with_params(params))
    windows = windows or [(0.0, scenario.sim.duration_s)]
    return [sum(res.steady_bandwidth(cid, a, b) for cid in res.clients) for a, b in windows]


def _sweep_job(args):
    return steady_point(*args)


def sweep_windows(
    scenario: Scenario,
    windows: Sequence[Tuple[float, float]],
    grid: Optional[Sequence[TunableParams]] = None,
    jobs: int = 1,
) -> List[SweepResult]:
    """Like :func:`sweep`, scoring every grid point on several time windows at once."""
    grid = list(grid) if grid is not None else full_grid(scenario)
    if not grid:
        raise InvalidScenario("sweep grid is empty")
    for p in grid:
        try:
            scenario.tuner.check_params(p)
        except ValueError as exc:
            raise InvalidScenario(str(exc)) from exc
    Simulation(scenario)  # validate once up front
    work = [(scenario, p, list(windows)) for p in grid]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_sweep_job, work, chunksize=1))
    else:
        values = [_sweep_job(w) for w in work]
    return [SweepResult([(p, v[i]) for p, v in zip(grid, values)]) for i in range(len(windows))]


def sweep(scenario: Scenario, grid: Optional[Sequence[TunableParams]] = None, jobs: int = 1) -> SweepResult:
    """Run ``scenario`` once per grid point with static params.

    Points are independent, so ``jobs > 1`` fans them out to worker
    processes; results come back in grid order either way.
    """
    return sweep_windows(scenario, [(0.0, scenario.sim.duration_s)], grid, jobs)[0]

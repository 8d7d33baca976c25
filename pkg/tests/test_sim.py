from dataclasses import replace

import pytest

from iopathtune.scenario import ClientConfig, ConfigError, Scenario, ServerModel, SimConfig, load_template
from iopathtune.sim import (
    InvalidScenario,
    Simulation,
    SweepResult,
    UnknownClient,
    full_grid,
    run,
    sweep,
)
from iopathtune.tuner import TunableParams
from iopathtune.workloads import PhaseSchedule, WorkloadSpec

MiB = 1 << 20
PAGE = 4096

# the plain pipeline: capacity, per-RPC overhead and RTT only
PLAIN = ServerModel(capacity=1250e6, rpc_overhead=0.4e-3, rtt=0.5e-3, queue_penalty=0, queue_limit=0)
SEQ_WRITE = WorkloadSpec("sequential", "write", MiB)


def single(spec=SEQ_WRITE, params=TunableParams(), server=PLAIN, duration=60, tuned=False, **client):
    c = ClientConfig("node1", PhaseSchedule.of([(0, spec)]), params=params, **client)
    return Scenario(clients=(c,), server=server, sim=SimConfig(duration_s=duration), tuner_enabled=tuned)


def closed_form(mppr, mrif, server=PLAIN):
    s = mppr * PAGE
    o, c, rtt = server.rpc_overhead, server.capacity, server.rtt
    return min(s / (o + s / c), mrif * s / (rtt + o + s / c))


def shorten(sc, seconds):
    return replace(sc, sim=replace(sc.sim, duration_s=seconds))


# ---------------------------------------------------------- pipeline physics


@pytest.mark.parametrize("mppr,mrif", [(256, 8), (4096, 8), (1024, 2), (256, 1), (16, 1)])
def test_closed_form(mppr, mrif):
    res = run(single(params=TunableParams(mppr, mrif)), check=True)
    assert res.steady_bandwidth("node1", 0, 60) == pytest.approx(closed_form(mppr, mrif), rel=0.05)


def test_closed_form_frozen_values():
    # computed once from the formula and reviewed against the simulator
    assert closed_form(256, 8) / 1e6 == pytest.approx(846.40, abs=0.01)
    assert closed_form(4096, 8) / 1e6 == pytest.approx(1213.83, abs=0.01)
    assert closed_form(1024, 8) / 1e6 == pytest.approx(1116.86, abs=0.01)
    assert closed_form(256, 1) / 1e6 == pytest.approx(603.03, abs=0.01)


def test_queue_penalty_makes_a_deep_window_worse():
    loaded = ServerModel()
    shallow = run(single(params=TunableParams(256, 2), server=loaded)).steady_bandwidth("node1", 0, 60)
    deep = run(single(params=TunableParams(256, 32), server=loaded)).steady_bandwidth("node1", 0, 60)
    assert deep < shallow


def test_zero_rate_workload_stays_at_zero():
    res = run(single(spec=WorkloadSpec("sequential", "write", MiB, rate_limit=0), duration=30), check=True)
    for s in res.clients["node1"].snapshots:
        assert (s.cur_dirty_bytes, s.pages_cached_total, s.rpcs_formed_total, s.bytes_transferred_total) == (0, 0, 0, 0)


def test_rate_limited_ack_rate():
    spec = WorkloadSpec("sequential", "write", MiB, rate_limit=100 * MiB)
    snaps = run(single(spec=spec, duration=40), check=True).clients["node1"].snapshots
    deltas = [b.bytes_transferred_total - a.bytes_transferred_total for a, b in zip(snaps, snaps[1:])]
    assert deltas[1:] == [1000 * MiB] * 3


def test_dirty_cap_respected():
    res = run(single(params=TunableParams(4096, 1), max_dirty_bytes=32 * MiB, duration=20), check=True)
    assert max(s.cur_dirty_bytes for s in res.clients["node1"].snapshots) <= 32 * MiB


def test_reads_move_data():
    spec = WorkloadSpec("sequential", "read", MiB, streams=2)
    res = run(single(spec=spec, params=TunableParams(64, 8), duration=20), check=True)
    snap = res.clients["node1"].snapshots[-1]
    assert snap.bytes_transferred_total > 0
    assert snap.pages_cached_total == 0  # reads bypass the dirty cache
    assert snap.rpcs_formed_total * 64 * PAGE == pytest.approx(snap.bytes_transferred_total, rel=0.01)


# ------------------------------------------------------ invariants, checked


@pytest.mark.parametrize(
    "name,seconds",
    [
        ("standalone-randwrite-1m", 60),
        ("standalone-seqreadwrite-1m", 60),
        ("standalone-wholefile-readwrite-16m", 60),
        ("multiclient-5", 60),
        ("multiclient-5-contention", 40),
        ("dynamic-6x300", 2100),
    ],
)
def test_conservation_and_bounds_every_tick(name, seconds):
    sc = shorten(load_template(name), seconds)
    if name == "dynamic-6x300":
        # squeeze the seven phases into the shortened run
        c = sc.clients[0]
        phases = [(k * seconds / 7 // 10 * 10, spec) for k, (_, spec) in enumerate(c.schedule.phases)]
        sc = replace(sc, clients=(replace(c, schedule=PhaseSchedule.of(phases)),))
    run(sc, check=True)  # raises InvariantViolation on any breach


# --------------------------------------------------------------- determinism


def test_same_seed_same_result():
    sc = shorten(load_template("multiclient-5"), 60)
    a, b = run(sc), run(sc)
    for cid in a.clients:
        assert a.clients[cid].snapshots == b.clients[cid].snapshots
        assert a.clients[cid].decisions == b.clients[cid].decisions


def test_seed_changes_random_workloads():
    sc = shorten(load_template("standalone-randwrite-1m"), 30)
    a = run(sc).clients["node1"].snapshots
    b = run(sc.with_seed(2)).clients["node1"].snapshots
    assert a != b


# ------------------------------------------------------------- properties


@pytest.mark.parametrize("name", ["standalone-seqwrite-1m", "standalone-randreadwrite-1m", "multiclient-5"])
def test_more_capacity_never_delivers_less(name):
    sc = shorten(load_template(name).with_params(TunableParams(256, 8)), 40)
    last = None
    for cap in (500e6, 1000e6, 1250e6, 2000e6):
        res = run(replace(sc, server=replace(sc.server, capacity=cap)))
        acked = [res.clients[c].snapshots[-1].bytes_transferred_total for c in res.clients]
        if last is not None:
            assert all(x >= y for x, y in zip(acked, last))
        last = acked


def test_bigger_window_takes_a_bigger_share():
    sc = shorten(load_template("multiclient-5").with_params(TunableParams(256, 8)), 40)
    shares, others = [], []
    for mrif in (4, 8, 16, 32):
        clients = list(sc.clients)
        clients[0] = replace(clients[0], params=TunableParams(256, mrif))
        res = run(replace(sc, clients=tuple(clients)))
        bws = [res.steady_bandwidth(c, 0, 40) for c in res.clients]
        shares.append(bws[0] / sum(bws))
        others.append(bws[1:])
    assert all(b > a for a, b in zip(shares, shares[1:]))
    for before, after in zip(others, others[1:]):
        assert all(y <= x * (1 + 1e-9) for x, y in zip(before, after))


# ------------------------------------------------------------- set_params


def test_shrinking_window_waits_for_drain():
    sim = Simulation(single(params=TunableParams(16, 16), duration=10))
    cl = sim.clients["node1"]
    for _ in range(5):
        sim.step()
    assert cl.in_flight > 8
    sim.set_params("node1", TunableParams(16, 8))
    seen = [cl.in_flight]
    for _ in range(50):
        sim.step()
        seen.append(cl.in_flight)
    above = [n for n in seen if n >= 8]
    # no dispatch while at or above the new window: the count only falls
    first_below = next(i for i, n in enumerate(seen) if n < 8) if min(seen) < 8 else len(seen)
    assert all(b <= a for a, b in zip(seen[:first_below], seen[1:first_below]))
    assert all(n <= 8 for n in seen[first_below:])
    assert above


def test_growing_mppr_leaves_formed_rpcs_alone():
    sim = Simulation(single(params=TunableParams(256, 1), duration=10))
    cl = sim.clients["node1"]
    for _ in range(3):
        sim.step()
    before = [batch[1] for batch in cl.rpc_queue]
    assert before and set(before) == {256}
    sim.set_params("node1", TunableParams(1024, 1))
    sim.step()
    sizes = [batch[1] for batch in cl.rpc_queue]
    assert sizes[0] == 256
    assert 1024 in sizes


def test_setting_identical_params_changes_nothing():
    sc = single(spec=WorkloadSpec("random", "write", MiB), params=TunableParams(512, 4), duration=30)
    plain = run(sc).clients["node1"].snapshots
    sim = Simulation(sc)
    while sim.tick < sim.n_ticks:
        if sim.tick % 37 == 0:
            sim.set_params("node1", TunableParams(512, 4))
        sim.step()
    assert sim.results["node1"].snapshots == plain


def test_snapshot_before_any_tick_is_zero():
    sim = Simulation(single())
    s = sim.snapshot("node1")
    assert (s.timestamp_ms, s.pages_cached_total, s.rpcs_formed_total, s.bytes_transferred_total) == (0, 0, 0, 0)


def test_unknown_client():
    sim = Simulation(single())
    with pytest.raises(UnknownClient):
        sim.snapshot("nodeX")
    with pytest.raises(UnknownClient):
        sim.set_params("nodeX", TunableParams())


def test_invalid_scenario_names_location():
    sc = single()
    with pytest.raises(ConfigError) as e:
        replace(sc, sim=replace(sc.sim, tick_ms=7))
    assert e.value.key == "sim.tick_ms"


# ------------------------------------------------------------------ sweep


def test_full_grid_is_nine_by_nine():
    grid = full_grid(single())
    assert len(grid) == 81
    assert grid[0] == TunableParams(16, 1) and grid[-1] == TunableParams(4096, 256)


def test_one_point_sweep():
    res = sweep(single(duration=20), grid=[TunableParams(512, 4)])
    assert res.argmax[0] == TunableParams(512, 4)
    assert res.argmax[1] == pytest.approx(closed_form(512, 4), rel=0.05)


def test_sweep_argmax_beats_defaults_and_ignores_jobs():
    sc = shorten(load_template("standalone-seqwrite-1m"), 20)
    grid = [TunableParams(m, r) for m in (256, 1024, 4096) for r in (1, 2, 8)]
    one = sweep(sc, grid=grid, jobs=1)
    two = sweep(sc, grid=grid, jobs=2)
    assert one.points == two.points
    best, bw = one.argmax
    assert bw > one.bandwidth(TunableParams(256, 8))
    assert all(bw >= v for _, v in one.points)


def test_sweep_ties_keep_first_point():
    res = SweepResult([(TunableParams(16, 1), 5.0), (TunableParams(32, 1), 5.0), (TunableParams(64, 1), 4.0)])
    assert res.argmax[0] == TunableParams(16, 1)


def test_sweep_rejects_off_grid_points():
    with pytest.raises(InvalidScenario):
        sweep(single(), grid=[TunableParams(100, 1)])

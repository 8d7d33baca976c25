"""``iopathtune`` command line: simulate, sweep, replay, report.

Exit codes: 0 success, 2 configuration error, 3 trace parse error,
4 I/O error.  ``IOPATHTUNE_LOG`` sets the log level (error, warn, info,
debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .metrics import SnapshotError, WindowError, derive_window, iter_records, serialize_trace
from .report import ReportError, build_report
from .scenario import ConfigError, Scenario, resolve
from .sim import Decision, InvalidScenario, SimResult, run, sweep
from .tuner import ConfigError as TunerConfigError
from .tuner import TunerConfig, init_state, plan_action

log = logging.getLogger("iopathtune")

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_IO = 0, 2, 3, 4
MB = 1e6

TIMESERIES_COLUMNS = [
    "time_s", "client_id", "mppr", "mrif", "dirty_bytes",
    "page_cache_rate", "rpc_gen_rate", "transfer_bw_mbps", "decision",
]
SUMMARY_COLUMNS = ["client_id", "phase", "workload", "start_s", "end_s", "mean_bw_mbps", "steady_bw_mbps"]
DECISION_COLUMNS = ["client_id", "turn", "decision", "param", "old", "new"]
SWEEP_COLUMNS = ["mppr", "mrif", "mean_bw_mbps"]

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _num(x: float) -> str:
    return f"{x:.3f}"


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


# ------------------------------------------------------------ file writers


def timeseries_rows(result: SimResult) -> List[list]:
    rows = []
    per_client = list(result.clients.values())
    n = min(len(c.decisions) for c in per_client) if per_client else 0
    for k in range(n):
        for cr in per_client:
            prev, cur = cr.snapshots[k], cr.snapshots[k + 1]
            w = derive_window(prev, cur)
            rows.append([
                _num(cur.timestamp_ms / 1000), cr.id, cur.max_pages_per_rpc, cur.max_rpcs_in_flight,
                cur.cur_dirty_bytes, _num(w.page_cache_rate), _num(w.rpc_gen_rate),
                _num(w.transfer_bw / MB), cr.decisions[k].decision,
            ])
    return rows


def summary_rows(result: SimResult) -> List[list]:
    end = result.scenario.sim.duration_s
    rows = []
    total_mean = total_steady = 0.0
    for cid in result.clients:
        for k, label, a, b in result.phase_windows(cid):
            rows.append([cid, k, label, _num(a), _num(b),
                         _num(result.bandwidth(cid, a, b) / MB), _num(result.steady_bandwidth(cid, a, b) / MB)])
        mean, steady = result.bandwidth(cid, 0, end) / MB, result.steady_bandwidth(cid, 0, end) / MB
        total_mean += mean
        total_steady += steady
        rows.append([cid, "all", "", _num(0), _num(end), _num(mean), _num(steady)])
    rows.append(["total", "all", "", _num(0), _num(end), _num(total_mean), _num(total_steady)])
    return rows


def decision_rows(decisions: Sequence[Decision]) -> List[list]:
    return [
        [d.client_id, d.turn, d.decision, d.param, "" if d.old is None else d.old, "" if d.new is None else d.new]
        for d in decisions
    ]


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], trailer: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(header)
        w.writerows(rows)
        if trailer:
            fh.write(trailer)


def write_simulation(result: SimResult, out_dir: Path, config: str) -> None:
    sc = result.scenario
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "timeseries.csv", TIMESERIES_COLUMNS, timeseries_rows(result))
    snaps = sorted(
        (s for cr in result.clients.values() for s in cr.snapshots),
        key=lambda s: s.timestamp_ms,
    )  # stable sort keeps scenario client order within a timestamp
    (out_dir / "snapshots.trace").write_text(serialize_trace(snaps), encoding="utf-8")
    summary = summary_rows(result)
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary)
    decisions = [d for cr in result.clients.values() for d in cr.decisions]
    write_csv(out_dir / "decisions.csv", DECISION_COLUMNS, decision_rows(decisions))
    meta = {
        "name": sc.name,
        "config": config,
        "seed": sc.sim.seed,
        "tuner_enabled": sc.tuner_enabled,
        "duration_s": sc.sim.duration_s,
        "clients": list(result.clients),
        "total_mean_bw_mbps": float(summary[-1][5]),
        "total_steady_bw_mbps": float(summary[-1][6]),
        "version": __version__,
    }
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def _load(config: str, seed: Optional[int] = None, no_tuner: bool = False) -> Scenario:
    try:
        sc = resolve(config)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
    if seed is not None:
        sc = sc.with_seed(seed)
    if no_tuner:
        sc = replace(sc, tuner_enabled=False)
    return sc


def cmd_simulate(args) -> int:
    sc = _load(args.config, args.seed, args.no_tuner)
    try:
        result = run(sc)
    except InvalidScenario as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    log.info("simulated %s: %d ticks", sc.name, result.ticks)
    try:
        write_simulation(result, Path(args.out), args.config)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs: {exc}") from None
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc = _load(args.config, args.seed)
    try:
        res = sweep(sc, jobs=args.jobs)
    except InvalidScenario as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    best, bw = res.argmax
    rows = [[p.max_pages_per_rpc, p.max_rpcs_in_flight, _num(v / MB)] for p, v in res.points]
    trailer = f"# argmax: mppr={best.max_pages_per_rpc} mrif={best.max_rpcs_in_flight} mean_bw_mbps={_num(bw / MB)}\n"
    out = Path(args.out)
    try:
        if out.parent:
            out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, SWEEP_COLUMNS, rows, trailer)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    return EXIT_OK


def replay_text(text: str, cfg: TunerConfig, untuned: Sequence[str] = ()) -> List[Decision]:
    """Run the tuner over a trace; raises SnapshotError/WindowError subclasses."""
    states: Dict[str, object] = {}
    last: Dict[str, object] = {}
    turns: Dict[str, int] = {}
    decisions: List[Decision] = []
    for line, snap in iter_records(text):
        cid = snap.client_id
        if cid not in last:
            last[cid] = snap
            turns[cid] = 0
            if cid not in untuned:
                try:
                    states[cid] = init_state(cfg, snap.params)
                except TunerConfigError as exc:
                    raise SnapshotError(str(exc), line) from None
            continue
        try:
            window = derive_window(last[cid], snap)  # type: ignore[arg-type]
        except WindowError as exc:
            raise SnapshotError(str(exc), line) from None
        last[cid] = snap
        turns[cid] += 1
        t = snap.timestamp_ms / 1000
        if cid in untuned:
            decisions.append(Decision(cid, turns[cid], t, "hold"))
            continue
        states[cid], d = plan_action(states[cid], window)  # type: ignore[arg-type]
        decisions.append(Decision.from_action(cid, turns[cid], t, d))
    # group per client, keeping first-appearance order
    order = list(last)
    return sorted(decisions, key=lambda d: order.index(d.client_id))


def cmd_replay(args) -> int:
    cfg = TunerConfig()
    untuned: List[str] = []
    if args.config:
        sc = _load(args.config)
        cfg = sc.tuner
        untuned = [c.id for c in sc.clients if not (sc.tuner_enabled and c.tuned)]
    try:
        text = Path(args.trace).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read trace: {exc}") from None
    try:
        decisions = replay_text(text, cfg, untuned)
    except SnapshotError as exc:
        raise CliError(EXIT_TRACE, f"{args.trace}: {exc}") from None
    try:
        write_csv(Path(args.out), DECISION_COLUMNS, decision_rows(decisions))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    try:
        table = build_report(Path(args.in_dir), out, args.format)
    except (ReportError, OSError) as exc:
        raise CliError(EXIT_IO, f"report failed: {exc}") from None
    if table:
        print(table)
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iopathtune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write its time series")
    s.add_argument("config", help="config file or bundled template name")
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--no-tuner", action="store_true", help="keep every client at its initial params")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="evaluate every static (mppr, mrif) pair")
    s.add_argument("config")
    s.add_argument("-o", "--out", required=True, help="CSV file to write")
    s.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("replay", help="run the tuner over a recorded snapshot trace")
    s.add_argument("trace")
    s.add_argument("-o", "--out", required=True, help="decisions CSV to write")
    s.add_argument("--config", help="scenario config whose tuner settings to use")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("report", help="chart simulate outputs and compare default vs tuned")
    s.add_argument("in_dir", help="a simulate output dir, or a dir of them")
    s.add_argument("-o", "--out", required=True, help="chart file to write")
    s.add_argument("--format", choices=("svg", "ascii"), default="svg")
    s.set_defaults(func=cmd_report)
    return p


def _setup_logging() -> None:
    name = os.environ.get("IOPATHTUNE_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if name not in LOG_LEVELS:
        log.warning("IOPATHTUNE_LOG=%s not understood; using warn", name)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("iopathtune: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"iopathtune: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

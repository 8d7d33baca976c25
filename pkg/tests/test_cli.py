import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from iopathtune.cli import main
from iopathtune.scenario import template_text

FIXTURES = Path(__file__).parent / "fixtures"

SHORT = """
name: short-seqwrite
sim: {duration_s: 60, tick_ms: 10, seed: 1}
tuner: {period_s: 10}
clients:
  - id: node1
    schedule:
      - start_s: 0
        workload: {pattern: sequential, op: write, request_size: 1MiB}
"""


@pytest.fixture
def short_cfg(tmp_path):
    p = tmp_path / "short.yaml"
    p.write_text(SHORT)
    return p


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- simulate


def test_simulate_writes_all_outputs(short_cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", str(short_cfg), "-o", str(out)]) == 0
    for name in ("timeseries.csv", "summary.csv", "decisions.csv", "snapshots.trace", "run.json"):
        assert (out / name).is_file()
    meta = json.loads((out / "run.json").read_text())
    assert meta["name"] == "short-seqwrite" and meta["tuner_enabled"] is True
    rows = read_rows(out / "timeseries.csv")
    assert rows[0][:4] == ["time_s", "client_id", "mppr", "mrif"]
    assert [r[0] for r in rows[1:]] == ["10.000", "20.000", "30.000", "40.000", "50.000", "60.000"]


def test_simulate_is_byte_identical(short_cfg, tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", str(short_cfg), "-o", str(tmp_path / d)]) == 0
    for name in ("timeseries.csv", "summary.csv", "decisions.csv", "snapshots.trace", "run.json"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        assert a == b, name


def test_no_tuner_holds_everything(short_cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", str(short_cfg), "-o", str(out), "--no-tuner"]) == 0
    rows = read_rows(out / "decisions.csv")[1:]
    assert len(rows) == 6 and {r[2] for r in rows} == {"hold"}
    params = {(r[2], r[3]) for r in read_rows(out / "timeseries.csv")[1:]}
    assert params == {("256", "8")}


def test_bundled_template_by_name(tmp_path):
    text = template_text("standalone-seqwrite-1m").replace("duration_s: 600", "duration_s: 30")
    cfg = tmp_path / "t.yaml"
    cfg.write_text(text)
    assert main(["simulate", str(cfg), "-o", str(tmp_path / "o")]) == 0


def test_config_error_exit_2_and_no_outputs(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(SHORT.replace("request_size: 1MiB", "request_size: 1MiB, colour: blue"))
    out = tmp_path / "run"
    assert main(["simulate", str(cfg), "-o", str(out)]) == 2
    assert not out.exists()


def test_missing_config_exit_4(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "nope.yaml"), "-o", str(tmp_path / "o")]) == 4
    assert "nope.yaml" in capsys.readouterr().err


def test_unwritable_output_exit_4(short_cfg, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", str(short_cfg), "-o", str(blocker / "sub")]) == 4


# ------------------------------------------------------------------- sweep


def test_sweep_csv_and_jobs_independence(tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text(SHORT.replace("duration_s: 60", "duration_s: 20"))
    one, two = tmp_path / "j1.csv", tmp_path / "j2.csv"
    assert main(["sweep", str(cfg), "-o", str(one), "--jobs", "1"]) == 0
    assert main(["sweep", str(cfg), "-o", str(two), "--jobs", "2"]) == 0
    assert one.read_bytes() == two.read_bytes()
    lines = one.read_text().splitlines()
    assert lines[0] == "mppr,mrif,mean_bw_mbps"
    assert len(lines) == 1 + 81 + 1
    assert lines[-1].startswith("# argmax: mppr=4096 mrif=")


def test_sweep_rejects_zero_jobs(short_cfg, tmp_path):
    assert main(["sweep", str(short_cfg), "-o", str(tmp_path / "x.csv"), "--jobs", "0"]) == 2


# ------------------------------------------------------------------ replay


def test_replay_single_snapshot_has_no_decisions(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["replay", str(FIXTURES / "snapshot.txt"), "-o", str(out)]) == 0
    assert read_rows(out) == [["client_id", "turn", "decision", "param", "old", "new"]]


def test_replay_regression_exit_3_with_line(tmp_path, capsys):
    assert main(["replay", str(FIXTURES / "regression.trace"), "-o", str(tmp_path / "d.csv")]) == 3
    err = capsys.readouterr().err
    assert "line 21" in err and "bytes_transferred_total" in err


def test_replay_malformed_trace_exit_3(tmp_path):
    bad = tmp_path / "bad.trace"
    bad.write_text((FIXTURES / "snapshot.txt").read_text().replace("rpcs_formed_total: 100", "rpcs_formed_total: many"))
    assert main(["replay", str(bad), "-o", str(tmp_path / "d.csv")]) == 3


def test_replay_missing_trace_exit_4(tmp_path):
    assert main(["replay", str(tmp_path / "none.trace"), "-o", str(tmp_path / "d.csv")]) == 4


def test_replay_closes_the_loop(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(template_text("multiclient-5-contention").replace("duration_s: 120", "duration_s: 60"))
    run = tmp_path / "run"
    assert main(["simulate", str(cfg), "-o", str(run)]) == 0
    out = tmp_path / "replayed.csv"
    assert main(["replay", str(run / "snapshots.trace"), "--config", str(cfg), "-o", str(out)]) == 0
    assert out.read_bytes() == (run / "decisions.csv").read_bytes()


# ------------------------------------------------------------------ report


@pytest.fixture(scope="module")
def paired_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "short.yaml"
    cfg.write_text(SHORT)
    assert main(["simulate", str(cfg), "-o", str(root / "runs" / "tuned")]) == 0
    assert main(["simulate", str(cfg), "-o", str(root / "runs" / "default"), "--no-tuner"]) == 0
    return root


def test_report_svg_and_totals(paired_runs, tmp_path, capsys):
    out = tmp_path / "chart.svg"
    assert main(["report", str(paired_runs / "runs"), "-o", str(out)]) == 0
    text = out.read_text()
    assert "<svg" in text and "node1" in text
    rows = read_rows(tmp_path / "totals.csv")
    assert rows[0] == ["scenario", "client_id", "default_mbps", "tuned_mbps", "improvement_pct"]
    assert [r[1] for r in rows[1:]] == ["node1", "total"]
    assert float(rows[-1][3]) > float(rows[-1][2])  # tuning helps a lone sequential writer
    assert "improvement_pct" in capsys.readouterr().out


def test_report_svg_is_reproducible(paired_runs, tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b" / "b.svg"
    b.parent.mkdir()
    assert main(["report", str(paired_runs / "runs"), "-o", str(a)]) == 0
    assert main(["report", str(paired_runs / "runs"), "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_report_ascii_single_run(paired_runs, tmp_path):
    out = tmp_path / "chart.txt"
    assert main(["report", str(paired_runs / "runs" / "tuned"), "-o", str(out), "--format", "ascii"]) == 0
    text = out.read_text()
    assert "[tuned] node1" in text and "#" in text
    assert not (tmp_path / "totals.csv").exists()  # nothing to pair with


def test_report_without_runs_exit_4(tmp_path):
    assert main(["report", str(tmp_path), "-o", str(tmp_path / "c.svg")]) == 4


# --------------------------------------------------------------- console


@pytest.mark.skipif(shutil.which("iopathtune") is None, reason="console script not installed")
def test_console_script_runs():
    proc = subprocess.run(["iopathtune", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "iopathtune", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()

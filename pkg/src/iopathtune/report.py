"""Post-hoc reports over ``simulate`` output directories.

A report input is either one run directory (``run.json``, ``timeseries.csv``,
``summary.csv``) or a directory whose subdirectories are runs.  Runs of the
same scenario with and without the tuner are paired into a totals table.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

RUN_FILES = ("run.json", "timeseries.csv", "summary.csv")


class ReportError(OSError):
    pass


@dataclass
class Series:
    time_s: List[float] = field(default_factory=list)
    bw_mbps: List[float] = field(default_factory=list)
    mppr: List[int] = field(default_factory=list)
    mrif: List[int] = field(default_factory=list)


@dataclass
class RunData:
    path: Path
    meta: dict
    series: Dict[str, Series]
    steady: Dict[str, float]  # client -> steady-state MB/s over the whole run

    @property
    def tuned(self) -> bool:
        return bool(self.meta.get("tuner_enabled"))

    @property
    def label(self) -> str:
        return "tuned" if self.tuned else "default"


def _is_run_dir(path: Path) -> bool:
    return all((path / f).is_file() for f in RUN_FILES)


def find_runs(in_dir: Path) -> List[Path]:
    if not in_dir.is_dir():
        raise ReportError(f"{in_dir}: not a directory")
    if _is_run_dir(in_dir):
        return [in_dir]
    runs = sorted(p for p in in_dir.iterdir() if p.is_dir() and _is_run_dir(p))
    if not runs:
        raise ReportError(f"{in_dir}: no simulate outputs found (need {', '.join(RUN_FILES)})")
    return runs


def load_run(path: Path) -> RunData:
    try:
        meta = json.loads((path / "run.json").read_text(encoding="utf-8"))
        series: Dict[str, Series] = {}
        with open(path / "timeseries.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                s = series.setdefault(row["client_id"], Series())
                s.time_s.append(float(row["time_s"]))
                s.bw_mbps.append(float(row["transfer_bw_mbps"]))
                s.mppr.append(int(row["mppr"]))
                s.mrif.append(int(row["mrif"]))
        steady: Dict[str, float] = {}
        with open(path / "summary.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["phase"] == "all":
                    steady[row["client_id"]] = float(row["steady_bw_mbps"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ReportError(f"{path}: unreadable run output ({exc})") from None
    return RunData(path, meta, series, steady)


# ----------------------------------------------------------------- totals


def pair_runs(runs: Sequence[RunData]) -> List[Tuple[RunData, RunData]]:
    """(default, tuned) pairs sharing a scenario name and seed."""
    pairs = []
    for tuned in runs:
        if not tuned.tuned:
            continue
        for base in runs:
            if base.tuned:
                continue
            if (base.meta.get("name"), base.meta.get("seed")) == (tuned.meta.get("name"), tuned.meta.get("seed")):
                pairs.append((base, tuned))
                break
    return pairs


def improvement(default: float, tuned: float) -> float:
    if default == 0:
        return math.inf if tuned > 0 else 0.0
    return (tuned / default - 1) * 100


def totals_rows(default: RunData, tuned: RunData) -> List[List[str]]:
    rows = []
    clients = [c for c in tuned.steady if c != "total"]
    for cid in clients:
        d, t = default.steady.get(cid, 0.0), tuned.steady[cid]
        rows.append([cid, f"{d:.1f}", f"{t:.1f}", f"{improvement(d, t):+.2f}"])
    d = sum(default.steady.get(c, 0.0) for c in clients)
    t = sum(tuned.steady[c] for c in clients)
    rows.append(["total", f"{d:.1f}", f"{t:.1f}", f"{improvement(d, t):+.2f}"])
    return rows


TOTALS_HEADER = ["client_id", "default_mbps", "tuned_mbps", "improvement_pct"]


def format_table(rows: List[List[str]], header: Sequence[str] = TOTALS_HEADER) -> str:
    widths = [max(len(str(r[i])) for r in [list(header)] + rows) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)


# ------------------------------------------------------------------ ascii


def _resample(values: Sequence[float], width: int) -> List[float]:
    if len(values) <= width:
        return list(values)
    out = []
    for i in range(width):
        a = i * len(values) // width
        b = (i + 1) * len(values) // width
        chunk = values[a:b]
        out.append(sum(chunk) / len(chunk))
    return out


def ascii_chart(values: Sequence[float], height: int = 8, width: int = 60) -> List[str]:
    """Column chart of ``values`` with a y axis; one column per sample."""
    cols = _resample(values, width)
    top = max(cols, default=0.0) or 1.0
    lines = []
    for level in range(height, 0, -1):
        cut = top * (level - 0.5) / height
        label = f"{top * level / height:8.1f} |" if level in (height, 1) or level == height // 2 else " " * 9 + "|"
        lines.append(label + "".join("#" if v >= cut else " " for v in cols))
    lines.append(" " * 9 + "+" + "-" * len(cols))
    return lines


def ascii_report(runs: Sequence[RunData], width: int = 60) -> str:
    out: List[str] = []
    for run in runs:
        for cid, s in run.series.items():
            end = s.time_s[-1] if s.time_s else 0
            out.append(f"{run.meta.get('name', run.path.name)} [{run.label}] {cid}: transfer bandwidth, MB/s over 0-{end:.0f} s")
            out.extend(ascii_chart(s.bw_mbps, width=width))
            marks = _resample([float(i) for i in range(len(s.time_s))], 6)
            picks = sorted({int(m) for m in marks})
            out.append("         params: " + "  ".join(f"t={s.time_s[i]:.0f}:{s.mppr[i]}/{s.mrif[i]}" for i in picks))
            out.append("")
    return "\n".join(out)


# -------------------------------------------------------------------- svg


def svg_report(runs: Sequence[RunData], out_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "iopathtune"
    clients: List[str] = []
    for run in runs:
        for cid in run.series:
            if cid not in clients:
                clients.append(cid)
    fig, axes = plt.subplots(len(clients), 1, figsize=(9, 2.6 * len(clients)), sharex=True, squeeze=False)
    for ax, cid in zip(axes[:, 0], clients):
        twin = ax.twinx()
        for run in runs:
            s = run.series.get(cid)
            if s is None:
                continue
            style = "-" if run.tuned else "--"
            ax.plot(s.time_s, s.bw_mbps, style, label=f"bw ({run.label})")
            if run.tuned:
                twin.step(s.time_s, [math.log2(v) for v in s.mppr], where="post", color="tab:green", alpha=0.6, label="log2 mppr")
                twin.step(s.time_s, [math.log2(v) for v in s.mrif], where="post", color="tab:red", alpha=0.6, label="log2 mrif")
        ax.set_ylabel("MB/s")
        twin.set_ylabel("log2 param")
        ax.set_title(cid, fontsize=9)
        lines = ax.get_legend_handles_labels()
        extra = twin.get_legend_handles_labels()
        ax.legend(lines[0] + extra[0], lines[1] + extra[1], fontsize=7, loc="lower right")
    axes[-1, 0].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ------------------------------------------------------------------ entry


def build_report(in_dir: Path, out_path: Path, fmt: str = "svg") -> Optional[str]:
    """Write the chart to ``out_path``; returns the totals table text, if any.

    When default/tuned pairs exist, ``totals.csv`` lands next to ``out_path``.
    """
    runs = [load_run(p) for p in find_runs(in_dir)]
    if fmt == "svg":
        svg_report(runs, out_path)
    elif fmt == "ascii":
        out_path.write_text(ascii_report(runs) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown format {fmt!r}")

    pairs = pair_runs(runs)
    if not pairs:
        return None
    tables = []
    with open(out_path.parent / "totals.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario"] + TOTALS_HEADER)
        for default, tuned in pairs:
            rows = totals_rows(default, tuned)
            name = str(tuned.meta.get("name", ""))
            for r in rows:
                w.writerow([name] + r)
            tables.append(f"{name} (seed {tuned.meta.get('seed')})\n" + format_table(rows))
    text = "\n\n".join(tables)
    if fmt == "ascii":
        with open(out_path, "a", encoding="utf-8") as fh:
            fh.write("\n" + text + "\n")
    return text

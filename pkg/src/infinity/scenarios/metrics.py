"""Export of a SimReport as CSV summary, audit log and canonical JSON."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from infinity.dataplane.report import SimReport

CSV_COLUMNS = (
    "time_us",
    "app",
    "switch",
    "table",
    "occupancy",
    "link_load",
    "drops_capacity",
    "drops_other",
    "p50_us",
    "p99_us",
)


def _num(x: float) -> str:
    return f"{x:.6f}"


def metric_rows(report: SimReport) -> list[list[str]]:
    """One row per (epoch, switch) for link load, plus one per table instance."""
    rows = []
    for snap in report.snapshots:
        t = _num(snap["time_us"])
        switches = sorted(snap["switch_usage"])
        for sw in switches:
            loads = [v for k, v in snap["link_load"].items() if k.split("->")[0] == sw]
            rows.append([t, "", sw, "", "", _num(max(loads, default=0.0)), "", "", "", ""])
        for inst in sorted(snap["table_occupancy"]):
            subject, sw = inst.split("@", 1)
            app, table = subject.split("/", 1)
            drops = snap["app_drops"].get(app, {})
            cap = drops.get("capacity", 0)
            other = sum(drops.values()) - cap
            p50, p99 = snap["app_latency"].get(app, (0.0, 0.0))
            rows.append(
                [t, app, sw, table, _num(snap["table_occupancy"][inst]), "", str(cap), str(other), _num(p50), _num(p99)]
            )
    return rows


def export_metrics(report: SimReport, path) -> dict[str, Path]:
    """Write metrics.csv, audit.jsonl and report.json under ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics": out / "metrics.csv",
        "audit": out / "audit.jsonl",
        "report": out / "report.json",
    }
    with open(files["metrics"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(metric_rows(report))
    with open(files["audit"], "w") as fh:
        for action in report.audit:
            fh.write(json.dumps(action, sort_keys=True, separators=(",", ":")) + "\n")
    files["report"].write_text(report.to_json())
    return files

"""Run reporting: exact tallies recomputed from persisted artifacts.

Everything here is a pure function of the files a run writes (session log,
per-message metrics, scored records, run metadata), so regenerating a
report never changes it. Latency percentiles are a modeled quantity in the
virtual timeline: wire transmission at the configured bandwidth plus a
fixed per-record gateway cost. Wall-clock latency would not be reproducible
across runs; byte counts and tallies are exact.
"""

from __future__ import annotations

import json
from pathlib import Path


def _read_ndjson(path) -> list:
    rows = []
    path = Path(path)
    if not path.exists():
        return rows
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def percentile(sorted_values, q: float):
    """Nearest-rank percentile on a pre-sorted list."""
    if not sorted_values:
        return None
    rank = max(1, int(round(q / 100.0 * len(sorted_values) + 0.5)))
    return sorted_values[min(rank, len(sorted_values)) - 1]


def modeled_latency_us(wire_bytes: int, bandwidth_bps: int, gateway_proc_us: int) -> int:
    return int(round(wire_bytes * 8 * 1_000_000 / bandwidth_bps)) + gateway_proc_us


def build_report(out_dir) -> dict:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "run_meta.json").read_text())
    metrics = _read_ndjson(out_dir / "metrics.ndjson")
    scored = _read_ndjson(out_dir / "scored.ndjson")
    session = _read_ndjson(out_dir / "session.ndjson")

    lat_cfg = meta["latency_model"]
    latencies = sorted(
        modeled_latency_us(r["wire_bytes"], lat_cfg["bandwidth_bps"], lat_cfg["gateway_proc_us"])
        for r in metrics
    )

    per_mode: dict = {}
    per_node: dict = {}
    for row in metrics:
        mode = str(row["mode"])
        bucket = per_mode.setdefault(
            mode, {"messages": 0, "payload_values": 0, "wire_bytes": 0, "cpu_units": 0.0, "radio_units": 0.0}
        )
        bucket["messages"] += 1
        bucket["payload_values"] += row["values"]
        bucket["wire_bytes"] += row["wire_bytes"]
        bucket["cpu_units"] += row["cpu_units"]
        bucket["radio_units"] += row["radio_units"]
        node = per_node.setdefault(
            row["node_id"],
            {"messages": 0, "wire_bytes": 0, "cpu_units": 0.0, "radio_units": 0.0, "battery_pct": 100.0},
        )
        node["messages"] += 1
        node["wire_bytes"] += row["wire_bytes"]
        node["cpu_units"] += row["cpu_units"]
        node["radio_units"] += row["radio_units"]
        node["battery_pct"] = min(node["battery_pct"], row["battery_pct"])

    episodes = meta["scenario"].get("defect_episodes", [])
    start_epoch = meta["scenario"]["start_epoch_us"]
    alarm_rows = [r for r in scored if r["values"].get("risk_alarm") == 1.0]
    alarms = sorted(r["t_us"] for r in alarm_rows)
    episode_reports = []
    detected = 0
    for episode in episodes:
        t_start = start_epoch + int(episode["t_start_s"] * 1_000_000)
        t_end = start_epoch + int(episode["t_end_s"] * 1_000_000)
        hits = [t for t in alarms if t_start - 2_000_000 <= t <= t_end + 2_000_000]
        first = hits[0] if hits else None
        if first is not None:
            detected += 1
        episode_reports.append(
            {
                "t_start_s": episode["t_start_s"],
                "t_end_s": episode["t_end_s"],
                "severity": episode["severity"],
                "first_alarm_t_us": first,
                "lead_lag_s": (first - t_start) / 1e6 if first is not None else None,
            }
        )

    labels = [r for r in session if r.get("kind") == "label"]
    return {
        "session_id": meta["session_id"],
        "mode_override": meta.get("mode_override"),
        "totals": {
            "messages": len(metrics),
            "payload_values": sum(r["values"] for r in metrics),
            "wire_bytes": sum(r["wire_bytes"] for r in metrics),
            "scored_records": len(scored),
            "label_rows": len(labels),
        },
        "per_mode": {k: per_mode[k] for k in sorted(per_mode)},
        "per_node": {k: per_node[k] for k in sorted(per_node)},
        "latency_us": {
            "model": lat_cfg,
            "p50": percentile(latencies, 50),
            "p90": percentile(latencies, 90),
            "p99": percentile(latencies, 99),
        },
        "alarms": {
            "alarm_records": len(alarm_rows),
            "episodes": episode_reports,
            "episodes_detected": detected,
        },
        "gateway": {
            "counters": meta["counters"],
            "records_processed": sum(c.get("consumed", 0) for c in meta["counters"].values()),
        },
        "uplink": meta["uplink"],
        "sync": meta.get("sync", {}),
    }


def write_report(out_dir) -> dict:
    report = build_report(out_dir)
    path = Path(out_dir) / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def render_report(report: dict) -> str:
    lines = []
    total = report["totals"]
    lines.append(f"session {report['session_id']}")
    lines.append(
        f"  messages {total['messages']}  values {total['payload_values']}  "
        f"wire bytes {total['wire_bytes']}"
    )
    for mode, row in report["per_mode"].items():
        lines.append(
            f"  mode {mode}: messages {row['messages']}  values {row['payload_values']}  "
            f"bytes {row['wire_bytes']}  cpu {row['cpu_units']:.0f}  radio {row['radio_units']:.0f}"
        )
    for node, row in report["per_node"].items():
        lines.append(
            f"  node {node}: messages {row['messages']}  bytes {row['wire_bytes']}  "
            f"battery {row['battery_pct']:.3f}%"
        )
    lat = report["latency_us"]
    lines.append(f"  modeled latency us p50 {lat['p50']}  p90 {lat['p90']}  p99 {lat['p99']}")
    alarms = report["alarms"]
    lines.append(
        f"  alarms {alarms['alarm_records']}  episodes detected "
        f"{alarms['episodes_detected']}/{len(alarms['episodes'])}"
    )
    for ep in alarms["episodes"]:
        lag = "none" if ep["lead_lag_s"] is None else f"{ep['lead_lag_s']:+.3f}s"
        lines.append(
            f"    episode [{ep['t_start_s']}, {ep['t_end_s']}) sev {ep['severity']}: first alarm {lag}"
        )
    lines.append(f"  uplink batches {report['uplink']['batches_sent']} retries {report['uplink']['retries']}")
    return "\n".join(lines)


def render_mode_comparison(reports: dict) -> str:
    """Tabulate the three processing configurations side by side."""
    lines = [
        f"{'mode':<6}{'messages':>10}{'values':>12}{'wire_bytes':>14}"
        f"{'cpu_units':>12}{'radio_units':>14}{'gw_records':>12}"
    ]
    for mode in sorted(reports):
        r = reports[mode]
        t = r["totals"]
        cpu = sum(row["cpu_units"] for row in r["per_node"].values())
        radio = sum(row["radio_units"] for row in r["per_node"].values())
        lines.append(
            f"{mode:<6}{t['messages']:>10}{t['payload_values']:>12}{t['wire_bytes']:>14}"
            f"{cpu:>12.0f}{radio:>14.0f}{r['gateway']['records_processed']:>12}"
        )
    return "\n".join(lines)

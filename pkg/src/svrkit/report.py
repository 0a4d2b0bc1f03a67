"""Reconstruction report rendering: JSON, delimited trace, and figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import write_json  # noqa: E402

TRACE_FIELDS = ["level", "sweep", "stack", "step", "objective", "accepted"]


def write_trace_csv(path, report: dict):
    """Objective trace as a delimited file, one row per block step."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in report["objective_trace"]:
            writer.writerow({k: row[k] for k in TRACE_FIELDS})


def render_figure(path, report: dict):
    """Objective trace and CG residual history as a two-panel figure."""
    trace = report["objective_trace"]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 7), sharex=False)
    levels = sorted({e["level"] for e in trace}, reverse=True)
    offset = 0
    for level in levels:
        rows = [e for e in trace if e["level"] == level and e["accepted"]]
        xs = range(offset, offset + len(rows))
        ax1.plot(xs, [e["objective"] for e in rows], marker=".",
                 label=f"level {level}")
        offset += len(rows)
    ax1.set_yscale("log")
    ax1.set_xlabel("accepted block step")
    ax1.set_ylabel("objective")
    ax1.legend(fontsize=8)
    ax1.set_title("block coordinate descent trace")

    cg = report.get("cg", [])
    if cg:
        ax2.plot([c["residual"] for c in cg], marker=".")
        ax2.set_yscale("log")
        ax2.set_xlabel("v-update index")
        ax2.set_ylabel("CG relative residual")
        ax2.set_title("volume solves")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_report(json_path, report: dict):
    """Write report.json plus the .csv trace and .png figure beside it."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(json_path, report)
    write_trace_csv(json_path.with_suffix(".csv"), report)
    render_figure(json_path.with_suffix(".png"), report)

"""Comparison tables and accuracy-vs-epoch charts from metrics CSVs."""

from __future__ import annotations

import os

from .errors import ReportParseError
from .harness import METRIC_COLUMNS

_FLOAT_COLS = ("delta", "train_loss", "distill_loss", "test_top1",
               "test_top5", "wall_seconds")
_INT_COLS = ("epoch", "stage", "weight_bits", "activation_bits")


def read_metrics(path):
    """Parse one metrics CSV into row dicts; malformed lines report their
    line number."""
    rows = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ReportParseError(f"{path}:1: empty metrics file")
    header = lines[0].split(",")
    if tuple(header) != METRIC_COLUMNS:
        raise ReportParseError(f"{path}:1: unexpected header {header}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(METRIC_COLUMNS):
            raise ReportParseError(
                f"{path}:{lineno}: expected {len(METRIC_COLUMNS)} fields, got {len(parts)}")
        row = dict(zip(METRIC_COLUMNS, parts))
        try:
            for c in _INT_COLS:
                row[c] = int(row[c])
            for c in _FLOAT_COLS:
                row[c] = float(row[c])
        except ValueError as e:
            raise ReportParseError(f"{path}:{lineno}: {e}") from e
        rows.append(row)
    return rows


def _student_rows(rows):
    return [r for r in rows if r["network"] == "student"]


def summarize(csv_paths):
    """Per-run (name, final top1, best top1) sorted by run name."""
    runs = []
    for path in csv_paths:
        rows = _student_rows(read_metrics(path))
        if not rows:
            raise ReportParseError(f"{path}:1: no student rows")
        name = os.path.splitext(os.path.basename(path))[0]
        if name == "metrics":
            name = os.path.basename(os.path.dirname(os.path.abspath(path))) or name
        runs.append({"name": name, "path": path,
                     "final_top1": rows[-1]["test_top1"],
                     "best_top1": max(r["test_top1"] for r in rows),
                     "rows": rows})
    runs.sort(key=lambda r: r["name"])
    return runs


def emit_report(csv_paths, out_dir):
    """Write a comparison table plus one SVG accuracy curve per run.

    The deltas column is each run's best top-1 minus the first (alphabetical)
    run's best top-1.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    runs = summarize(csv_paths)
    base = runs[0]["best_top1"]
    table_path = os.path.join(out_dir, "report.md")
    with open(table_path, "w") as fh:
        fh.write("| run | final top1 | best top1 | delta vs first |\n")
        fh.write("|---|---|---|---|\n")
        for r in runs:
            fh.write(f"| {r['name']} | {r['final_top1']:.2f} | "
                     f"{r['best_top1']:.2f} | {r['best_top1'] - base:+.2f} |\n")

    chart_paths = []
    for r in runs:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        epochs = [row["epoch"] for row in r["rows"]]
        ax.plot(epochs, [row["test_top1"] for row in r["rows"]],
                marker="o", markersize=2.5, label="student top-1")
        teacher = [row for row in read_metrics(r["path"]) if row["network"] == "teacher"]
        if teacher:
            ax.plot([row["epoch"] for row in teacher],
                    [row["test_top1"] for row in teacher],
                    linestyle="--", label="teacher top-1")
        ax.set_xlabel("epoch")
        ax.set_ylabel("test top-1 (%)")
        ax.set_title(r["name"])
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{r['name']}.svg")
        fig.savefig(path)
        plt.close(fig)
        chart_paths.append(path)
    return table_path, chart_paths

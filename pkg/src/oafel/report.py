"""Figure rendering from emitted run CSVs.

Kept separate from the run path on purpose: simulations never import
matplotlib, and reports only ever read the delimited output back in.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def read_trace_csv(path) -> dict[str, list[float]]:
    """Columns of one run CSV, keyed by header name."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name, value in row.items():
                columns[name].append(float(value))
    return columns


def _finite(values) -> bool:
    import math

    return any(math.isfinite(v) for v in values)


def render_run_report(csv_paths, out_dir) -> list[Path]:
    """Render the standard figure set from one or more run CSVs.

    Writes loss, accuracy (when present), unified energy usage, and
    scheduled-count curves as PNGs into ``out_dir`` and returns their paths.
    """
    csv_paths = [Path(p) for p in csv_paths]
    if not csv_paths:
        raise ValueError("no run CSVs supplied")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = {p.stem: read_trace_csv(p) for p in csv_paths}

    written: list[Path] = []

    def figure(name: str, ylabel: str, column: str, hline: float | None = None):
        series = {
            stem: cols[column] for stem, cols in runs.items() if _finite(cols[column])
        }
        if not series:
            return
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for stem, values in sorted(series.items()):
            ax.plot(runs[stem]["t"], values, label=stem, linewidth=1.4)
        if hline is not None:
            ax.axhline(hline, color="grey", linestyle="--", linewidth=1.0)
        ax.set_xlabel("round")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        if len(series) > 1:
            ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / name
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    figure("loss.png", "training loss", "loss")
    figure("accuracy.png", "test accuracy", "accuracy")
    figure("unified_energy.png", "unified energy usage", "unified_energy", hline=1.0)
    figure("scheduled_devices.png", "scheduled devices", "k_star")

    # queue trajectories from the first run that has them
    first = runs[sorted(runs)[0]]
    queue_cols = sorted(
        (c for c in first if c.startswith("q_")), key=lambda c: int(c.split("_")[1])
    )
    if queue_cols:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for col in queue_cols:
            ax.plot(first["t"], first[col], linewidth=1.0, label=col)
        ax.set_xlabel("round")
        ax.set_ylabel("virtual energy queue")
        ax.grid(alpha=0.3)
        if len(queue_cols) <= 12:
            ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        path = out_dir / "queues.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written

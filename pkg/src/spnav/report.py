"""Rendered figures: training curves, error histograms, sweep traces.

Everything draws through the Agg backend and writes PNG files next to
the delimited outputs they illustrate, so a report directory is
self-contained.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def read_csv_columns(path: Path) -> dict[str, np.ndarray]:
    """Numeric columns of a metrics CSV, keyed by header name.

    Empty cells become NaN; columns with non-numeric text (ids, labels)
    are left out entirely.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        return {}
    out = {}
    for name in rows[0]:
        vals = []
        try:
            for r in rows:
                cell = r[name]
                vals.append(float(cell) if cell not in ("", None) else np.nan)
        except ValueError:
            continue
        out[name] = np.asarray(vals)
    return out


def plot_metric_curves(
    csv_path: Path,
    out_png: Path,
    x: str = "epoch",
    columns: Optional[Sequence[str]] = None,
    title: str = "",
) -> None:
    """Loss curves over epochs from one training metrics CSV."""
    data = read_csv_columns(csv_path)
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    if data:
        xs = data[x]
        names = [c for c in data if c not in (x, "lr")] if columns is None else list(columns)
        for name in names:
            ax.plot(xs, data[name], label=name, linewidth=1.4)
        ax.legend(fontsize=8)
    ax.set_xlabel(x)
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def plot_error_histograms(trans_mm: Sequence[float], rot_deg: Sequence[float], out_png: Path, title: str = "") -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.6))
    axes[0].hist(np.asarray(trans_mm, dtype=float), bins=24, color="tab:blue")
    axes[0].set_xlabel("translation error (mm)")
    axes[1].hist(np.asarray(rot_deg, dtype=float), bins=24, color="tab:orange")
    axes[1].set_xlabel("plane-normal angle (deg)")
    for ax in axes:
        ax.set_ylabel("slices")
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def plot_trace(
    timestamps_s: Sequence[float],
    brain_prob: Sequence[float],
    trans_mm: Sequence[float],
    rot_deg: Sequence[float],
    out_png: Path,
    events: Sequence[dict] = (),
) -> None:
    """Proximity readings over a sweep; NaN gaps mark frames without a pose.

    Events are dicts with ``t_s`` and ``kind`` ("freeze" draws a solid
    marker line, anything else a dashed one).
    """
    ts = np.asarray(timestamps_s, dtype=float)
    panels = [
        ("brain probability", np.asarray(brain_prob, dtype=float), "tab:green", (0.0, 1.05)),
        ("distance (mm)", np.asarray(trans_mm, dtype=float), "tab:blue", None),
        ("angle (deg)", np.asarray(rot_deg, dtype=float), "tab:orange", None),
    ]
    fig, axes = plt.subplots(3, 1, figsize=(8.0, 6.4), sharex=True)
    for ax, (label, values, color, ylim) in zip(axes, panels):
        if len(ts):
            ax.plot(ts, values, color=color, linewidth=1.4)
        ax.set_ylabel(label, fontsize=9)
        if ylim:
            ax.set_ylim(*ylim)
        ax.grid(alpha=0.3)
        for ev in events:
            style = "-" if ev.get("kind") == "freeze" else "--"
            ax.axvline(float(ev["t_s"]), color="black", linestyle=style, linewidth=0.9, alpha=0.7)
    axes[-1].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def render_run_figures(run_dir: Path) -> list[Path]:
    """Render every figure a run directory's delimited outputs support.

    Scans the layout the experiment runner and the training commands
    write (work/*_metrics.csv, eval/pose_*_rows.csv, trace/trace.csv)
    and drops the PNGs into run_dir/figures.
    """
    run_dir = Path(run_dir)
    figures = run_dir / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    written = []

    work = run_dir / "work"
    for csv_path in sorted(work.glob("*_metrics.csv")) + sorted(work.glob("fold*/*_metrics.csv")):
        stem = csv_path.stem.replace("_metrics", "")
        if csv_path.parent != work:
            stem = f"{csv_path.parent.name}_{stem}"
        out = figures / f"{stem}_curves.png"
        plot_metric_curves(csv_path, out, title=f"{stem} training")
        written.append(out)

    for csv_path in sorted((run_dir / "eval").glob("*pose_*_rows.csv")):
        cols = read_csv_columns(csv_path)
        if not cols:
            continue
        stem = csv_path.stem.replace("_rows", "")
        out = figures / f"{stem}_errors.png"
        plot_error_histograms(
            cols["trans_err_mm"], cols["rot_deg"], out, title=f"{stem} held-out errors"
        )
        written.append(out)

    trace_csv = run_dir / "trace" / "trace.csv"
    if trace_csv.exists():
        cols = read_csv_columns(trace_csv)
        if cols:
            events_path = run_dir / "trace" / "events.json"
            events = (
                json.loads(events_path.read_text()).get("events", [])
                if events_path.exists()
                else []
            )
            out = figures / "trace.png"
            plot_trace(
                cols["timestamp"], cols["brain_prob"], cols["trans_mm"], cols["rot_deg"],
                out, events=events,
            )
            written.append(out)
    return written

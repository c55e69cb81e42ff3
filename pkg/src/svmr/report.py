"""Evaluation report writers: key-value metrics, AR curve CSV, PNG figures.

Every writer is byte-deterministic for fixed inputs: keys are sorted,
floats use a fixed format, and PNG date metadata is suppressed, so a
seeded pipeline reproduces its reports exactly.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first
import numpy as np  # noqa: E402

_PNG_METADATA = {"Date": None}


def format_metric(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6f}"


def write_metrics_report(metrics: dict, path: str | Path) -> None:
    """Sorted ``name = value`` lines, one metric per line."""
    lines = [f"{key} = {format_metric(metrics[key])}" for key in sorted(metrics)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_report(path: str | Path) -> dict:
    """Inverse of write_metrics_report, recovering bool/int/float values."""
    out: dict = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        value = value.strip()
        if value in ("true", "false"):
            parsed: object = value == "true"
        else:
            try:
                parsed = int(value)
            except ValueError:
                parsed = float(value)
        out[key.strip()] = parsed
    return out


def write_ar_curve_csv(an_grid, ar, path: str | Path) -> None:
    """Two-column CSV of the AR-vs-AN curve."""
    an_grid = np.asarray(an_grid)
    ar = np.asarray(ar, dtype=float)
    if an_grid.shape != ar.shape:
        raise ValueError(f"curve shape {ar.shape} != grid {an_grid.shape}")
    rows = ["an,ar"]
    rows += [f"{int(an)},{value:.6f}" for an, value in zip(an_grid, ar)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def render_ar_curve_png(an_grid, ar, path: str | Path,
                        label: str = "average recall") -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(np.asarray(an_grid), np.asarray(ar, dtype=float), lw=1.5)
    ax.set_xlabel("average number of proposals")
    ax.set_ylabel(label)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def render_loss_curves_png(history: dict, path: str | Path,
                           title: str = "training") -> None:
    """Per-epoch curves for whichever numeric series the history carries."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    plotted = False
    for key in sorted(history):
        series = history[key]
        if not isinstance(series, (list, tuple)) or not series:
            continue
        if not all(isinstance(v, (int, float, np.floating)) for v in series):
            continue
        ax.plot(range(len(series)), series, marker="o", ms=3, label=key)
        plotted = True
    ax.set_xlabel("epoch")
    ax.set_title(title)
    if plotted:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)

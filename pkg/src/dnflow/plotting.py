"""SVG line plots rendered from the CSV artifacts."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["read_columns", "plot_energies", "plot_loglog"]

matplotlib.rcParams["svg.hashsalt"] = "dnflow"


def read_columns(path) -> dict:
    """Numeric columns of a CSV; rows whose first cell is not a number are skipped."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], []
    for row in rows[1:]:
        try:
            body.append([float(x) for x in row[: len(header)]])
        except ValueError:
            continue
    data = np.array(body) if body else np.zeros((0, len(header)))
    return {name: data[:, j] for j, name in enumerate(header) if data.shape[1] > j}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_energies(csv_path, svg_path, columns: Sequence[str] = ("l2", "grad_l2", "psi_star", "F")):
    cols = read_columns(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in columns:
        y = cols.get(name)
        if y is not None and np.any(y > 0):
            ax.semilogy(cols["t"], np.where(y > 0, y, np.nan), label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("integral")
    ax.set_title("energy decay")
    if ax.lines:
        ax.legend()
    _save(fig, svg_path)


def plot_loglog(csv_path, svg_path, x: str, y: str, title: str, slope: float = None):
    cols = read_columns(csv_path)
    xs, ys = cols[x], cols[y]
    keep = (xs > 0) & (ys > 0)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(xs[keep], ys[keep], "o-", label=y)
    if slope is not None and keep.any():
        x0, y0 = xs[keep][0], ys[keep][0]
        ax.loglog(xs[keep], y0 * (xs[keep] / x0) ** slope, "--", label=f"slope {slope:.3g}")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title)
    ax.legend()
    _save(fig, svg_path)

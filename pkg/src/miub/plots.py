"""Matplotlib figure rendering with byte-deterministic SVG output.

Determinism is achieved by pinning the SVG id hash salt and stripping the
creation date from the metadata, so rendering the same report twice
produces identical bytes.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .report import atomic_write_bytes  # noqa: E402

_HASHSALT = "miub-report"


def _new_figure():
    matplotlib.rcParams["svg.hashsalt"] = _HASHSALT
    return plt.subplots(figsize=(5.5, 3.6), dpi=100)


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None},
                bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def line_plot(series: dict[str, tuple[list, list]], xlabel: str, ylabel: str,
              path, logx: bool = False) -> Path:
    """One figure with one line per series; x-ticks pinned to the data."""
    fig, ax = _new_figure()
    all_x = sorted({x for xs, _ in series.values() for x in xs})
    for label in sorted(series):
        xs, ys = series[label]
        ax.plot(xs, ys, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xticks(all_x)
    ax.set_xticklabels([_tick(x) for x in all_x])
    ax.minorticks_off()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    _save(fig, path)
    return Path(path)


def categorical_plot(categories: list[str], values: list[float], xlabel: str,
                     ylabel: str, path) -> Path:
    fig, ax = _new_figure()
    xs = range(len(categories))
    ax.plot(xs, values, marker="o")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(categories)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    _save(fig, path)
    return Path(path)


def dual_series_plot(x: list, left: list[float], right: list[float],
                     xlabel: str, left_label: str, right_label: str,
                     path, logx: bool = False) -> Path:
    """Two quantities on separate y-axes against a shared x-axis."""
    fig, ax = _new_figure()
    ax2 = ax.twinx()
    l1, = ax.plot(x, left, marker="o", color="tab:blue", label=left_label)
    l2, = ax2.plot(x, right, marker="s", color="tab:orange", label=right_label)
    if logx:
        ax.set_xscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels([_tick(v) for v in x])
    ax.minorticks_off()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(left_label, color="tab:blue")
    ax2.set_ylabel(right_label, color="tab:orange")
    ax.legend(handles=[l1, l2], fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)
    return Path(path)


def _tick(x) -> str:
    if isinstance(x, float) and x.is_integer():
        return str(int(x))
    return str(x)

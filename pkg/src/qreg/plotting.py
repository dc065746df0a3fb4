"""Figure rendering for experiment reports.

Every experiment writes its figures next to the CSV artifacts; the CSVs stay
the canonical output (figures are a view, never an input).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .trace import Trace, rolling_mean

__all__ = [
    "plot_staircase",
    "plot_static_map",
    "plot_control",
    "plot_perf",
    "plot_tail_latency",
    "plot_sweep_ts",
    "plot_sweep_gains",
]

plt.rcParams["figure.figsize"] = (9, 5)
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_staircase(trace: Trace, filtered: Trace, path: Path) -> Path:
    fig, (ax_q, ax_bw) = plt.subplots(2, 1, sharex=True, height_ratios=[2, 1])
    ax_q.plot(trace.t, trace.q, lw=0.6, alpha=0.5, label="measured queue")
    ax_q.plot(filtered.t, filtered.q, lw=1.5, label="filtered")
    ax_q.set_ylabel("queue size (requests)")
    ax_q.legend(loc="upper left")
    ax_bw.step(trace.t, trace.bw, where="post", color="k")
    ax_bw.set_ylabel("bw limit (Mbit/s)")
    ax_bw.set_xlabel("time (s)")
    return _save(fig, path)


def plot_static_map(rows: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots()
    bw = [r["bw_mbit_s"] for r in rows]
    q = [r["q_mean"] for r in rows]
    err = [r["q_std"] for r in rows]
    ax.errorbar(bw, q, yerr=err, fmt="o-", capsize=3)
    ax.set_xlabel("bandwidth limit (Mbit/s)")
    ax.set_ylabel("steady-state queue size (requests)")
    return _save(fig, path)


def plot_control(trace: Trace, segments, path: Path) -> Path:
    fig, (ax_q, ax_bw) = plt.subplots(2, 1, sharex=True, height_ratios=[2, 1])
    ax_q.plot(trace.t, trace.q, lw=0.5, alpha=0.4, label="measured queue")
    ax_q.plot(trace.t, rolling_mean(trace.q, 10), lw=1.2, label="rolling avg (10)")
    ax_q.step(trace.t, trace.target, where="post", color="k", lw=1.2, label="target")
    for seg in segments:
        ax_q.hlines(
            seg.mean_q,
            seg.t_start,
            seg.t_end,
            color="green",
            lw=2,
            label="segment mean" if seg is segments[0] else None,
        )
    ax_q.set_ylabel("queue size (requests)")
    ax_q.legend(loc="upper right", fontsize=8)
    ax_bw.plot(trace.t, trace.bw, lw=0.7)
    ax_bw.set_ylabel("action (Mbit/s)")
    ax_bw.set_xlabel("time (s)")
    return _save(fig, path)


def plot_perf(rows: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots()
    modes = []
    for row in rows:
        label = row["mode"] if row["target"] == "" else f"ctrl-{row['target']:g}"
        if label not in modes:
            modes.append(label)
    for i, label in enumerate(modes):
        runs = [
            r["run_s"]
            for r in rows
            if (r["mode"] if r["target"] == "" else f"ctrl-{r['target']:g}") == label
        ]
        x = np.full(len(runs), i, dtype=float)
        x += np.linspace(-0.15, 0.15, len(runs))
        ax.plot(x, runs, "o", ms=3, alpha=0.5)
        stats = np.array(runs)
        ax.hlines(stats.mean(), i - 0.25, i + 0.25, color="k", lw=2)
        ax.hlines(
            [np.percentile(stats, 10), np.percentile(stats, 90)],
            i - 0.18,
            i + 0.18,
            color="k",
            lw=1,
            linestyles="dashed",
        )
    ax.set_xticks(range(len(modes)), modes)
    ax.set_ylabel("job runtime (s)")
    return _save(fig, path)


def plot_tail_latency(tails: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots()
    modes = []
    for row in tails:
        if row["label"] not in modes:
            modes.append(row["label"])
    for i, label in enumerate(modes):
        vals = [r["tail_s"] for r in tails if r["label"] == label]
        ax.plot(np.full(len(vals), i), vals, "o", ms=4, alpha=0.6)
        ax.hlines(np.mean(vals), i - 0.25, i + 0.25, color="k", lw=2)
    ax.set_xticks(range(len(modes)), modes)
    ax.set_ylabel("tail latency (s)")
    return _save(fig, path)


def plot_sweep_ts(traces: dict, table: list[dict], path: Path) -> Path:
    fig, axes = plt.subplots(len(traces), 1, sharey=True)
    if len(traces) == 1:
        axes = [axes]
    for ax, (ts_s, trace) in zip(axes, sorted(traces.items())):
        ax.plot(trace.t, trace.q, lw=0.5)
        ax.step(trace.t, trace.target, where="post", color="k", lw=1)
        row = next(r for r in table if r["ts_s"] == ts_s)
        ax.set_ylabel(f"ts={ts_s:g}s\nstd={row['noise_std_requests']:.2f}")
    axes[-1].set_xlabel("time (s)")
    return _save(fig, path)


def plot_sweep_gains(traces: dict, path: Path) -> Path:
    fig, axes = plt.subplots(len(traces), 1, sharex=True, sharey=True)
    if len(traces) == 1:
        axes = [axes]
    for ax, (label, trace) in zip(axes, traces.items()):
        ax.plot(trace.t, trace.q, lw=0.5, alpha=0.6)
        ax.plot(trace.t, rolling_mean(trace.q, 10), lw=1.2)
        ax.step(trace.t, trace.target, where="post", color="k", lw=1)
        ax.set_ylabel(label)
    axes[-1].set_xlabel("time (s)")
    return _save(fig, path)

"""Transient-response and workload-performance metrics.

Settling time and overshoot are measured on a rolling-average view of the
trace (window 10, centered) because the raw queue signal is noisy; the
steady-state error of a tracking run is evaluated on per-segment means
rather than instantaneous samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trace import Trace, rolling_mean

__all__ = [
    "settling_time",
    "overshoot",
    "perf_metrics",
    "segment_table",
]


def settling_time(
    trace: Trace,
    ref: float,
    band: float = 0.05,
    step_time_s: float | None = None,
    smooth_window: int = 10,
) -> float:
    """Seconds from the reference step until the smoothed output stays
    within ``+-band*ref``.

    Returns 0.0 when the output never leaves the band and ``inf`` when it
    has not settled by the end of the trace (non-settling marker).
    """
    if ref <= 0:
        raise ValueError("reference must be positive")
    t0 = step_time_s if step_time_s is not None else float(trace.t[0])
    mask = trace.t >= t0
    if not mask.any():
        raise ValueError("no samples after the step time")
    t = trace.t[mask]
    smoothed = rolling_mean(trace.q[mask], smooth_window)
    outside = np.abs(smoothed - ref) > band * ref
    if not outside.any():
        return 0.0
    last = int(np.nonzero(outside)[0].max())
    if last == len(t) - 1:
        return math.inf
    return float(t[last + 1] - t0)


def overshoot(
    trace: Trace,
    ref: float,
    step_time_s: float | None = None,
    smooth_window: int = 10,
) -> float:
    """Peak excursion above the reference as a fraction of the reference."""
    if ref <= 0:
        raise ValueError("reference must be positive")
    t0 = step_time_s if step_time_s is not None else float(trace.t[0])
    mask = trace.t >= t0
    if not mask.any():
        raise ValueError("no samples after the step time")
    smoothed = rolling_mean(trace.q[mask], smooth_window)
    return max(0.0, (float(smoothed.max()) - ref) / ref)


def perf_metrics(runtimes_s) -> dict:
    """Summary statistics of per-client runtimes.

    Percentiles use the nearest-rank convention (value at rank
    ``ceil(p/100 * n)``); ``tail`` is the longest runtime across clients.
    """
    values = sorted(float(v) for v in runtimes_s)
    if not values:
        raise ValueError("runtimes must be non-empty")
    n = len(values)

    def nearest_rank(p: float) -> float:
        rank = max(1, math.ceil(p / 100.0 * n))
        return values[rank - 1]

    return {
        "mean": sum(values) / n,
        "p10": nearest_rank(10),
        "p90": nearest_rank(90),
        "tail": values[-1],
    }


@dataclass
class SegmentStats:
    t_start: float
    t_end: float
    target: float
    mean_q: float
    mean_q_settled: float
    abs_err: float
    rel_err: float
    settling_s: float
    overshoot: float


def segment_table(
    trace: Trace,
    segments,
    settle_skip_s: float = 5.0,
    smooth_window: int = 10,
) -> list[SegmentStats]:
    """Tracking quality per reference segment.

    ``mean_q`` averages the whole segment (how tracking plots draw their
    per-target average); ``mean_q_settled`` drops the first
    ``settle_skip_s`` seconds so the cross-segment transient does not bias
    the steady-state error.
    """
    rows = []
    for (t0, t1, target) in segments:
        seg_mask = (trace.t >= t0) & (trace.t < t1)
        if not seg_mask.any():
            continue
        seg = trace.select(seg_mask)
        settled = seg.q[seg.t >= t0 + settle_skip_s]
        if settled.size == 0:
            settled = seg.q
        mean_settled = float(settled.mean())
        rows.append(
            SegmentStats(
                t_start=t0,
                t_end=t1,
                target=target,
                mean_q=float(seg.q.mean()),
                mean_q_settled=mean_settled,
                abs_err=abs(mean_settled - target),
                rel_err=abs(mean_settled - target) / target,
                settling_s=settling_time(
                    seg, target, step_time_s=t0, smooth_window=smooth_window
                ),
                overshoot=overshoot(
                    seg, target, step_time_s=t0, smooth_window=smooth_window
                ),
            )
        )
    return rows

"""Time-indexed experiment traces and their on-disk CSV format.

A trace is the unit of exchange between experiments, identification and
metrics: one row per sampling tick with the applied bandwidth action and the
measured queue size.  Closed-loop traces carry two extra columns for the
reference target and the unclamped controller output.

File format: CSV with header ``t_s,bw_mbit_s,q_requests`` (open loop) or
``t_s,bw_mbit_s,q_requests,target_requests,raw_action_mbit_s`` (closed
loop); free-form metadata goes to a ``<name>.meta.json`` sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Trace", "rolling_mean"]

_BASE_HEADER = ["t_s", "bw_mbit_s", "q_requests"]
_LOOP_HEADER = _BASE_HEADER + ["target_requests", "raw_action_mbit_s"]


@dataclass
class Trace:
    """Ordered samples of (time, bandwidth action, measured queue size)."""

    t: np.ndarray
    bw: np.ndarray
    q: np.ndarray
    ts: float
    target: np.ndarray | None = None
    raw_action: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.bw = np.asarray(self.bw, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=float)
        if self.raw_action is not None:
            self.raw_action = np.asarray(self.raw_action, dtype=float)
        n = len(self.t)
        if len(self.bw) != n or len(self.q) != n:
            raise ValueError("trace columns must have equal length")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("trace timestamps must be strictly increasing")
        if np.any(self.q < 0) or np.any(self.bw < 0):
            raise ValueError("queue sizes and bandwidth actions must be >= 0")
        if not (self.ts > 0):
            raise ValueError(f"nominal sampling period must be positive: {self.ts}")

    def __len__(self) -> int:
        return len(self.t)

    def check_regular(self, tol: float = 0.2) -> bool:
        """True when successive gaps stay within ``tol`` of the nominal ts."""
        if len(self.t) < 2:
            return True
        gaps = np.diff(self.t)
        return bool(np.all(np.abs(gaps - self.ts) <= tol * self.ts))

    def select(self, mask: np.ndarray) -> "Trace":
        """Subset of samples (timestamps kept), metadata carried over."""
        return Trace(
            t=self.t[mask],
            bw=self.bw[mask],
            q=self.q[mask],
            ts=self.ts,
            target=self.target[mask] if self.target is not None else None,
            raw_action=self.raw_action[mask] if self.raw_action is not None else None,
            meta=dict(self.meta),
        )

    def with_q(self, q: np.ndarray) -> "Trace":
        """Copy of the trace with a replaced queue column (e.g. filtered)."""
        out = self.select(np.ones(len(self), dtype=bool))
        out.q = np.asarray(q, dtype=float)
        if len(out.q) != len(out.t):
            raise ValueError("replacement column length mismatch")
        return out

    # --- persistence -----------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        closed = self.target is not None
        header = _LOOP_HEADER if closed else _BASE_HEADER
        lines = [",".join(header)]
        for i in range(len(self)):
            row = [repr(float(self.t[i])), repr(float(self.bw[i])), repr(float(self.q[i]))]
            if closed:
                row.append(repr(float(self.target[i])))
                raw = self.raw_action[i] if self.raw_action is not None else self.bw[i]
                row.append(repr(float(raw)))
            lines.append(",".join(row))
        path.write_text("\n".join(lines) + "\n")
        sidecar = {"ts_s": self.ts, "meta": self.meta}
        path.with_suffix(".meta.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trace":
        path = Path(path)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        if header[:3] != _BASE_HEADER:
            raise ValueError(f"unrecognized trace header: {lines[0]!r}")
        closed = header == _LOOP_HEADER
        cols = [[] for _ in header]
        for line in lines[1:]:
            for slot, tok in zip(cols, line.split(",")):
                slot.append(float(tok))
        ts = None
        meta: dict = {}
        sidecar = path.with_suffix(".meta.json")
        if sidecar.exists():
            doc = json.loads(sidecar.read_text())
            ts = doc.get("ts_s")
            meta = doc.get("meta", {})
        if ts is None:
            ts = float(np.median(np.diff(cols[0]))) if len(cols[0]) > 1 else 1.0
        return cls(
            t=np.array(cols[0]),
            bw=np.array(cols[1]),
            q=np.array(cols[2]),
            ts=ts,
            target=np.array(cols[3]) if closed else None,
            raw_action=np.array(cols[4]) if closed else None,
            meta=meta,
        )


def rolling_mean(series: np.ndarray, window: int = 10, center: bool = True) -> np.ndarray:
    """Rolling average used for trace visualization and transient metrics.

    Centered by default so the smoother adds no phase lag; the window is
    truncated near the series edges.
    """
    x = np.asarray(series, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1 or len(x) == 0:
        return x.copy()
    out = np.empty_like(x)
    lo = window // 2 if center else window - 1
    hi = window - lo - 1 if center else 0
    for i in range(len(x)):
        out[i] = x[max(0, i - lo): min(len(x), i + hi + 1)].mean()
    return out

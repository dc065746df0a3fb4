"""Discrete-time PI control loop with actuator-aware saturation handling.

Each sampling tick the controller turns the queue-size error into a
bandwidth action:

    e      = reference - measured_q
    raw    = kp*e + ki*(integral + ts*e)
    output = clamp(raw, bw_min, bw_max)

The integral advances by ``ts*e`` only when the raw output stayed within the
actuator limits (conditional-integration anti-windup): token-bucket rates
are bounded, and without the hold a saturated phase winds the integral up
and wrecks recovery.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FirstOrderModel, PiGains, TuningResult
from .trace import Trace

__all__ = [
    "PiController",
    "ReferenceSchedule",
    "ControlRunError",
    "run_control_loop",
    "LinearPlantLoop",
    "WallClock",
]

# token-bucket shaping rejects near-zero rates
MIN_RATE_MBIT_S = 0.125


class ControlRunError(RuntimeError):
    """A control run failed (too many skipped ticks)."""


@dataclass
class PiController:
    """PI state: gains, sampling time, reference and output limits.

    ``integral`` accumulates error*seconds; ``last_raw`` keeps the unclamped
    output of the latest tick for logging.
    """

    gains: PiGains
    ts: float
    reference: float
    output_limits: tuple = (1.0, 500.0)
    integral: float = 0.0
    last_output: float | None = None
    last_raw: float = 0.0
    nan_skips: int = 0

    def __post_init__(self):
        bw_min, bw_max = self.output_limits
        if bw_min < MIN_RATE_MBIT_S:
            raise ValueError(
                f"bw_min={bw_min} below the {MIN_RATE_MBIT_S} Mbit/s shaping floor"
            )
        if not (bw_min < bw_max):
            raise ValueError(f"need bw_min < bw_max, got {self.output_limits}")
        if not (self.ts > 0):
            raise ValueError("sampling time must be positive")
        if self.last_output is None:
            # uncontrolled behavior until the first measurement
            self.last_output = bw_max

    @classmethod
    def from_tuning(
        cls,
        tuning: TuningResult,
        ts: float,
        reference: float,
        output_limits: tuple = (1.0, 500.0),
    ) -> "PiController":
        return cls(
            gains=tuning.gains, ts=ts, reference=reference, output_limits=output_limits
        )

    def step(self, measured_q: float) -> float:
        """Advance one tick; returns the clamped bandwidth action (Mbit/s)."""
        if measured_q is None or math.isnan(measured_q):
            self.nan_skips += 1
            return self.last_output
        bw_min, bw_max = self.output_limits
        e = self.reference - measured_q
        raw = self.gains.kp * e + self.gains.ki * (self.integral + self.ts * e)
        output = min(max(raw, bw_min), bw_max)
        if raw == output:
            self.integral += self.ts * e
        self.last_raw = raw
        self.last_output = output
        return output


class ReferenceSchedule:
    """Piecewise-constant reference: target holds from each timestamp on.

    File format: CSV ``t_s,target_requests``, one row per step.
    """

    def __init__(self, steps):
        steps = [(float(t), float(v)) for t, v in steps]
        if not steps:
            raise ValueError("schedule needs at least one step")
        if sorted(t for t, _ in steps) != [t for t, _ in steps]:
            raise ValueError("schedule timestamps must be sorted")
        self.steps = steps

    @classmethod
    def constant(cls, target: float) -> "ReferenceSchedule":
        return cls([(0.0, target)])

    def value_at(self, t: float) -> float:
        value = self.steps[0][1]
        for t0, v in self.steps:
            if t0 <= t:
                value = v
            else:
                break
        return value

    def segments(self, duration_s: float):
        """(t_start, t_end, target) triples covering [0, duration)."""
        out = []
        for i, (t0, v) in enumerate(self.steps):
            if t0 >= duration_s:
                break
            t1 = self.steps[i + 1][0] if i + 1 < len(self.steps) else duration_s
            out.append((t0, min(t1, duration_s), v))
        return out

    def to_csv(self, path) -> None:
        lines = ["t_s,target_requests"]
        lines += [f"{repr(t)},{repr(v)}" for t, v in self.steps]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ReferenceSchedule":
        lines = Path(path).read_text().strip().splitlines()
        if lines[0] != "t_s,target_requests":
            raise ValueError(f"unrecognized schedule header: {lines[0]!r}")
        return cls([tuple(map(float, ln.split(","))) for ln in lines[1:]])


def run_control_loop(
    ctrl: PiController,
    sensor,
    actuator,
    clock,
    schedule: ReferenceSchedule,
    duration_s: float,
    max_skip_fraction: float = 0.10,
) -> Trace:
    """Drive the PI loop for ``duration_s`` and return the closed-loop trace.

    Per tick: read the sensor, compute the action, apply it, advance time.
    A sensor read that raises or returns NaN skips the tick (the previous
    action is re-applied); more than ``max_skip_fraction`` skipped ticks
    fails the run.
    """
    ts = ctrl.ts
    n = round(duration_s / ts)
    t_l, bw_l, q_l, ref_l, raw_l = [], [], [], [], []
    skipped = 0
    for k in range(n):
        t = k * ts
        ctrl.reference = schedule.value_at(t)
        try:
            q = sensor.read(ts)
        except Exception:
            q = float("nan")
        if q is None or math.isnan(q):
            skipped += 1
            action = ctrl.last_output
            ctrl.nan_skips += 1
            raw = ctrl.last_raw
        else:
            action = ctrl.step(q)
            raw = ctrl.last_raw
        actuator.apply(action)
        t_l.append(t)
        bw_l.append(action)
        q_l.append(q if q is not None else float("nan"))
        ref_l.append(ctrl.reference)
        raw_l.append(raw)
        clock.wait(ts)
    if n > 0 and skipped / n > max_skip_fraction:
        raise ControlRunError(
            f"{skipped}/{n} ticks skipped (> {max_skip_fraction:.0%}); "
            "sensor is not keeping up"
        )
    return Trace(
        t=np.array(t_l),
        bw=np.array(bw_l),
        q=np.array(q_l),
        ts=ts,
        target=np.array(ref_l),
        raw_action=np.array(raw_l),
        meta={"kind": "control", "skipped_ticks": skipped},
    )


class LinearPlantLoop:
    """Sensor/actuator/clock triple over the noise-free linear queue model.

    The plant is the one-step recurrence itself; used to check that tuned
    gains meet their transient targets before touching the full simulator.
    """

    def __init__(self, model: FirstOrderModel, q0: float = 0.0):
        self.model = model
        self.q = q0
        self._bw = 0.0

    # sensor / actuator / clock protocol
    def read(self, window_s: float) -> float:
        return self.q

    def apply(self, bw_mbit_s: float) -> None:
        self._bw = bw_mbit_s

    def wait(self, dt_s: float) -> None:
        self.q = self.model.a * self.q + self.model.b * self._bw

    @property
    def sensor(self):
        return self

    @property
    def actuator(self):
        return self

    @property
    def clock(self):
        return self


class WallClock:
    """Real-time clock for live runs: waits out the remainder of each tick."""

    def __init__(self):
        self._next = None

    def wait(self, dt_s: float) -> None:
        now = time.monotonic()
        if self._next is None:
            self._next = now
        self._next += dt_s
        delay = self._next - now
        if delay > 0:
            time.sleep(delay)

"""Real-system sensor and actuator backends.

Sensor side: the per-device block statistics line (``/sys/block/<dev>/stat``)
carries a ``time_in_queue`` counter accumulating queue-length * time in
milliseconds; the difference between two reads divided by the interval
estimates the average dispatch-queue size.

Actuator side: egress shaping commands for the token-bucket filter qdisc,
rendered as strings for an executor shim.  ``replace`` semantics keep
actuation idempotent regardless of prior interface state.

Live polling and live command execution sit behind the ``--live`` CLI flag
and never run in the default test suite.
"""

from __future__ import annotations

import re
import subprocess
from dataclasses import dataclass
from pathlib import Path

__all__ = [
    "BlockStat",
    "BlockStatParseError",
    "CounterWrapError",
    "parse_block_stat",
    "format_block_stat",
    "estimate_queue",
    "render_shaper_command",
    "SysfsQueueSensor",
    "ShaperActuator",
]

# read I/Os .. time_in_queue: the classic block-layer counters
_FIELDS_11 = (
    "read_ios",
    "read_merges",
    "read_sectors",
    "read_ticks_ms",
    "write_ios",
    "write_merges",
    "write_sectors",
    "write_ticks_ms",
    "in_flight",
    "io_ticks_ms",
    "time_in_queue_ms",
)
_FIELDS_DISCARD = (
    "discard_ios",
    "discard_merges",
    "discard_sectors",
    "discard_ticks_ms",
)
_FIELDS_FLUSH = ("flush_ios", "flush_ticks_ms")

_IFACE_RE = re.compile(r"[A-Za-z0-9._-]{1,15}\Z")

MIN_RATE_MBIT_S = 0.125


class BlockStatParseError(ValueError):
    """Malformed block stat line; carries the offending token or count."""


class CounterWrapError(RuntimeError):
    """A cumulative counter went backwards (device reset or wrap)."""


@dataclass(frozen=True)
class BlockStat:
    read_ios: int
    read_merges: int
    read_sectors: int
    read_ticks_ms: int
    write_ios: int
    write_merges: int
    write_sectors: int
    write_ticks_ms: int
    in_flight: int
    io_ticks_ms: int
    time_in_queue_ms: int
    discard_ios: int | None = None
    discard_merges: int | None = None
    discard_sectors: int | None = None
    discard_ticks_ms: int | None = None
    flush_ios: int | None = None
    flush_ticks_ms: int | None = None


def parse_block_stat(line: str) -> BlockStat:
    """Parse one stat line (11 classic, 15 with discard, 17 with flush fields)."""
    tokens = line.split()
    if len(tokens) not in (11, 15, 17):
        raise BlockStatParseError(
            f"expected 11, 15 or 17 fields, got {len(tokens)}"
        )
    values = []
    for tok in tokens:
        try:
            value = int(tok)
        except ValueError:
            raise BlockStatParseError(f"non-numeric field {tok!r}") from None
        if value < 0:
            raise BlockStatParseError(f"negative counter {tok!r}")
        values.append(value)
    names = _FIELDS_11
    if len(tokens) >= 15:
        names = names + _FIELDS_DISCARD
    if len(tokens) == 17:
        names = names + _FIELDS_FLUSH
    return BlockStat(**dict(zip(names, values)))


def format_block_stat(stat: BlockStat) -> str:
    """Inverse of the parser: whitespace-separated counters, present fields only."""
    values = [getattr(stat, name) for name in _FIELDS_11]
    if stat.discard_ios is not None:
        values += [getattr(stat, name) for name in _FIELDS_DISCARD]
        if stat.flush_ios is not None:
            values += [getattr(stat, name) for name in _FIELDS_FLUSH]
    return " ".join(str(v) for v in values)


def estimate_queue(prev: BlockStat, curr: BlockStat, dt_s: float) -> float:
    """Average queue size over [prev, curr] from the time_in_queue delta."""
    if dt_s <= 0:
        raise ValueError("dt must be positive")
    delta = curr.time_in_queue_ms - prev.time_in_queue_ms
    if delta < 0:
        raise CounterWrapError(
            f"time_in_queue went backwards ({prev.time_in_queue_ms} -> "
            f"{curr.time_in_queue_ms}); discard this interval"
        )
    return delta / (dt_s * 1000.0)


def render_shaper_command(
    iface: str,
    bw_mbit_s: float,
    burst_bytes: int = 32 * 1024,
    latency_ms: int = 400,
) -> str:
    """Token-bucket shaping command for the given egress rate.

    ``replace`` (not add/change) so repeated actuation is idempotent and
    recovers from unknown prior qdisc state.
    """
    if not _IFACE_RE.match(iface):
        raise ValueError(f"invalid interface name {iface!r}")
    if bw_mbit_s < MIN_RATE_MBIT_S:
        raise ValueError(
            f"rate {bw_mbit_s} Mbit/s below the {MIN_RATE_MBIT_S} Mbit/s floor; "
            "shaping at near-zero rates stalls the interface"
        )
    if burst_bytes <= 0 or latency_ms <= 0:
        raise ValueError("burst and latency must be positive")
    rate = f"{bw_mbit_s:g}"
    burst_kb = burst_bytes // 1024
    return (
        f"tc qdisc replace dev {iface} root tbf "
        f"rate {rate}mbit burst {burst_kb}kb latency {latency_ms}ms"
    )


class SysfsQueueSensor:
    """Queue-size sensor over the block stat file of a device.

    Each ``read`` parses the stat file and estimates the average queue from
    the ``time_in_queue`` delta since the previous read.  The first read only
    primes the counter and reports NaN (the control loop skips that tick);
    counter wrap does the same and re-primes.
    """

    def __init__(self, device: str, stat_path: str | Path | None = None):
        self.device = device
        self.stat_path = Path(stat_path or f"/sys/block/{device}/stat")
        self._prev: BlockStat | None = None

    def read(self, window_s: float) -> float:
        curr = parse_block_stat(self.stat_path.read_text())
        prev, self._prev = self._prev, curr
        if prev is None:
            return float("nan")
        try:
            return estimate_queue(prev, curr, window_s)
        except CounterWrapError:
            return float("nan")


class ShaperActuator:
    """Applies bandwidth limits by rendering (and optionally running) tc
    commands.

    ``executor`` is any callable taking the command string; the default
    dry-run executor records commands without touching the system.  Pass
    ``ShaperActuator.run_live`` as the executor to actually shell out.
    """

    def __init__(
        self,
        iface: str,
        executor=None,
        burst_bytes: int = 32 * 1024,
        latency_ms: int = 400,
    ):
        if not _IFACE_RE.match(iface):
            raise ValueError(f"invalid interface name {iface!r}")
        self.iface = iface
        self.burst_bytes = burst_bytes
        self.latency_ms = latency_ms
        self.history: list[str] = []
        self._executor = executor

    def apply(self, bw_mbit_s: float) -> None:
        cmd = render_shaper_command(
            self.iface, bw_mbit_s, self.burst_bytes, self.latency_ms
        )
        self.history.append(cmd)
        if self._executor is not None:
            self._executor(cmd)

    @staticmethod
    def run_live(cmd: str) -> None:
        subprocess.run(cmd.split(), check=True)

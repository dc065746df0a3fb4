"""One-way control plane: bandwidth actions multicast to client daemons.

Wire format (29 bytes, big-endian):

    offset  size  field
    0       4     magic "QCTL"
    4       1     version (=1)
    5       8     seq, monotonically increasing per sender
    13      8     bandwidth in bits per second (>= 125000)
    21      8     timestamp, Unix epoch milliseconds

Datagrams carry no acknowledgements; the sender re-emits the current action
every control tick, so a lost datagram is corrected within one tick.
Receivers apply last-writer-wins by ``seq`` so UDP reordering and duplicates
cannot roll the bandwidth limit back.
"""

from __future__ import annotations

import ipaddress
import socket
import struct
import time
from dataclasses import dataclass, field

__all__ = [
    "ControlMessage",
    "DecodeError",
    "TruncatedDatagramError",
    "ForeignDatagramError",
    "VersionError",
    "ReceiverState",
    "encode_msg",
    "decode_msg",
    "receiver_apply",
    "ActionPublisher",
    "MulticastActuator",
    "open_receiver_socket",
    "receive_loop",
]

MAGIC = b"QCTL"
VERSION = 1
WIRE_SIZE = 29
MIN_BW_BITS_PER_S = 125_000  # the 0.125 Mbit/s shaping floor

_STRUCT = struct.Struct(">4sBQQQ")


class DecodeError(ValueError):
    """Base class for datagram decode failures."""


class TruncatedDatagramError(DecodeError):
    pass


class ForeignDatagramError(DecodeError):
    """Wrong magic: not one of ours, safe to count and drop silently."""


class VersionError(DecodeError):
    pass


@dataclass(frozen=True)
class ControlMessage:
    seq: int
    bw_bits_per_s: int
    timestamp_ms: int

    def __post_init__(self):
        if not (0 <= self.seq < 2**64):
            raise ValueError(f"seq out of u64 range: {self.seq}")
        if not (MIN_BW_BITS_PER_S <= self.bw_bits_per_s < 2**64):
            raise ValueError(
                f"bandwidth {self.bw_bits_per_s} bits/s below the "
                f"{MIN_BW_BITS_PER_S} floor or out of range"
            )
        if not (0 <= self.timestamp_ms < 2**64):
            raise ValueError(f"timestamp out of u64 range: {self.timestamp_ms}")

    @property
    def bw_mbit_s(self) -> float:
        return self.bw_bits_per_s / 1e6


def encode_msg(msg: ControlMessage) -> bytes:
    return _STRUCT.pack(MAGIC, VERSION, msg.seq, msg.bw_bits_per_s, msg.timestamp_ms)


def decode_msg(data: bytes) -> ControlMessage:
    if len(data) != WIRE_SIZE:
        raise TruncatedDatagramError(
            f"datagram is {len(data)} bytes, expected {WIRE_SIZE}"
        )
    magic, version, seq, bw, ts = _STRUCT.unpack(data)
    if magic != MAGIC:
        raise ForeignDatagramError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    try:
        return ControlMessage(seq=seq, bw_bits_per_s=bw, timestamp_ms=ts)
    except ValueError as exc:
        raise DecodeError(str(exc)) from None


@dataclass
class ReceiverState:
    last_seq: int | None = None
    last_applied_bw: int | None = None
    apply_count: int = 0
    stale_count: int = 0
    decode_error_count: int = 0
    actuator_failures: int = 0


def receiver_apply(state: ReceiverState, msg: ControlMessage, actuator) -> ReceiverState:
    """Apply a decoded action if it is newer than anything applied so far.

    Stale or duplicate sequence numbers are counted but never actuated
    (last-writer-wins under reordering).  An actuator failure leaves the
    sequence cursor untouched so the next datagram retries naturally.
    """
    if state.last_seq is not None and msg.seq <= state.last_seq:
        state.stale_count += 1
        return state
    try:
        actuator.apply(msg.bw_mbit_s)
    except Exception:
        state.actuator_failures += 1
        return state
    state.last_seq = msg.seq
    state.last_applied_bw = msg.bw_bits_per_s
    state.apply_count += 1
    return state


class ActionPublisher:
    """Sends one datagram per control tick; usable as a loop actuator.

    ``group`` may be a multicast address (joined with the given TTL) or a
    unicast address, which keeps loopback integration tests unprivileged.
    """

    def __init__(self, group: str, port: int, ttl: int = 1, clock=None):
        self.group = group
        self.port = port
        self.seq = 0
        self._clock = clock or (lambda: int(time.time() * 1000))
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        if ipaddress.ip_address(group).is_multicast:
            self.sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, ttl)

    def publish(self, bw_mbit_s: float) -> ControlMessage:
        self.seq += 1
        msg = ControlMessage(
            seq=self.seq,
            bw_bits_per_s=round(bw_mbit_s * 1e6),
            timestamp_ms=self._clock(),
        )
        self.sock.sendto(encode_msg(msg), (self.group, self.port))
        return msg

    def close(self) -> None:
        self.sock.close()


class MulticastActuator:
    """Adapter: controller actions go out as protocol datagrams."""

    def __init__(self, publisher: ActionPublisher):
        self.publisher = publisher

    def apply(self, bw_mbit_s: float) -> None:
        self.publisher.publish(bw_mbit_s)


def open_receiver_socket(group: str, port: int, timeout_s: float = 1.0) -> socket.socket:
    """Bind a datagram socket, joining the group when it is multicast."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    addr = ipaddress.ip_address(group)
    if addr.is_multicast:
        sock.bind(("", port))
        mreq = struct.pack("4sl", socket.inet_aton(group), socket.INADDR_ANY)
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
    else:
        sock.bind((group, port))
    sock.settimeout(timeout_s)
    return sock


def receive_loop(
    sock: socket.socket,
    actuator,
    state: ReceiverState | None = None,
    stop=None,
    max_messages: int | None = None,
    log=None,
) -> ReceiverState:
    """Single-threaded daemon loop: decode, apply, count; serialized actuation.

    Runs until ``stop()`` turns true or ``max_messages`` datagrams were
    applied or rejected.  Socket timeouts just re-check the stop condition.
    """
    state = state or ReceiverState()
    handled = 0
    while True:
        if stop is not None and stop():
            break
        if max_messages is not None and handled >= max_messages:
            break
        try:
            data, _ = sock.recvfrom(4096)
        except socket.timeout:
            continue
        except OSError:
            break
        handled += 1
        try:
            msg = decode_msg(data)
        except DecodeError as exc:
            state.decode_error_count += 1
            if log:
                log(f"dropped datagram: {exc}")
            continue
        receiver_apply(state, msg, actuator)
        if log:
            log(
                f"seq={msg.seq} bw={msg.bw_mbit_s:g}Mbit/s "
                f"applied={state.apply_count} stale={state.stale_count}"
            )
    return state

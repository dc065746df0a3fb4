"""Command-line entry point.

Experiment subcommands (``ident``, ``control``, ``perf``, ``sweep-ts``,
``sweep-gains``) drive the simulator and write CSV artifacts, figures and a
summary JSON into the output directory.  ``daemon`` runs the client-side
receiver that applies multicast bandwidth actions; ``send`` emits a single
action datagram for debugging.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .adapters import ShaperActuator, SysfsQueueSensor
from .controller import PiController, ReferenceSchedule, WallClock, run_control_loop
from .experiments import EXPERIMENTS, load_config, run_experiment
from .model import design_from_json
from .protocol import (
    ActionPublisher,
    ControlMessage,
    encode_msg,
    open_receiver_socket,
    receive_loop,
)


def _add_experiment_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file (defaults used otherwise)")
    sub.add_argument("--seed", type=int, help="override the base seed")
    sub.add_argument("--out-dir", help="artifact directory (default: out)")
    sub.add_argument(
        "--no-figures", action="store_true", help="skip figure rendering"
    )
    sub.add_argument(
        "--live",
        action="store_true",
        help="drive the real sensor/actuator instead of the simulator "
        "(control only; requires --device/--iface and privileges)",
    )
    sub.add_argument("--device", help="block device for --live sensing (e.g. sda)")
    sub.add_argument("--iface", help="network interface for --live shaping")


def _run_experiment_cmd(name: str, args: argparse.Namespace) -> int:
    overrides = {
        "experiment": name,
        "seed": args.seed,
        "out_dir": args.out_dir,
    }
    config = load_config(args.config, overrides)
    if args.no_figures:
        config.figures = False
    if args.live:
        if name != "control":
            print("--live is only supported for the control experiment", file=sys.stderr)
            return 2
        return _run_live_control(config, args)
    summary = run_experiment(config)
    print(json.dumps(summary, indent=2, default=str))
    return 3 if summary.get("partial") else 0


def _run_live_control(config, args) -> int:
    if not args.device or not args.iface:
        print("--live needs --device and --iface", file=sys.stderr)
        return 2
    import pathlib

    design_path = pathlib.Path(config.out_dir) / "design.json"
    if not design_path.exists():
        print(
            f"no {design_path}: run `qreg ident` first to identify and tune",
            file=sys.stderr,
        )
        return 2
    model, _, tuning = design_from_json(design_path.read_text())
    schedule = ReferenceSchedule(list(config.control.schedule))
    ctrl = PiController(
        gains=tuning.gains,
        ts=config.controller.ts_s,
        reference=schedule.value_at(0.0),
        output_limits=config.controller.limits,
    )
    sensor = SysfsQueueSensor(args.device)
    actuator = ShaperActuator(args.iface, executor=ShaperActuator.run_live)
    trace = run_control_loop(
        ctrl, sensor, actuator, WallClock(), schedule, config.control.duration_s
    )
    out = pathlib.Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out / "control_trace_live.csv")
    print(f"live control trace written to {out / 'control_trace_live.csv'}")
    return 0


def _cmd_daemon(args: argparse.Namespace) -> int:
    executor = None if args.dry_run else ShaperActuator.run_live
    actuator = ShaperActuator(args.iface, executor=executor)

    def log(line: str) -> None:
        if args.dry_run and actuator.history:
            print(f"[dry-run] {actuator.history[-1]}")
        print(line)

    sock = open_receiver_socket(args.group, args.port, timeout_s=1.0)
    print(f"listening on {args.group}:{args.port}, shaping {args.iface}"
          f"{' (dry-run)' if args.dry_run else ''}")
    try:
        state = receive_loop(sock, actuator, max_messages=args.max_messages, log=log)
    except KeyboardInterrupt:
        state = None
    finally:
        sock.close()
    if state is not None:
        print(
            f"applied={state.apply_count} stale={state.stale_count} "
            f"decode_errors={state.decode_error_count}"
        )
    return 0


def _cmd_send(args: argparse.Namespace) -> int:
    if args.dry_run:
        msg = ControlMessage(
            seq=args.seq, bw_bits_per_s=round(args.bw * 1e6), timestamp_ms=0
        )
        print(encode_msg(msg).hex())
        return 0
    publisher = ActionPublisher(args.group, args.port)
    publisher.seq = args.seq - 1
    msg = publisher.publish(args.bw)
    publisher.close()
    print(f"sent seq={msg.seq} bw={msg.bw_mbit_s:g}Mbit/s to {args.group}:{args.port}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qreg",
        description="Feedback regulation of shared-storage congestion",
    )
    parser.add_argument("--version", action="version", version=f"qreg {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    for name in EXPERIMENTS:
        sub = subs.add_parser(name, help=f"run the {name} experiment")
        _add_experiment_args(sub)
        sub.set_defaults(func=lambda a, n=name: _run_experiment_cmd(n, a))

    daemon = subs.add_parser("daemon", help="receive and apply bandwidth actions")
    daemon.add_argument("--group", required=True, help="multicast group or address")
    daemon.add_argument("--port", type=int, required=True)
    daemon.add_argument("--iface", required=True, help="interface to shape")
    daemon.add_argument(
        "--dry-run", action="store_true", help="log shaper commands instead of running"
    )
    daemon.add_argument(
        "--max-messages", type=int, default=None, help="stop after N datagrams"
    )
    daemon.set_defaults(func=_cmd_daemon)

    send = subs.add_parser("send", help="emit one action datagram")
    send.add_argument("--group", required=True)
    send.add_argument("--port", type=int, required=True)
    send.add_argument("--bw", type=float, required=True, help="bandwidth in Mbit/s")
    send.add_argument("--seq", type=int, default=1)
    send.add_argument(
        "--dry-run", action="store_true", help="print the wire bytes as hex"
    )
    send.set_defaults(func=_cmd_send)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # nonzero exit on any failed run
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

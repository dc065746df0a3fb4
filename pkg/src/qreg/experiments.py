"""Experiment driver: identification, control validation, performance and
sensitivity studies, each emitting plot-ready CSV artifacts plus rendered
figures and a summary JSON.

Every experiment is deterministic given its config and seeds: rerunning with
the same inputs yields byte-identical CSV files.  Summaries carry a hash of
the resolved config so artifacts can be traced back to their parameters.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import PiController, ReferenceSchedule, run_control_loop
from .metrics import perf_metrics, segment_table
from .model import DesignSpec, FirstOrderModel, TuningResult, design_to_json, tune_pi
from .plant import PlantConfig, StoragePlant, WorkloadSpec, simulate_workload
from .sysid import (
    StaircaseSchedule,
    SysidConfig,
    identify_first_order,
    plateau_means,
    run_staircase,
)
from .trace import Trace

__all__ = [
    "ControllerConfig",
    "IdentConfig",
    "ControlConfig",
    "PerfConfig",
    "SweepTsConfig",
    "SweepGainsConfig",
    "ExperimentConfig",
    "load_config",
    "config_hash",
    "run_experiment",
]

EXPERIMENTS = ("ident", "control", "perf", "sweep-ts", "sweep-gains")


@dataclass
class ControllerConfig:
    ts_s: float = 0.3
    ks_s: float = 1.4
    mp: float = 0.02
    bw_min_mbit_s: float = 1.0
    bw_max_mbit_s: float = 500.0

    @property
    def limits(self) -> tuple:
        return (self.bw_min_mbit_s, self.bw_max_mbit_s)

    def spec(self) -> DesignSpec:
        return DesignSpec(settling_time_s=self.ks_s, overshoot=self.mp)


@dataclass
class IdentConfig:
    levels_mbit_s: tuple = (60.0, 100.0, 140.0, 180.0, 220.0, 260.0, 300.0)
    hold_s: float = 6.0


@dataclass
class ControlConfig:
    # step schedule over the run: [t_s, target_requests] pairs
    schedule: tuple = ((0.0, 30.0), (60.0, 60.0), (120.0, 90.0), (180.0, 50.0))
    duration_s: float = 240.0
    settle_skip_s: float = 5.0
    seeds: tuple = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("control experiment needs at least one seed")


@dataclass
class PerfConfig:
    targets: tuple = (60.0, 70.0, 80.0, 90.0)
    seeds: tuple = (1, 2, 3, 4, 5)
    bytes_scale: float = 0.01  # desk-scale volume: job bytes reduced 100x

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("perf experiment needs at least one seed")


@dataclass
class SweepTsConfig:
    ts_values_s: tuple = (0.05, 0.1, 0.5)
    duration_s: float = 60.0
    target: float = 80.0
    settle_skip_s: float = 10.0
    # softer target than the headline design: an aggressive loop rings at the
    # largest sampling period on this plant and would mask the sensor effect
    ks_s: float = 3.0
    seed: int = 1


@dataclass
class SweepGainsConfig:
    scalings: tuple = (1.0, 100.0, 0.01)
    seed: int = 1


@dataclass
class ExperimentConfig:
    experiment: str = "ident"
    seed: int = 20260301          # identification / base seed
    out_dir: str = "out"
    figures: bool = True
    plant: PlantConfig = field(default_factory=PlantConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    sysid: SysidConfig = field(default_factory=SysidConfig)
    ident: IdentConfig = field(default_factory=IdentConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    perf: PerfConfig = field(default_factory=PerfConfig)
    sweep_ts: SweepTsConfig = field(default_factory=SweepTsConfig)
    sweep_gains: SweepGainsConfig = field(default_factory=SweepGainsConfig)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(
                f"unknown experiment {self.experiment!r}; pick from {EXPERIMENTS}"
            )


_SECTION_TYPES = {
    "plant": PlantConfig,
    "workload": WorkloadSpec,
    "controller": ControllerConfig,
    "sysid": SysidConfig,
    "ident": IdentConfig,
    "control": ControlConfig,
    "perf": PerfConfig,
    "sweep_ts": SweepTsConfig,
    "sweep_gains": SweepGainsConfig,
}


def _build_section(cls, overrides: dict):
    defaults = dataclasses.asdict(cls())
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    merged = {**defaults, **overrides}
    for key, value in merged.items():
        if isinstance(value, list):
            merged[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return cls(**merged)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve an experiment config: file settings over defaults, then CLI
    overrides on top."""
    doc: dict = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
    if overrides:
        doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    kwargs: dict = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value)
        elif key in ("experiment", "seed", "out_dir", "figures"):
            kwargs[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return ExperimentConfig(**kwargs)


def config_hash(config: ExperimentConfig) -> str:
    doc = dataclasses.asdict(config)
    canonical = json.dumps(doc, sort_keys=True, default=list)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# --- artifact helpers ---------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return str(value)


def write_csv(path: Path, header: list[str], rows: list) -> Path:
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, dict):
            lines.append(",".join(_fmt(row[h]) for h in header))
        else:
            lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_summary(out: Path, config: ExperimentConfig, payload: dict) -> dict:
    summary = {
        "experiment": config.experiment,
        "config_hash": config_hash(config),
        **payload,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n"
    )
    return summary


def _plant_for(config: ExperimentConfig, seed: int, ts: float | None = None) -> StoragePlant:
    pc = config.plant
    if ts is not None and pc.dt_sim_s > ts / 10.0:
        pc = dataclasses.replace(pc, dt_sim_s=ts / 10.0)
    return StoragePlant(pc, seed=seed, bw_init=config.controller.bw_max_mbit_s)


def _identify(config: ExperimentConfig):
    """Shared first stage: staircase on the simulator, pipeline fit, tuning."""
    ts = config.controller.ts_s
    plant = _plant_for(config, seed=config.seed, ts=ts)
    schedule = StaircaseSchedule(
        levels=tuple(config.ident.levels_mbit_s), hold_s=config.ident.hold_s
    )
    trace = run_staircase(plant.sensor, plant.actuator, plant.clock, schedule, ts)
    result = identify_first_order(trace, config.sysid)
    tuning = tune_pi(result.fit.model, config.controller.spec())
    return trace, result, tuning


def _controller(config: ExperimentConfig, tuning: TuningResult, reference: float) -> PiController:
    return PiController(
        gains=tuning.gains,
        ts=config.controller.ts_s,
        reference=reference,
        output_limits=config.controller.limits,
    )


# --- experiments ---------------------------------------------------------------


def run_ident(config: ExperimentConfig, out: Path) -> dict:
    trace, result, tuning = _identify(config)
    trace.to_csv(out / "staircase_trace.csv")
    result.filtered.to_csv(out / "staircase_filtered.csv")
    static_rows = plateau_means(trace)
    write_csv(
        out / "static_map.csv",
        ["bw_mbit_s", "q_mean", "q_std", "n_samples"],
        static_rows,
    )
    model = result.fit.model
    diag = result.fit.diagnostics
    (out / "model.json").write_text(
        design_to_json(
            model,
            config.controller.spec(),
            tuning,
            extra={
                "fit": {
                    "r_squared": diag.r_squared,
                    "residual_std": diag.residual_std,
                    "n_pairs": diag.n_pairs,
                    "warnings": list(diag.warnings),
                }
            },
        )
    )
    artifacts = ["staircase_trace.csv", "staircase_filtered.csv", "static_map.csv", "model.json"]
    if config.figures:
        from . import plotting

        plotting.plot_staircase(trace, result.filtered, out / "ident_trace.png")
        plotting.plot_static_map(static_rows, out / "static_map.png")
        artifacts += ["ident_trace.png", "static_map.png"]
    return _write_summary(
        out,
        config,
        {
            "artifacts": artifacts,
            "model": {"a": model.a, "b": model.b, "ts_s": model.ts},
            "gains": {"kp": tuning.gains.kp, "ki": tuning.gains.ki},
            "fit_r_squared": diag.r_squared,
            "warnings": list(diag.warnings),
        },
    )


def run_control(config: ExperimentConfig, out: Path) -> dict:
    _, result, tuning = _identify(config)
    cc = config.control
    schedule = ReferenceSchedule(list(cc.schedule))
    schedule.to_csv(out / "reference_schedule.csv")
    (out / "design.json").write_text(
        design_to_json(result.fit.model, config.controller.spec(), tuning)
    )
    all_rows = []
    worst = 0.0
    first_trace = None
    for seed in cc.seeds:
        plant = _plant_for(config, seed=seed, ts=config.controller.ts_s)
        ctrl = _controller(config, tuning, schedule.value_at(0.0))
        trace = run_control_loop(
            ctrl, plant.sensor, plant.actuator, plant.clock, schedule, cc.duration_s
        )
        trace.to_csv(out / f"control_trace_seed{seed}.csv")
        if first_trace is None:
            first_trace = trace
        for seg in segment_table(
            trace, schedule.segments(cc.duration_s), settle_skip_s=cc.settle_skip_s
        ):
            worst = max(worst, seg.rel_err)
            all_rows.append(
                {
                    "seed": seed,
                    "t_start": seg.t_start,
                    "t_end": seg.t_end,
                    "target": seg.target,
                    "mean_q": seg.mean_q,
                    "mean_q_settled": seg.mean_q_settled,
                    "abs_err": seg.abs_err,
                    "rel_err": seg.rel_err,
                    "settling_s": seg.settling_s,
                    "overshoot": seg.overshoot,
                }
            )
    write_csv(
        out / "segments.csv",
        [
            "seed",
            "t_start",
            "t_end",
            "target",
            "mean_q",
            "mean_q_settled",
            "abs_err",
            "rel_err",
            "settling_s",
            "overshoot",
        ],
        all_rows,
    )
    artifacts = ["reference_schedule.csv", "design.json", "segments.csv"] + [
        f"control_trace_seed{s}.csv" for s in cc.seeds
    ]
    if config.figures:
        from . import plotting

        segs = segment_table(
            first_trace, schedule.segments(cc.duration_s), settle_skip_s=cc.settle_skip_s
        )
        plotting.plot_control(first_trace, segs, out / "control.png")
        artifacts.append("control.png")
    return _write_summary(
        out,
        config,
        {
            "artifacts": artifacts,
            "seeds": list(cc.seeds),
            "worst_segment_rel_err": worst,
            "gains": {"kp": tuning.gains.kp, "ki": tuning.gains.ki},
        },
    )


def run_perf(config: ExperimentConfig, out: Path) -> dict:
    _, result, tuning = _identify(config)
    pc = config.perf
    workload = config.workload.scaled(pc.bytes_scale)
    (out / "design.json").write_text(
        design_to_json(result.fit.model, config.controller.spec(), tuning)
    )
    runtime_rows: list[dict] = []
    tail_rows: list[dict] = []
    summary_rows: list[dict] = []
    failed_cells: list[dict] = []

    def one_mode(target: float | None):
        label = "baseline" if target is None else f"ctrl-{target:g}"
        run_all = []
        for seed in pc.seeds:
            ctrl = (
                _controller(config, tuning, target) if target is not None else None
            )
            try:
                report = simulate_workload(
                    config.plant,
                    workload,
                    seed=seed,
                    controller=ctrl,
                    target=target,
                    bw_max=config.controller.bw_max_mbit_s,
                )
            except Exception as exc:
                failed_cells.append(
                    {"label": label, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
                )
                continue
            runtime_rows.extend(report.rows())
            stats = perf_metrics(report.runtimes_s)
            tail_rows.append(
                {
                    "label": label,
                    "mode": report.mode,
                    "target": "" if target is None else target,
                    "seed": seed,
                    "tail_s": stats["tail"],
                }
            )
            run_all.extend(report.runtimes_s)
        if run_all:
            stats = perf_metrics(run_all)
            summary_rows.append(
                {
                    "label": label,
                    "mode": "baseline" if target is None else "controlled",
                    "target": "" if target is None else target,
                    "mean_s": stats["mean"],
                    "p10_s": stats["p10"],
                    "p90_s": stats["p90"],
                    "tail_s": stats["tail"],
                }
            )

    one_mode(None)
    for target in pc.targets:
        one_mode(target)
    write_csv(
        out / "runtimes.csv",
        ["client_id", "run_s", "seed", "mode", "target"],
        runtime_rows,
    )
    write_csv(
        out / "tails.csv",
        ["label", "mode", "target", "seed", "tail_s"],
        tail_rows,
    )
    write_csv(
        out / "perf_summary.csv",
        ["label", "mode", "target", "mean_s", "p10_s", "p90_s", "tail_s"],
        summary_rows,
    )
    artifacts = ["design.json", "runtimes.csv", "tails.csv", "perf_summary.csv"]
    if config.figures:
        from . import plotting

        plotting.plot_perf(runtime_rows, out / "perf.png")
        plotting.plot_tail_latency(tail_rows, out / "tail_latency.png")
        artifacts += ["perf.png", "tail_latency.png"]
    payload = {
        "artifacts": artifacts,
        "congestion_penalty": config.plant.congestion_penalty,
        "congestion_threshold": config.plant.congestion_threshold,
    }
    baseline = [r for r in summary_rows if r["mode"] == "baseline"]
    controlled = [r for r in summary_rows if r["mode"] == "controlled"]
    if baseline and controlled:
        best = min(controlled, key=lambda r: r["mean_s"])
        payload.update(
            baseline_mean_s=baseline[0]["mean_s"],
            best_target=best["target"],
            best_mean_s=best["mean_s"],
            mean_improvement=1.0 - best["mean_s"] / baseline[0]["mean_s"],
        )
    if failed_cells:
        payload["partial"] = True
        payload["failed_cells"] = failed_cells
    return _write_summary(out, config, payload)


def run_sweep_ts(config: ExperimentConfig, out: Path) -> dict:
    _, result, _ = _identify(config)
    sc = config.sweep_ts
    spec = DesignSpec(settling_time_s=sc.ks_s, overshoot=config.controller.mp)
    tuning = tune_pi(result.fit.model, spec)
    (out / "design.json").write_text(design_to_json(result.fit.model, spec, tuning))
    table = []
    traces = {}
    for ts in sc.ts_values_s:
        plant = _plant_for(config, seed=sc.seed, ts=ts)
        ctrl = PiController(
            gains=tuning.gains,
            ts=ts,
            reference=sc.target,
            output_limits=config.controller.limits,
        )
        trace = run_control_loop(
            ctrl,
            plant.sensor,
            plant.actuator,
            plant.clock,
            ReferenceSchedule.constant(sc.target),
            sc.duration_s,
        )
        ms = round(ts * 1000)
        trace.to_csv(out / f"sweep_ts_trace_{ms}ms.csv")
        settled = trace.q[trace.t >= sc.settle_skip_s]
        table.append(
            {
                "ts_s": ts,
                "noise_std_requests": float(settled.std()),
                "mean_q": float(settled.mean()),
                "target": sc.target,
            }
        )
        traces[ts] = trace
    write_csv(
        out / "sweep_ts.csv",
        ["ts_s", "noise_std_requests", "mean_q", "target"],
        table,
    )
    artifacts = ["design.json", "sweep_ts.csv"] + [
        f"sweep_ts_trace_{round(ts * 1000)}ms.csv" for ts in sc.ts_values_s
    ]
    if config.figures:
        from . import plotting

        plotting.plot_sweep_ts(traces, table, out / "sweep_ts.png")
        artifacts.append("sweep_ts.png")
    stds = [row["noise_std_requests"] for row in table]
    return _write_summary(
        out,
        config,
        {
            "artifacts": artifacts,
            "noise_std_by_ts": {str(r["ts_s"]): r["noise_std_requests"] for r in table},
            "strictly_decreasing": all(a > b for a, b in zip(stds, stds[1:])),
        },
    )


def run_sweep_gains(config: ExperimentConfig, out: Path) -> dict:
    _, result, tuning = _identify(config)
    gc = config.sweep_gains
    cc = config.control
    schedule = ReferenceSchedule(list(cc.schedule))
    (out / "design.json").write_text(
        design_to_json(result.fit.model, config.controller.spec(), tuning)
    )
    rows = []
    traces = {}
    for scaling in gc.scalings:
        label = (
            "tuned"
            if scaling == 1.0
            else (f"x{scaling:g}" if scaling > 1.0 else f"div{1/scaling:g}")
        )
        gains = tuning.gains.scaled(scaling)
        plant = _plant_for(config, seed=gc.seed, ts=config.controller.ts_s)
        ctrl = PiController(
            gains=gains,
            ts=config.controller.ts_s,
            reference=schedule.value_at(0.0),
            output_limits=config.controller.limits,
        )
        trace = run_control_loop(
            ctrl, plant.sensor, plant.actuator, plant.clock, schedule, cc.duration_s
        )
        trace.to_csv(out / f"sweep_gains_trace_{label}.csv")
        traces[label] = trace
        segs = segment_table(
            trace, schedule.segments(cc.duration_s), settle_skip_s=cc.settle_skip_s
        )
        mean_rel = float(np.mean([s.rel_err for s in segs]))
        seg_len = np.mean([s.t_end - s.t_start for s in segs])
        settling = [
            s.settling_s if np.isfinite(s.settling_s) else seg_len for s in segs
        ]
        mean_settling = float(np.mean(settling))
        # combined tracking score: steady-state error plus normalized settling
        score = mean_rel + mean_settling / seg_len
        rows.append(
            {
                "label": label,
                "scaling": scaling,
                "kp": gains.kp,
                "ki": gains.ki,
                "mean_rel_err": mean_rel,
                "mean_settling_s": mean_settling,
                "score": score,
            }
        )
    order = sorted(range(len(rows)), key=lambda i: rows[i]["score"])
    for rank, idx in enumerate(order, start=1):
        rows[idx]["rank"] = rank
    write_csv(
        out / "sweep_gains.csv",
        ["label", "scaling", "kp", "ki", "mean_rel_err", "mean_settling_s", "score", "rank"],
        rows,
    )
    artifacts = ["design.json", "sweep_gains.csv"] + [
        f"sweep_gains_trace_{r['label']}.csv" for r in rows
    ]
    if config.figures:
        from . import plotting

        plotting.plot_sweep_gains(traces, out / "sweep_gains.png")
        artifacts.append("sweep_gains.png")
    best = min(rows, key=lambda r: r["score"])
    return _write_summary(
        out,
        config,
        {"artifacts": artifacts, "best_label": best["label"], "table": rows},
    )


_RUNNERS = {
    "ident": run_ident,
    "control": run_control,
    "perf": run_perf,
    "sweep-ts": run_sweep_ts,
    "sweep-gains": run_sweep_gains,
}


def run_experiment(config: ExperimentConfig) -> dict:
    """Dispatch an experiment; artifacts land in ``config.out_dir``."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[config.experiment](config, out)

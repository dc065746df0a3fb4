"""Deterministic ground-truth simulator of the shared storage system.

N clients write through token-bucket limiters into a server dispatch queue.
The queue follows a Hammerstein structure: a static logistic saturation map
feeding a first-order lag, plus process noise.  The structure is the
simplest ground truth that reproduces the observed saturating static curve
and first-order step response while staying genuinely nonlinear, so the
identified linear model is an approximation.

Congestion model: while the queue sits above ``congestion_threshold *
q_max`` the effective service throughput is multiplied by
``congestion_penalty`` — the mechanism that makes throttling able to
*shorten* runtimes.  Penalty parameters are configurable and reported with
every result.

The sensor mirrors the kernel counter it stands in for: a time-in-queue
accumulator whose windowed difference yields the time-averaged queue size,
plus white measurement noise that grows as the window shrinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .controller import PiController

__all__ = [
    "PlantConfig",
    "WorkloadSpec",
    "PlantState",
    "StoragePlant",
    "PerfReport",
    "SimulationTimeoutError",
    "static_map",
    "simulate_workload",
]


class SimulationTimeoutError(RuntimeError):
    """The workload did not complete within the simulated-time cap."""


@dataclass(frozen=True)
class PlantConfig:
    n_clients: int = 16
    q_max: float = 128.0                 # requests; dispatch-queue depth
    bw0_mbit_s: float = 180.0            # logistic midpoint
    slope_mbit_s: float = 90.0           # logistic slope scale
    lag_alpha: float = 0.2               # per-tick relaxation at ts_ref
    noise_std: float = 2.0               # process noise, requests
    meas_std: float = 3.0                # sensor noise at a 50 ms window
    congestion_threshold: float = 0.9    # fraction of q_max
    congestion_penalty: float = 0.6      # throughput multiplier above threshold
    disk_rate_mbyte_s: float = 160.0     # nominal service throughput
    dt_sim_s: float = 0.01               # inner simulation step
    ts_ref_s: float = 0.3                # sampling scale lag_alpha refers to
    q0: float | None = None              # initial queue; None = saturated

    def __post_init__(self):
        if not (0.0 < self.lag_alpha < 1.0):
            raise ValueError(f"lag_alpha must be in (0,1), got {self.lag_alpha}")
        if not (0.0 < self.congestion_threshold < 1.0):
            raise ValueError("congestion_threshold must be in (0,1)")
        if not (0.0 < self.congestion_penalty <= 1.0):
            raise ValueError("congestion_penalty must be in (0,1]")
        if self.n_clients < 1:
            raise ValueError("need at least one client")


@dataclass(frozen=True)
class WorkloadSpec:
    """Write-intensive job: sequential writes, large blocks, all clients."""

    bytes_per_job: int = 4 * 1024**3
    jobs_per_client: int = 4
    block_size: int = 1024**2
    iodepth: int = 16
    jitter_std: float = 0.05             # per-client multiplicative runtime noise

    def __post_init__(self):
        for name in ("bytes_per_job", "jobs_per_client", "block_size", "iodepth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be >= 0")

    @property
    def bytes_per_client(self) -> int:
        return self.bytes_per_job * self.jobs_per_client

    def scaled(self, bytes_scale: float) -> "WorkloadSpec":
        """Same job shape with the byte volume scaled (desk-scale runs)."""
        return WorkloadSpec(
            bytes_per_job=max(1, round(self.bytes_per_job * bytes_scale)),
            jobs_per_client=self.jobs_per_client,
            block_size=self.block_size,
            iodepth=self.iodepth,
            jitter_std=self.jitter_std,
        )


@dataclass
class PlantState:
    q_true: float
    time_in_queue_ms: float = 0.0
    bytes_remaining: np.ndarray | None = None
    completed_at_s: float | None = None


def static_map(config: PlantConfig, bw_mbit_s: float) -> float:
    """Steady-state queue size for a held bandwidth limit (logistic)."""
    if bw_mbit_s < 0:
        raise ValueError("bandwidth must be >= 0")
    x = (bw_mbit_s - config.bw0_mbit_s) / config.slope_mbit_s
    return config.q_max / (1.0 + math.exp(-x))


class StoragePlant:
    """Steppable queue simulator with the sensor/actuator pair attached."""

    def __init__(self, config: PlantConfig, seed: int, noise: bool = True,
                 bw_init: float = 500.0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.noise = noise
        q0 = config.q0 if config.q0 is not None else static_map(config, bw_init)
        self.state = PlantState(q_true=min(max(q0, 0.0), config.q_max))
        self.bw_limit = bw_init
        self.now = 0.0
        self._last_tiq_ms = 0.0
        self._primed = False

    # --- dynamics ---------------------------------------------------------

    def plant_step(self, bw_limit: float, dt: float) -> None:
        """Advance the queue by one inner step under ``bw_limit``."""
        cfg = self.config
        scale = dt / cfg.ts_ref_s
        q_ss = static_map(cfg, bw_limit)
        noise = (
            self.rng.normal(0.0, cfg.noise_std * math.sqrt(scale))
            if self.noise
            else 0.0
        )
        q = self.state.q_true + cfg.lag_alpha * (q_ss - self.state.q_true) * scale + noise
        self.state.q_true = min(max(q, 0.0), cfg.q_max)
        self.state.time_in_queue_ms += self.state.q_true * dt * 1000.0
        self.now += dt
        if self.state.bytes_remaining is not None:
            self._drain(bw_limit, dt)

    def _drain(self, bw_limit: float, dt: float) -> None:
        cfg = self.config
        remaining = self.state.bytes_remaining
        active = remaining > 0
        n_active = int(active.sum())
        if n_active == 0:
            return
        penalty = (
            cfg.congestion_penalty
            if self.state.q_true > cfg.congestion_threshold * cfg.q_max
            else 1.0
        )
        fair_share = cfg.disk_rate_mbyte_s / n_active
        rate_mbyte_s = min(bw_limit / 8.0, fair_share) * penalty
        drained = rate_mbyte_s * 1e6 * dt
        last = float(remaining[active].max())
        if drained >= last > 0:
            # sub-step completion instant, so runtimes are not tick-quantized
            fraction = last / drained
            self.state.completed_at_s = self.now - dt + fraction * dt
        remaining[active] = np.maximum(remaining[active] - drained, 0.0)

    def advance(self, window_s: float) -> None:
        """Step the inner simulation across one controller window."""
        dt = self.config.dt_sim_s
        for _ in range(round(window_s / dt)):
            self.plant_step(self.bw_limit, dt)

    # --- sensor / actuator / clock protocol --------------------------------

    def read(self, window_s: float) -> float:
        """Windowed time-average of the queue plus measurement noise."""
        if self.config.dt_sim_s > window_s / 10.0 + 1e-12:
            raise ValueError(
                f"dt_sim={self.config.dt_sim_s}s too coarse for a "
                f"{window_s}s sensing window (need dt_sim <= window/10)"
            )
        delta_ms = self.state.time_in_queue_ms - self._last_tiq_ms
        self._last_tiq_ms = self.state.time_in_queue_ms
        if self._primed and delta_ms > 0:
            base = delta_ms / (window_s * 1000.0)
        else:
            base = self.state.q_true
        self._primed = True
        noise = (
            self.rng.normal(0.0, self.config.meas_std / math.sqrt(window_s / 0.05))
            if self.noise
            else 0.0
        )
        return max(0.0, base + noise)

    def apply(self, bw_mbit_s: float) -> None:
        self.bw_limit = bw_mbit_s

    def wait(self, dt_s: float) -> None:
        self.advance(dt_s)

    @property
    def sensor(self):
        return self

    @property
    def actuator(self):
        return self

    @property
    def clock(self):
        return self


# --- workload performance ----------------------------------------------------

@dataclass
class PerfReport:
    """Per-client runtimes of one workload execution."""

    runtimes_s: list
    mode: str                       # "baseline" or "controlled"
    target: float | None
    seed: int
    completion_s: float

    def rows(self):
        for client_id, run_s in enumerate(self.runtimes_s):
            yield {
                "client_id": client_id,
                "run_s": run_s,
                "seed": self.seed,
                "mode": self.mode,
                "target": "" if self.target is None else self.target,
            }


def simulate_workload(
    config: PlantConfig,
    workload: WorkloadSpec,
    seed: int,
    controller: PiController | None = None,
    target: float | None = None,
    bw_max: float = 500.0,
    time_cap_factor: float = 4.0,
) -> PerfReport:
    """Run the workload to completion; baseline mode holds bw at ``bw_max``.

    Per-client runtime is the simulated completion time scaled by seeded
    multiplicative jitter (the run-time disparity is part of the workload).
    A simulated-time cap of ``time_cap_factor`` times the zero-congestion
    lower bound guards against non-termination.
    """
    plant = StoragePlant(config, seed=seed, bw_init=bw_max)
    plant.state.bytes_remaining = np.full(
        config.n_clients, float(workload.bytes_per_client)
    )
    total = float(workload.bytes_per_client)
    best_rate = min(bw_max / 8.0, config.disk_rate_mbyte_s / config.n_clients) * 1e6
    time_cap = time_cap_factor * total / best_rate
    ts = controller.ts if controller is not None else 0.3
    if controller is not None and target is not None:
        controller.reference = target
    k = 0
    while plant.state.bytes_remaining.max() > 0:
        if controller is not None:
            q = plant.read(ts)
            action = controller.step(q)
            plant.apply(action)
        plant.advance(ts)
        k += 1
        if plant.now > time_cap:
            raise SimulationTimeoutError(
                f"workload exceeded the {time_cap:.1f}s simulated-time cap "
                f"(mode={'controlled' if controller else 'baseline'})"
            )
    completion = plant.state.completed_at_s
    if completion is None:
        completion = plant.now
    jitter_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    jitter = jitter_rng.normal(0.0, workload.jitter_std, config.n_clients)
    jitter = np.clip(jitter, -0.5, None)
    runtimes = [float(completion * (1.0 + j)) for j in jitter]
    return PerfReport(
        runtimes_s=runtimes,
        mode="controlled" if controller is not None else "baseline",
        target=target,
        seed=seed,
        completion_s=completion,
    )

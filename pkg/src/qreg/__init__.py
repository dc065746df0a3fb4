"""Feedback regulation of shared-storage congestion.

A toolkit that keeps the dispatch queue of a shared storage server at a
chosen operating point by throttling client-side I/O bandwidth: first-order
model identification, PI tuning, the closed-loop runtime, a multicast
actuation protocol, real-system sensor/actuator adapters, and a seeded
storage-plant simulator used by the built-in experiment harness.
"""

__version__ = "0.1.0"

from .controller import PiController, ReferenceSchedule, run_control_loop
from .model import (
    DesignSpec,
    FirstOrderModel,
    PiGains,
    TuningResult,
    closed_loop_poles,
    predict_step,
    tune_pi,
)
from .plant import PlantConfig, StoragePlant, WorkloadSpec, simulate_workload
from .sysid import (
    StaircaseSchedule,
    exclude_saturation,
    fit_first_order,
    identify_first_order,
    run_staircase,
    savgol_filter,
)
from .trace import Trace

__all__ = [
    "__version__",
    "DesignSpec",
    "FirstOrderModel",
    "PiGains",
    "TuningResult",
    "tune_pi",
    "predict_step",
    "closed_loop_poles",
    "PiController",
    "ReferenceSchedule",
    "run_control_loop",
    "PlantConfig",
    "WorkloadSpec",
    "StoragePlant",
    "simulate_workload",
    "StaircaseSchedule",
    "run_staircase",
    "exclude_saturation",
    "fit_first_order",
    "identify_first_order",
    "savgol_filter",
    "Trace",
]

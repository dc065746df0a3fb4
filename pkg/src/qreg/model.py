"""Discrete first-order queue model and PI gain design.

The dispatch queue of the storage server is approximated by the one-step
linear recurrence

    q(k+1) = a * q(k) + b * bw(k)

where ``q`` is the measured queue size in requests and ``bw`` the bandwidth
limit applied to the clients (Mbit/s).  ``tune_pi`` maps a transient-response
target (settling time, overshoot) onto PI gains by placing the closed-loop
poles at ``r * exp(+-i*theta)``:

    r     = exp(-4*ts / settling_time)
    theta = pi * ln(r) / ln(overshoot)
    kp    = (a - r^2) / b
    ki    = (1 - 2*r*cos(theta) + r^2) / b

Integral-gain convention
------------------------
The runtime control law multiplies the accumulated error by the sampling
time each tick (``bw = kp*e + ki*Ts*sum(e)``).  Matching the closed-loop
characteristic polynomial of the queue recurrence under that law against
the target ``z^2 - 2*r*cos(theta)*z + r^2`` shows that the classic tuning
map above yields the *per-sample* integral weight, i.e. the product
``ki*Ts``, not ``ki`` alone.  ``closed_loop_poles`` therefore treats the
tuned ``ki`` as the per-sample weight, which places the pole magnitudes
exactly at ``r``.  A controller that stores the tuned ``ki`` verbatim and
multiplies by ``Ts`` at runtime realises a per-sample weight ``Ts`` times
smaller, shifting the poles (to {0.797, 0.226} for the reference design
``ts=0.3, Ks=1.4, Mp=0.02``); for queue poles near ``a ~= 0.8`` the
controller zero almost cancels the dominant shifted pole and the realised
transient still meets the settling/overshoot targets.  See README for the
full derivation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FirstOrderModel",
    "DesignSpec",
    "PiGains",
    "TuningResult",
    "TuningError",
    "tune_pi",
    "predict_step",
    "closed_loop_poles",
    "design_to_json",
    "design_from_json",
]


class TuningError(ValueError):
    """Raised when a model or design spec violates a tuning precondition."""


@dataclass(frozen=True)
class FirstOrderModel:
    """Identified plant parameters of the queue recurrence.

    a:  dimensionless pole of the queue dynamics
    b:  gain in requests per Mbit/s
    ts: sampling time in seconds
    """

    a: float
    b: float
    ts: float

    def __post_init__(self):
        if not (self.ts > 0):
            raise TuningError(f"sampling time must be positive, got ts={self.ts}")
        if self.b == 0 or not math.isfinite(self.b):
            raise TuningError(f"plant gain must be finite and nonzero, got b={self.b}")
        if not math.isfinite(self.a):
            raise TuningError(f"plant pole must be finite, got a={self.a}")

    @property
    def stable(self) -> bool:
        """Open-loop stability: |a| < 1 (queue relaxes on its own)."""
        return abs(self.a) < 1.0


@dataclass(frozen=True)
class DesignSpec:
    """Closed-loop transient targets: settling time (s) and overshoot fraction."""

    settling_time_s: float
    overshoot: float

    def __post_init__(self):
        if not (self.settling_time_s > 0):
            raise TuningError(
                f"settling time must be positive, got {self.settling_time_s}"
            )
        if not (0.0 < self.overshoot < 1.0):
            raise TuningError(
                f"overshoot must lie in (0, 1), got {self.overshoot}"
            )


@dataclass(frozen=True)
class PiGains:
    """PI controller gains: kp in Mbit/s per request, ki per request per second."""

    kp: float
    ki: float

    def __post_init__(self):
        if not (math.isfinite(self.kp) and math.isfinite(self.ki)):
            raise TuningError(f"gains must be finite, got kp={self.kp} ki={self.ki}")

    def scaled(self, factor: float) -> "PiGains":
        return PiGains(self.kp * factor, self.ki * factor)


@dataclass(frozen=True)
class TuningResult:
    """Gains plus the pole-placement intermediates, kept for inspection."""

    gains: PiGains
    r: float
    theta: float


def tune_pi(model: FirstOrderModel, spec: DesignSpec) -> TuningResult:
    """Map (settling time, overshoot) targets onto PI gains for ``model``.

    Rejects open-loop unstable models (|a| >= 1): identification on noisy
    saturated data can produce them, and they must be re-identified rather
    than silently tuned.
    """
    if not model.stable:
        raise TuningError(
            f"model violates |a| < 1 (a={model.a}); re-run identification "
            "over the unsaturated operating region"
        )
    r = math.exp(-4.0 * model.ts / spec.settling_time_s)
    theta = math.pi * math.log(r) / math.log(spec.overshoot)
    if not (0.0 < theta < math.pi):
        raise TuningError(
            f"theta={theta:.4f} rad falls outside (0, pi): the targets "
            f"(settling {spec.settling_time_s}s, overshoot {spec.overshoot}) "
            "require r > overshoot; relax the settling time or the overshoot"
        )
    kp = (model.a - r * r) / model.b
    ki = (1.0 - 2.0 * r * math.cos(theta) + r * r) / model.b
    return TuningResult(PiGains(kp, ki), r, theta)


def predict_step(model: FirstOrderModel, q: float, bw: float) -> float:
    """One-step queue prediction: a*q + b*bw."""
    return model.a * q + model.b * bw


def closed_loop_poles(model: FirstOrderModel, gains: PiGains) -> np.ndarray:
    """Eigenvalues of the two-state closed loop (queue + integral accumulator).

    The loop is analysed with the tuned ``ki`` acting as the per-sample
    integral weight (see the module docstring for why): with the reference
    held constant and states (q, s) where ``s`` accumulates the error,

        q(k+1) = (a - b*kp - b*ki) * q(k) + b*ki * s(k) + const
        s(k+1) = -q(k) + s(k) + const

    For gains from ``tune_pi`` the eigenvalue magnitudes equal ``r``.
    """
    a_cl = np.array(
        [
            [model.a - model.b * (gains.kp + gains.ki), model.b * gains.ki],
            [-1.0, 1.0],
        ]
    )
    return np.linalg.eigvals(a_cl)


def design_to_json(
    model: FirstOrderModel,
    spec: DesignSpec,
    tuning: TuningResult,
    extra: dict | None = None,
) -> str:
    """Serialize an identified model plus its tuned gains to a JSON document."""
    doc = {
        "a": model.a,
        "b": model.b,
        "ts_s": model.ts,
        "kp": tuning.gains.kp,
        "ki": tuning.gains.ki,
        "r": tuning.r,
        "theta": tuning.theta,
        "spec": {"ks_s": spec.settling_time_s, "mp": spec.overshoot},
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def design_from_json(text: str) -> tuple[FirstOrderModel, DesignSpec, TuningResult]:
    doc = json.loads(text)
    model = FirstOrderModel(a=doc["a"], b=doc["b"], ts=doc["ts_s"])
    spec = DesignSpec(
        settling_time_s=doc["spec"]["ks_s"], overshoot=doc["spec"]["mp"]
    )
    tuning = TuningResult(PiGains(doc["kp"], doc["ki"]), doc["r"], doc["theta"])
    return model, spec, tuning

"""Open-loop identification: staircase excitation, smoothing, saturation
exclusion and least-squares fit of the first-order queue model.

The pipeline (``identify_first_order``) reconstructs the model from a
staircase trace in four stages: optional Savitzky-Golay smoothing, exclusion
of saturated/empty samples, selection of usable consecutive pairs, and a
plain least-squares fit of ``q(k+1) = a*q(k) + b*bw(k)``.

Two fitting pitfalls are handled explicitly:

* The queue sensor reports the *time-averaged* queue over each tick, so a
  sample whose measurement window straddles a level change mixes two input
  values; such pairs are dropped by default (``drop_input_transitions``).
* When smoothing is used for the fit itself, *both* channels must pass
  through the same filter or the smoothed output is compared against an
  unsmoothed input and the estimate degrades; ``fit_on_filtered`` does this
  and additionally drops the mirror-padded filter edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import FirstOrderModel
from .trace import Trace

__all__ = [
    "IdentificationError",
    "RankDeficiencyError",
    "StaircaseSchedule",
    "FitDiagnostics",
    "FitResult",
    "savgol_coeffs",
    "savgol_filter",
    "exclude_saturation",
    "fit_first_order",
    "run_staircase",
    "identify_first_order",
    "plateau_means",
]


class IdentificationError(RuntimeError):
    """The trace cannot support a model fit (empty, excluded, too short)."""


class RankDeficiencyError(IdentificationError):
    """The regressors lack excitation (constant input and/or output)."""


# --- Savitzky-Golay smoothing ---------------------------------------------

def savgol_coeffs(window: int, polyorder: int) -> np.ndarray:
    """Convolution coefficients of the least-squares polynomial smoother."""
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    if polyorder >= window:
        raise ValueError(
            f"polyorder must be smaller than window ({polyorder} >= {window})"
        )
    half = window // 2
    # fit a degree-p polynomial over offsets -half..half, evaluate at 0
    offsets = np.arange(-half, half + 1, dtype=float)
    vander = np.vander(offsets, polyorder + 1, increasing=True)
    # first row of the pseudo-inverse = weights reproducing the fit at 0
    return np.linalg.pinv(vander)[0]


def savgol_filter(series, window: int, polyorder: int) -> np.ndarray:
    """Savitzky-Golay smoothing with mirror-padded edges, same length out."""
    x = np.asarray(series, dtype=float)
    if len(x) < window:
        raise ValueError(
            f"series of length {len(x)} is shorter than window {window}"
        )
    coeffs = savgol_coeffs(window, polyorder)
    half = window // 2
    # mirror about the end points, excluding them (x[1..half] reversed)
    left = x[1: half + 1][::-1]
    right = x[-half - 1: -1][::-1]
    padded = np.concatenate([left, x, right])
    return np.convolve(padded, coeffs[::-1], mode="valid")


# --- staircase excitation ---------------------------------------------------

@dataclass(frozen=True)
class StaircaseSchedule:
    """Increasing step excitation: bandwidth levels held for a fixed time."""

    levels: tuple
    hold_s: float

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError("staircase needs at least one level")
        if any(lv < 0 for lv in self.levels):
            raise ValueError("staircase levels must be >= 0")
        if not (self.hold_s > 0):
            raise ValueError("hold time must be positive")

    def validate_for(self, ts: float) -> None:
        if self.hold_s < 10.0 * ts:
            raise ValueError(
                f"hold of {self.hold_s}s gives fewer than 10 samples per "
                f"plateau at ts={ts}s; steady states cannot be estimated"
            )


def run_staircase(sensor, actuator, clock, schedule: StaircaseSchedule, ts: float) -> Trace:
    """Apply each level for ``hold_s`` while sampling the queue every ``ts``.

    On an actuator or sensor failure the partial trace collected so far is
    returned with ``meta["error"]`` set; partial traces are not fit.
    """
    schedule.validate_for(ts)
    t_list, bw_list, q_list = [], [], []
    changes = []
    error = None
    k = 0
    try:
        for level in schedule.levels:
            actuator.apply(level)
            changes.append([round(k * ts, 9), float(level)])
            for _ in range(round(schedule.hold_s / ts)):
                q_list.append(sensor.read(ts))
                t_list.append(k * ts)
                bw_list.append(level)
                k += 1
                clock.wait(ts)
    except Exception as exc:  # fault in the sensor/actuator pair
        error = f"{type(exc).__name__}: {exc}"
    meta = {"kind": "staircase", "level_changes": changes}
    if error is not None:
        meta["error"] = error
        meta["partial"] = True
    return Trace(
        t=np.array(t_list),
        bw=np.array(bw_list),
        q=np.array(q_list),
        ts=ts,
        meta=meta,
    )


# --- exclusion and fitting --------------------------------------------------

def exclude_saturation(trace: Trace, q_max: float = 128.0, eps: float = 2.0) -> Trace:
    """Drop samples where the queue is effectively empty or saturated.

    Keeps samples with ``eps < q < q_max - eps``; timestamps are preserved so
    the fit can still detect which surviving pairs are consecutive.
    """
    if not (q_max > 0):
        raise ValueError("q_max must be positive")
    if not (0 <= eps < q_max / 2):
        raise ValueError(f"eps must lie in [0, q_max/2), got {eps}")
    mask = (trace.q > eps) & (trace.q < q_max - eps)
    if not mask.any():
        raise IdentificationError(
            "all samples are empty or saturated; no dynamics left to fit"
        )
    out = trace.select(mask)
    out.meta["excluded"] = int((~mask).sum())
    return out


@dataclass(frozen=True)
class FitDiagnostics:
    r_squared: float
    residual_std: float
    n_pairs: int
    warnings: tuple = ()


@dataclass
class FitResult:
    model: FirstOrderModel
    diagnostics: FitDiagnostics


def fit_first_order(
    trace: Trace,
    min_pairs: int = 30,
    gap_tol: float = 0.25,
    drop_input_transitions: bool = False,
) -> FitResult:
    """Least-squares fit of (a, b) over consecutive sample pairs.

    A pair (k, k+1) is usable when its timestamp gap is within ``gap_tol``
    of the nominal ts (pairs spanning excluded samples drop out naturally).
    With ``drop_input_transitions`` pairs whose measurement window straddles
    a bandwidth change (bw[k-1] != bw[k]) are also dropped; use this when the
    trace comes from a windowed time-average sensor.
    """
    t, bw, q = trace.t, trace.bw, trace.q
    n = len(t)
    if n < 2:
        raise IdentificationError("trace too short to form pairs")
    usable = np.abs(np.diff(t) - trace.ts) <= gap_tol * trace.ts
    if drop_input_transitions:
        usable = usable.copy()
        usable[0] = False
        for k in range(1, n - 1):
            if bw[k - 1] != bw[k]:
                usable[k] = False
    idx = np.nonzero(usable)[0]
    if len(idx) < min_pairs:
        raise IdentificationError(
            f"only {len(idx)} usable consecutive pairs; need >= {min_pairs}"
        )
    if np.ptp(bw[idx]) == 0:
        raise RankDeficiencyError(
            "input bandwidth is constant: b is unidentifiable without "
            "input variation (staircase excitation required)"
        )
    if np.ptp(q[idx]) == 0 and np.ptp(q[idx + 1]) == 0:
        raise RankDeficiencyError(
            "queue output is constant: no dynamics to identify"
        )
    phi = np.column_stack([q[idx], bw[idx]])
    y = q[idx + 1]
    theta, _, rank, _ = np.linalg.lstsq(phi, y, rcond=None)
    if rank < 2:
        raise RankDeficiencyError(
            "regressor matrix is rank deficient: queue and bandwidth "
            "columns are collinear"
        )
    a_hat, b_hat = float(theta[0]), float(theta[1])
    resid = y - phi @ theta
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    warnings = []
    if abs(a_hat) >= 1.0:
        warnings.append(
            f"identified pole |a|={abs(a_hat):.3f} >= 1 (open-loop unstable); "
            "tuning will refuse this model"
        )
    model = FirstOrderModel(a=a_hat, b=b_hat, ts=trace.ts)
    diag = FitDiagnostics(
        r_squared=r2,
        residual_std=float(resid.std(ddof=2)) if len(idx) > 2 else 0.0,
        n_pairs=len(idx),
        warnings=tuple(warnings),
    )
    return FitResult(model=model, diagnostics=diag)


# --- pipeline ----------------------------------------------------------------

@dataclass
class SysidConfig:
    """Knobs of the identification pipeline (all CLI-exposed)."""

    savgol_window: int = 11
    savgol_polyorder: int = 3
    q_max: float = 128.0
    exclude_eps: float = 2.0
    fit_on_filtered: bool = False
    drop_input_transitions: bool = True
    min_pairs: int = 30


@dataclass
class IdentResult:
    fit: FitResult
    filtered: Trace
    fit_input: Trace


def identify_first_order(trace: Trace, cfg: SysidConfig | None = None) -> IdentResult:
    """Full identification pipeline over a staircase trace.

    The Savitzky-Golay smoothed trace is always produced (it is the
    noise-reduction view emitted with identification reports).  When
    ``fit_on_filtered`` is set, the fit runs on the smoothed data with the
    bandwidth channel passed through the same filter and the mirror-padded
    edges dropped; otherwise the fit runs on the raw windowed measurements
    with transition-straddling pairs dropped.
    """
    cfg = cfg or SysidConfig()
    if trace.meta.get("partial"):
        raise IdentificationError(
            f"refusing to fit a partial trace: {trace.meta.get('error')}"
        )
    q_f = savgol_filter(trace.q, cfg.savgol_window, cfg.savgol_polyorder)
    filtered = trace.with_q(np.maximum(q_f, 0.0))
    filtered.meta["savgol"] = [cfg.savgol_window, cfg.savgol_polyorder]
    if cfg.fit_on_filtered:
        bw_f = savgol_filter(trace.bw, cfg.savgol_window, cfg.savgol_polyorder)
        pre = filtered.select(np.ones(len(trace), dtype=bool))
        pre.bw = np.maximum(bw_f, 0.0)
        edge = np.zeros(len(pre), dtype=bool)
        edge[cfg.savgol_window: len(pre) - cfg.savgol_window] = True
        fit_input = exclude_saturation(pre.select(edge), cfg.q_max, cfg.exclude_eps)
        fit = fit_first_order(fit_input, min_pairs=cfg.min_pairs)
    else:
        fit_input = exclude_saturation(trace, cfg.q_max, cfg.exclude_eps)
        fit = fit_first_order(
            fit_input,
            min_pairs=cfg.min_pairs,
            drop_input_transitions=cfg.drop_input_transitions,
        )
    return IdentResult(fit=fit, filtered=filtered, fit_input=fit_input)


def plateau_means(trace: Trace, settle_fraction: float = 0.5) -> list[dict]:
    """Steady-state queue mean per staircase level (static-map report).

    Uses the trailing ``1 - settle_fraction`` share of each plateau so the
    step transient does not bias the mean.
    """
    changes = trace.meta.get("level_changes")
    if not changes:
        raise IdentificationError("trace carries no staircase level markers")
    rows = []
    bounds = [c[0] for c in changes] + [float(trace.t[-1]) + trace.ts]
    for i, (t0, level) in enumerate(changes):
        t1 = bounds[i + 1]
        start = t0 + settle_fraction * (t1 - t0)
        mask = (trace.t >= start) & (trace.t < t1)
        if not mask.any():
            continue
        rows.append(
            {
                "bw_mbit_s": float(level),
                "q_mean": float(trace.q[mask].mean()),
                "q_std": float(trace.q[mask].std()),
                "n_samples": int(mask.sum()),
            }
        )
    return rows

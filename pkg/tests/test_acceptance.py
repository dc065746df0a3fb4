"""Acceptance suite: one test per release criterion, each printing a
PASS line with the measured values (run with ``pytest -s`` to see them).

Criteria 5-7 run on the built-in simulator at desk scale; they assert
direction and ordering, not cluster-scale magnitudes.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from qreg.controller import LinearPlantLoop, PiController, ReferenceSchedule, run_control_loop
from qreg.experiments import load_config, run_experiment
from qreg.metrics import overshoot, settling_time
from qreg.model import (
    DesignSpec,
    FirstOrderModel,
    closed_loop_poles,
    predict_step,
    tune_pi,
)
from qreg.protocol import (
    MIN_BW_BITS_PER_S,
    ControlMessage,
    ReceiverState,
    decode_msg,
    encode_msg,
    receiver_apply,
)
from qreg.sysid import SysidConfig, fit_first_order, identify_first_order
from qreg.trace import Trace

REPO_ROOT = Path(__file__).resolve().parent.parent

REFERENCE_MODEL = FirstOrderModel(a=0.8, b=0.05, ts=0.3)
REFERENCE_SPEC = DesignSpec(settling_time_s=1.4, overshoot=0.02)


def _run(tmp_factory, experiment, subdir):
    out = tmp_factory.mktemp(subdir)
    config = load_config(None, {"experiment": experiment, "out_dir": str(out)})
    config.figures = False
    summary = run_experiment(config)
    return out, summary


@pytest.fixture(scope="module")
def ident_run(tmp_path_factory):
    return _run(tmp_path_factory, "ident", "ident")


@pytest.fixture(scope="module")
def control_run(tmp_path_factory):
    return _run(tmp_path_factory, "control", "control")


@pytest.fixture(scope="module")
def perf_run(tmp_path_factory):
    return _run(tmp_path_factory, "perf", "perf")


@pytest.fixture(scope="module")
def sweep_ts_run(tmp_path_factory):
    return _run(tmp_path_factory, "sweep-ts", "sweepts")


def _read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))
    return rows


def test_criterion_01_tuning_formulas():
    result = tune_pi(REFERENCE_MODEL, REFERENCE_SPEC)
    assert result.r == pytest.approx(0.42437, abs=1e-4)
    assert result.theta == pytest.approx(0.68834, abs=1e-4)
    print(
        f"\nACCEPTANCE 01 tuning formulas: PASS "
        f"(r={result.r:.5f}, theta={result.theta:.5f})"
    )


def test_criterion_02_pole_placement(ident_run):
    out, _ = ident_run
    doc = json.loads((out / "model.json").read_text())
    model = FirstOrderModel(a=doc["a"], b=doc["b"], ts=doc["ts_s"])
    tuning = tune_pi(model, REFERENCE_SPEC)
    poles = closed_loop_poles(model, tuning.gains)
    magnitudes = np.abs(poles)
    assert magnitudes == pytest.approx([tuning.r, tuning.r], abs=5e-2)
    # the sampling-time convention finding is part of the repo docs
    readme = (REPO_ROOT / "README.md").read_text()
    assert "Integral-gain convention" in readme
    print(
        f"\nACCEPTANCE 02 pole placement: PASS "
        f"(identified a={model.a:.4f} b={model.b:.4f}; |poles|={magnitudes[0]:.5f}, "
        f"{magnitudes[1]:.5f} vs r={tuning.r:.5f}; convention documented)"
    )


def _linear_staircase(noise_std=0.0, seed=0, hold_ticks=50,
                      levels=(50, 120, 190, 260, 330, 400)):
    q = 0.0
    t_l, bw_l, q_l = [], [], []
    k = 0
    for level in levels:
        for _ in range(hold_ticks):
            t_l.append(k * 0.3)
            bw_l.append(level)
            q_l.append(q)
            q = predict_step(REFERENCE_MODEL, q, level)
            k += 1
    q_arr = np.array(q_l)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        q_arr = np.maximum(q_arr + rng.normal(0.0, noise_std, len(q_arr)), 0.0)
    return Trace(t=np.array(t_l), bw=np.array(bw_l), q=q_arr, ts=0.3)


def test_criterion_03_identification_oracle():
    # noise-free: exact recovery
    exact = fit_first_order(_linear_staircase())
    assert exact.model.a == pytest.approx(0.8, abs=1e-6)
    assert exact.model.b == pytest.approx(0.05, abs=1e-6 * 0.05)
    # sigma=2 measurement noise, 20 seeds through the smoothing pipeline
    a_errs, b_rels = [], []
    for seed in range(1000, 1020):
        trace = _linear_staircase(noise_std=2.0, seed=seed)
        result = identify_first_order(
            trace, SysidConfig(fit_on_filtered=True, q_max=1e9)
        )
        a_errs.append(abs(result.fit.model.a - 0.8))
        b_rels.append(abs(result.fit.model.b - 0.05) / 0.05)
    assert max(a_errs) <= 0.05
    assert max(b_rels) <= 0.15
    print(
        f"\nACCEPTANCE 03 identification oracle: PASS "
        f"(exact to 1e-6; noisy over 20 seeds: max|a err|={max(a_errs):.4f}, "
        f"max b rel err={max(b_rels):.3f})"
    )


def test_criterion_04_closed_loop_specs():
    tuning = tune_pi(REFERENCE_MODEL, REFERENCE_SPEC)
    bound_settle = REFERENCE_SPEC.settling_time_s + 2 * REFERENCE_MODEL.ts
    bound_overshoot = REFERENCE_SPEC.overshoot + 0.03
    ctrl = PiController.from_tuning(
        tuning, ts=0.3, reference=50.0, output_limits=(0.125, 1e6)
    )
    loop = LinearPlantLoop(REFERENCE_MODEL, q0=0.0)
    sched = ReferenceSchedule([(0.0, 50.0), (15.0, 80.0)])
    trace = run_control_loop(
        ctrl, loop.sensor, loop.actuator, loop.clock, sched, 30.0
    )
    results = []
    for (t0, t1, ref) in sched.segments(30.0):
        seg = trace.select((trace.t >= t0) & (trace.t < t1))
        st = settling_time(seg, ref, step_time_s=t0)
        ov = overshoot(seg, ref, step_time_s=t0)
        assert st <= bound_settle, f"settling {st}s > {bound_settle}s at ref {ref}"
        assert ov <= bound_overshoot, f"overshoot {ov} > {bound_overshoot} at ref {ref}"
        results.append((ref, st, ov))
    printable = ", ".join(f"ref {r:g}: settle {s:.2f}s ovr {o:.4f}" for r, s, o in results)
    print(f"\nACCEPTANCE 04 closed-loop specs: PASS ({printable})")


def test_criterion_05_tracking_on_simulator(control_run):
    _, summary = control_run
    assert summary["seeds"] == [1, 2, 3, 4, 5]
    assert summary["worst_segment_rel_err"] < 0.05
    print(
        f"\nACCEPTANCE 05 simulator tracking: PASS "
        f"(worst settled segment error {summary['worst_segment_rel_err']:.4f} "
        f"< 0.05 over 5 seeds)"
    )


def test_criterion_06_performance_direction(perf_run):
    out, summary = perf_run
    rows = _read_csv(out / "perf_summary.csv")
    baseline = next(r for r in rows if r["mode"] == "baseline")
    controlled = [r for r in rows if r["mode"] == "controlled"]
    assert {float(r["target"]) for r in controlled} == {60.0, 70.0, 80.0, 90.0}
    best = min(controlled, key=lambda r: float(r["mean_s"]))
    assert float(best["mean_s"]) < float(baseline["mean_s"])
    tails = _read_csv(out / "tails.csv")
    base_tail = {r["seed"]: float(r["tail_s"]) for r in tails if r["mode"] == "baseline"}
    assert set(base_tail) == {"1", "2", "3", "4", "5"}
    for row in tails:
        if row["mode"] == "controlled":
            assert float(row["tail_s"]) < base_tail[row["seed"]], (
                f"target {row['target']} seed {row['seed']}: tail "
                f"{row['tail_s']} not below baseline {base_tail[row['seed']]}"
            )
    print(
        f"\nACCEPTANCE 06 performance direction: PASS "
        f"(baseline mean {float(baseline['mean_s']):.1f}s, best target "
        f"{best['target']} mean {float(best['mean_s']):.1f}s, improvement "
        f"{summary['mean_improvement']:.0%}; tail below baseline for every "
        f"target and seed)"
    )


def test_criterion_07_sampling_time_sweep(sweep_ts_run):
    out, summary = sweep_ts_run
    rows = _read_csv(out / "sweep_ts.csv")
    assert [float(r["ts_s"]) for r in rows] == [0.05, 0.1, 0.5]
    stds = [float(r["noise_std_requests"]) for r in rows]
    assert stds[0] > stds[1] > stds[2]
    print(
        f"\nACCEPTANCE 07 sampling-time sweep: PASS "
        f"(measured-output noise std {stds[0]:.2f} > {stds[1]:.2f} > {stds[2]:.2f} "
        f"for ts = 50/100/500 ms)"
    )


def test_criterion_08_protocol():
    rng = np.random.default_rng(808)
    for _ in range(1000):
        msg = ControlMessage(
            seq=int(rng.integers(0, 2**63)),
            bw_bits_per_s=int(rng.integers(MIN_BW_BITS_PER_S, 2**40)),
            timestamp_ms=int(rng.integers(0, 2**48)),
        )
        assert decode_msg(encode_msg(msg)) == msg

    class Recorder:
        def __init__(self):
            self.bw = None

        def apply(self, bw_mbit_s):
            self.bw = bw_mbit_s

    for trial in range(10):
        messages = [
            ControlMessage(seq=i + 1, bw_bits_per_s=int(rng.integers(10**6, 10**9)),
                           timestamp_ms=0)
            for i in range(100)
        ]
        delivered = [m for m in messages if rng.random() > 0.35]
        if not delivered:
            delivered = [messages[0]]
        delivered += list(rng.choice(delivered, size=25))
        delivered = [delivered[i] for i in rng.permutation(len(delivered))]
        state = ReceiverState()
        recorder = Recorder()
        for msg in delivered:
            receiver_apply(state, msg, recorder)
        expected = max(delivered, key=lambda m: m.seq)
        assert state.last_applied_bw == expected.bw_bits_per_s
        assert recorder.bw == pytest.approx(expected.bw_mbit_s)
    print(
        "\nACCEPTANCE 08 protocol: PASS (1000 roundtrips identical; final "
        "applied bandwidth equals highest delivered seq under 10 adversarial "
        "reorder/duplicate/drop schedules)"
    )


def test_criterion_09_adapters():
    from qreg.adapters import (
        BlockStatParseError,
        estimate_queue,
        parse_block_stat,
        render_shaper_command,
    )

    line11 = "100 2 800 50 900 10 7200 4000 12 600 4500"
    assert parse_block_stat(line11).time_in_queue_ms == 4500
    assert parse_block_stat(line11 + " 5 1 400 30").discard_ios == 5
    assert parse_block_stat(line11 + " 5 1 400 30 7 90").flush_ticks_ms == 90
    with pytest.raises(BlockStatParseError):
        parse_block_stat(" ".join(["0"] * 10))
    with pytest.raises(BlockStatParseError):
        parse_block_stat(line11.replace("4500", "abc"))

    prev = parse_block_stat(line11.replace("4500", "1000"))
    curr = parse_block_stat(line11.replace("4500", "4000"))
    assert estimate_queue(prev, curr, 0.3) == pytest.approx(10.0)

    assert render_shaper_command("eth0", 100.0) == (
        "tc qdisc replace dev eth0 root tbf rate 100mbit burst 32kb latency 400ms"
    )
    print(
        "\nACCEPTANCE 09 adapters: PASS (11/15/17-field parsing, malformed "
        "rejection, queue estimate = 10, shaper template byte-exact)"
    )


def test_criterion_10_determinism(tmp_path_factory, ident_run, control_run,
                                  perf_run, sweep_ts_run):
    first_runs = {
        "ident": ident_run[0],
        "control": control_run[0],
        "perf": perf_run[0],
        "sweep-ts": sweep_ts_run[0],
    }
    checked = 0
    for experiment, first_out in first_runs.items():
        second_out, _ = _run(tmp_path_factory, experiment, f"again-{experiment}")
        for csv_path in sorted(first_out.glob("*.csv")):
            twin = second_out / csv_path.name
            assert twin.exists(), f"{experiment}: missing {csv_path.name} on rerun"
            assert csv_path.read_bytes() == twin.read_bytes(), (
                f"{experiment}: {csv_path.name} differs between reruns"
            )
            checked += 1
    # sweep-gains runs only here, twice
    g1, _ = _run(tmp_path_factory, "sweep-gains", "gains1")
    g2, _ = _run(tmp_path_factory, "sweep-gains", "gains2")
    for csv_path in sorted(g1.glob("*.csv")):
        assert csv_path.read_bytes() == (g2 / csv_path.name).read_bytes()
        checked += 1
    print(
        f"\nACCEPTANCE 10 determinism: PASS ({checked} CSV artifacts "
        f"byte-identical across reruns of all five experiments)"
    )

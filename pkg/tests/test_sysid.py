import numpy as np
import pytest
import scipy.signal

from qreg.model import FirstOrderModel, predict_step
from qreg.plant import PlantConfig, StoragePlant
from qreg.sysid import (
    IdentificationError,
    RankDeficiencyError,
    StaircaseSchedule,
    SysidConfig,
    exclude_saturation,
    fit_first_order,
    identify_first_order,
    plateau_means,
    run_staircase,
    savgol_filter,
)
from qreg.trace import Trace


def linear_staircase_trace(
    a=0.8, b=0.05, ts=0.3, levels=(50, 120, 190, 260, 330, 400),
    hold_ticks=50, noise_std=0.0, seed=0, q0=0.0,
):
    """Trace generated exactly by the one-step model, optional white noise."""
    model = FirstOrderModel(a=a, b=b, ts=ts)
    q = q0
    t_l, bw_l, q_l = [], [], []
    k = 0
    for level in levels:
        for _ in range(hold_ticks):
            t_l.append(k * ts)
            bw_l.append(level)
            q_l.append(q)
            q = predict_step(model, q, level)
            k += 1
    q_arr = np.array(q_l)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        q_arr = np.maximum(q_arr + rng.normal(0, noise_std, len(q_arr)), 0.0)
    return Trace(t=np.array(t_l), bw=np.array(bw_l), q=q_arr, ts=ts,
                 meta={"kind": "staircase"})


class TestSavgol:
    def test_constant_series_unchanged(self):
        series = [5.0] * 11
        out = savgol_filter(series, 5, 2)
        assert out == pytest.approx(series)

    def test_linear_ramp_reproduced_away_from_edges(self):
        ramp = np.linspace(0.0, 20.0, 21)
        out = savgol_filter(ramp, 7, 2)
        assert out[3:-3] == pytest.approx(ramp[3:-3], abs=1e-9)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(42)
        x = np.cumsum(rng.normal(size=200))
        for window, order in [(5, 2), (11, 3), (21, 4)]:
            mine = savgol_filter(x, window, order)
            ref = scipy.signal.savgol_filter(x, window, order, mode="mirror")
            np.testing.assert_allclose(mine, ref, atol=1e-10)

    def test_noisy_ramp_rms(self):
        rng = np.random.default_rng(7)
        clean = np.linspace(0.0, 50.0, 200)
        noisy = clean + rng.normal(0.0, 1.0, 200)
        out = savgol_filter(noisy, 11, 3)
        interior = slice(10, -10)
        rms = np.sqrt(np.mean((out[interior] - clean[interior]) ** 2))
        assert rms < 0.5

    def test_preserves_mean_of_stationary_series(self):
        rng = np.random.default_rng(3)
        x = 10.0 + rng.normal(0.0, 2.0, 500)
        out = savgol_filter(x, 11, 3)
        interior = slice(10, -10)
        assert abs(out[interior].mean() - x[interior].mean()) < 0.01 * abs(
            x[interior].mean()
        )

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            savgol_filter(np.zeros(20), 10, 3)
        with pytest.raises(ValueError, match="polyorder"):
            savgol_filter(np.zeros(20), 5, 5)
        with pytest.raises(ValueError, match="shorter"):
            savgol_filter(np.zeros(5), 7, 2)


class TestExcludeSaturation:
    def test_inner_samples_untouched(self):
        trace = linear_staircase_trace(hold_ticks=20)
        trace.q[:] = np.linspace(10, 100, len(trace))
        out = exclude_saturation(trace, q_max=128, eps=2)
        assert len(out) == len(trace)

    def test_all_empty_is_infeasible(self):
        trace = linear_staircase_trace(hold_ticks=20)
        trace.q[:] = 0.0
        with pytest.raises(IdentificationError, match="saturated"):
            exclude_saturation(trace, q_max=128, eps=2)

    def test_saturated_share_removed(self):
        trace = linear_staircase_trace(hold_ticks=20)
        n = len(trace)
        n_sat = int(0.3 * n)
        q = np.full(n, 60.0)
        q[:n_sat] = 128.0
        trace.q = q
        out = exclude_saturation(trace, q_max=128, eps=2)
        assert len(out) == n - n_sat

    def test_idempotent(self):
        trace = linear_staircase_trace(hold_ticks=20, noise_std=5.0, seed=1)
        once = exclude_saturation(trace, q_max=128, eps=2)
        twice = exclude_saturation(once, q_max=128, eps=2)
        assert len(twice) == len(once)
        np.testing.assert_array_equal(once.q, twice.q)

    def test_eps_bounds(self):
        trace = linear_staircase_trace(hold_ticks=20)
        with pytest.raises(ValueError, match="eps"):
            exclude_saturation(trace, q_max=128, eps=64)


class TestFitFirstOrder:
    def test_exact_recovery_noise_free(self):
        trace = linear_staircase_trace(a=0.8, b=0.05, hold_ticks=50)
        result = fit_first_order(trace)
        assert result.model.a == pytest.approx(0.8, abs=1e-6)
        assert result.model.b == pytest.approx(0.05, abs=1e-6 * 0.05)
        assert result.diagnostics.r_squared > 1 - 1e-9

    def test_noisy_recovery_three_seeds(self):
        # quick version of the 20-seed acceptance run
        for seed in (0, 1, 2):
            trace = linear_staircase_trace(hold_ticks=50, noise_std=2.0, seed=seed)
            result = identify_first_order(
                trace, SysidConfig(fit_on_filtered=True, q_max=1e9)
            )
            assert result.fit.model.a == pytest.approx(0.8, abs=0.05)
            assert result.fit.model.b == pytest.approx(0.05, rel=0.15)

    def test_constant_input_is_rank_deficient(self):
        trace = linear_staircase_trace(levels=(200,), hold_ticks=60)
        with pytest.raises(RankDeficiencyError, match="constant"):
            fit_first_order(trace)

    def test_too_few_pairs(self):
        trace = linear_staircase_trace(levels=(50, 200), hold_ticks=10)
        with pytest.raises(IdentificationError, match="pairs"):
            fit_first_order(trace, min_pairs=30)

    def test_unstable_fit_is_flagged_not_rejected(self):
        trace = linear_staircase_trace(a=1.01, b=0.05, levels=(5, 10), hold_ticks=20, q0=1.0)
        result = fit_first_order(trace, min_pairs=10)
        assert result.model.a > 1.0
        assert any("unstable" in w for w in result.diagnostics.warnings)

    def test_drop_input_transitions_skips_straddle_pairs(self):
        trace = linear_staircase_trace(levels=(50, 200, 350), hold_ticks=40)
        full = fit_first_order(trace)
        dropped = fit_first_order(trace, drop_input_transitions=True)
        # exact data: same model either way, fewer pairs used
        assert dropped.model.a == pytest.approx(full.model.a, abs=1e-9)
        assert dropped.diagnostics.n_pairs < full.diagnostics.n_pairs


class TestRunStaircase:
    def test_sample_count_eight_levels(self):
        plant = StoragePlant(PlantConfig(), seed=0)
        schedule = StaircaseSchedule(
            levels=(50, 100, 150, 200, 250, 300, 350, 400), hold_s=30.0
        )
        trace = run_staircase(plant.sensor, plant.actuator, plant.clock, schedule, 0.3)
        assert len(trace) == 800
        assert len(trace.meta["level_changes"]) == 8

    def test_single_level_count(self):
        plant = StoragePlant(PlantConfig(), seed=0)
        schedule = StaircaseSchedule(levels=(100,), hold_s=3.0)
        trace = run_staircase(plant.sensor, plant.actuator, plant.clock, schedule, 0.3)
        assert len(trace) == 10

    def test_actuator_fault_yields_partial_trace(self):
        plant = StoragePlant(PlantConfig(), seed=0)

        class FlakyActuator:
            def apply(self, bw):
                if bw > 150:
                    raise RuntimeError(f"rejected level {bw}")
                plant.apply(bw)

        schedule = StaircaseSchedule(levels=(100, 200, 300), hold_s=3.0)
        trace = run_staircase(plant.sensor, FlakyActuator(), plant.clock, schedule, 0.3)
        assert trace.meta["partial"]
        assert "rejected level" in trace.meta["error"]
        assert len(trace) == 10  # only the first level completed
        with pytest.raises(IdentificationError, match="partial"):
            identify_first_order(trace)

    def test_hold_shorter_than_ten_ticks_rejected(self):
        with pytest.raises(ValueError, match="10 samples"):
            StaircaseSchedule(levels=(100,), hold_s=2.0).validate_for(0.3)


class TestPipeline:
    def test_deterministic_given_seed(self):
        def one_run():
            plant = StoragePlant(PlantConfig(), seed=99)
            schedule = StaircaseSchedule(levels=(60, 140, 220, 300), hold_s=6.0)
            trace = run_staircase(
                plant.sensor, plant.actuator, plant.clock, schedule, 0.3
            )
            return trace, identify_first_order(trace)

        trace1, res1 = one_run()
        trace2, res2 = one_run()
        np.testing.assert_array_equal(trace1.q, trace2.q)
        assert res1.fit.model == res2.fit.model

    def test_plateau_means_match_static_map(self):
        from qreg.plant import static_map

        config = PlantConfig(noise_std=0.0, meas_std=0.0)
        plant = StoragePlant(config, seed=0, noise=False)
        schedule = StaircaseSchedule(levels=(120, 180, 240), hold_s=15.0)
        trace = run_staircase(plant.sensor, plant.actuator, plant.clock, schedule, 0.3)
        rows = plateau_means(trace)
        assert len(rows) == 3
        for row in rows:
            assert row["q_mean"] == pytest.approx(
                static_map(config, row["bw_mbit_s"]), rel=0.05
            )

    def test_filtered_artifact_uses_configured_window(self):
        trace = linear_staircase_trace(hold_ticks=40, noise_std=1.0, seed=5)
        result = identify_first_order(trace, SysidConfig(savgol_window=7, savgol_polyorder=2))
        assert result.filtered.meta["savgol"] == [7, 2]
        ref = scipy.signal.savgol_filter(trace.q, 7, 2, mode="mirror")
        np.testing.assert_allclose(result.filtered.q, np.maximum(ref, 0), atol=1e-10)

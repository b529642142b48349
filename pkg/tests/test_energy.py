import numpy as np
import pytest

from leantuner.energy import (
    FileProbe,
    FixedSource,
    PowerModel,
    PowerState,
    SimulatedBattery,
    ThrottleController,
    ThrottlePolicy,
    apply_throttle,
    estimate_power,
)
from leantuner.errors import InvalidConfig


def _controller(source, **policy_kwargs):
    return ThrottleController(ThrottlePolicy(**policy_kwargs), source)


class TestPowerState:
    def test_percent_clamped(self):
        assert PowerState(150.0, 0.0).percent == 100.0
        assert PowerState(-3.0, 0.0).percent == 0.0
        assert PowerState(None, 0.0).percent is None


class TestSources:
    def test_fixed(self):
        state = FixedSource(73.0).read()
        assert state.percent == 73.0 and not state.stale

    def test_file_probe_reads_integer(self, tmp_path):
        f = tmp_path / "capacity"
        f.write_text("87\n")
        state = FileProbe(f).read()
        assert state.percent == 87.0 and not state.stale

    def test_file_probe_stale_on_garbage(self, tmp_path):
        f = tmp_path / "capacity"
        f.write_text("42\n")
        probe = FileProbe(f)
        assert probe.read().percent == 42.0
        f.write_text("not a number")
        state = probe.read()
        assert state.stale and state.percent == 42.0  # last good reading

    def test_file_probe_stale_on_missing_file(self, tmp_path):
        state = FileProbe(tmp_path / "nope").read()
        assert state.stale and state.percent is None

    def test_simulated_battery_drain_math(self):
        bat = SimulatedBattery(100.0, drain_active_per_hour=20.0, drain_idle_per_hour=2.0)
        bat.advance(active_seconds=1800.0)  # half an hour of compute
        assert bat.percent == pytest.approx(90.0)
        bat.advance(0.0, idle_seconds=3600.0)
        assert bat.percent == pytest.approx(88.0)
        assert bat.read().percent == pytest.approx(88.0)

    def test_simulated_battery_floors_at_zero(self):
        bat = SimulatedBattery(1.0, drain_active_per_hour=3600.0)
        bat.advance(7200.0)
        assert bat.percent == 0.0


class TestSamplingCadence:
    @pytest.mark.parametrize("k,n,expected", [(1, 10, 10), (2, 10, 5), (3, 10, 3), (5, 7, 1)])
    def test_floor_n_over_k_samples(self, k, n, expected):
        ctl = _controller(FixedSource(100.0), check_every=k)
        for step in range(1, n + 1):
            ctl.check(step)
        assert ctl.samples_taken == expected

    def test_decision_only_refreshes_on_sampling_steps(self):
        bat = SimulatedBattery(100.0, 0.0)
        ctl = _controller(bat, check_every=5)
        ctl.record_step_time(1.0)
        bat.percent = 10.0  # plummets right away
        for step in range(1, 5):
            assert ctl.check(step) == 0.0  # not yet sampled
        assert ctl.check(5) > 0.0  # sampled and throttled


class TestThrottleDecision:
    def test_throttles_below_threshold(self):
        ctl = _controller(FixedSource(59.9), threshold_percent=60.0)
        ctl.record_step_time(2.0)
        assert ctl.check(1) > 0
        assert ctl.throttled

    def test_no_throttle_at_threshold(self):
        ctl = _controller(FixedSource(60.0), threshold_percent=60.0)
        ctl.record_step_time(2.0)
        assert ctl.check(1) == 0.0

    def test_delay_formula(self):
        # period scales by 1/(1-rho): delay = ema * rho / (1 - rho)
        ctl = _controller(FixedSource(10.0), reduction=0.5)
        ctl.record_step_time(2.0)
        assert ctl.check(1) == pytest.approx(2.0)  # doubles the period
        ctl2 = _controller(FixedSource(10.0), reduction=0.75)
        ctl2.record_step_time(2.0)
        assert ctl2.check(1) == pytest.approx(6.0)  # quadruples the period

    def test_zero_reduction_never_delays(self):
        ctl = _controller(FixedSource(10.0), reduction=0.0)
        ctl.record_step_time(2.0)
        assert ctl.check(1) == 0.0

    def test_no_delay_before_first_timing(self):
        ctl = _controller(FixedSource(10.0))
        assert ctl.check(1) == 0.0  # EMA not yet primed

    def test_hysteresis_band(self):
        bat = SimulatedBattery(59.0, 0.0)
        ctl = _controller(bat, threshold_percent=60.0, hysteresis_percent=2.0)
        ctl.record_step_time(1.0)
        assert ctl.check(1) > 0  # throttled at 59
        bat.percent = 61.0  # inside the band: stays throttled
        assert ctl.check(2) > 0
        bat.percent = 62.0  # at threshold + hysteresis: lifts
        assert ctl.check(3) == 0.0
        assert not ctl.throttled

    def test_stale_reading_keeps_decision(self, tmp_path):
        f = tmp_path / "capacity"
        f.write_text("50\n")
        probe = FileProbe(f)
        ctl = _controller(probe, threshold_percent=60.0)
        ctl.record_step_time(1.0)
        assert ctl.check(1) > 0  # throttled at 50
        f.unlink()  # probe goes stale
        assert ctl.check(2) > 0  # decision unchanged
        assert ctl.throttled

    def test_policy_validation(self):
        with pytest.raises(InvalidConfig):
            ThrottlePolicy(check_every=0).validate()
        with pytest.raises(InvalidConfig):
            ThrottlePolicy(reduction=1.0).validate()
        with pytest.raises(InvalidConfig):
            ThrottlePolicy(ema_alpha=0.0).validate()
        with pytest.raises(InvalidConfig):
            ThrottlePolicy(hysteresis_percent=-1.0).validate()


class TestEma:
    def test_first_sample_initializes(self):
        ctl = _controller(FixedSource(100.0))
        ctl.record_step_time(3.0)
        assert ctl.ema_step_seconds == pytest.approx(3.0)

    def test_ema_recurrence(self):
        ctl = _controller(FixedSource(100.0), ema_alpha=0.2)
        times = [1.0, 2.0, 0.5, 1.5, 1.0]
        ema = None
        for t in times:
            ctl.record_step_time(t)
            ema = t if ema is None else 0.2 * t + 0.8 * ema
        assert ctl.ema_step_seconds == pytest.approx(ema)

    def test_ema_converges_toward_constant_input(self):
        ctl = _controller(FixedSource(100.0), ema_alpha=0.2)
        ctl.record_step_time(10.0)
        for _ in range(60):
            ctl.record_step_time(1.0)
        assert abs(ctl.ema_step_seconds - 1.0) < 1e-4


class TestPowerAccounting:
    def test_two_level_energy(self):
        model = PowerModel(active_watts=5.0, idle_watts=1.0)
        assert estimate_power(2.0, 3.0, model) == pytest.approx(13.0)

    def test_sleep_only_costs_idle(self):
        model = PowerModel(active_watts=5.0, idle_watts=0.5)
        assert estimate_power(0.0, 4.0, model) == pytest.approx(2.0)

    def test_apply_throttle_noop_for_zero(self):
        import time

        t0 = time.perf_counter()
        apply_throttle(0.0)
        assert time.perf_counter() - t0 < 0.05

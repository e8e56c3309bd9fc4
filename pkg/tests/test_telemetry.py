import numpy as np
import pytest
from hypothesis import given, strategies as st

from parsfl.errors import ConfigurationError, MeasurementError, ProfileError
from parsfl.telemetry import (
    MBPS,
    Measurement,
    Monitor,
    SmoothingConfig,
    WorkerProfile,
    fleet_arrays,
    observe_round,
    smooth_estimate,
    synthesize_fleet,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def meas(bottom, links=None, uplink=1.0, worker=0, bw=1e6):
    return Measurement(worker, bw, np.array([1.0]), bottom, links or {1: 0.5}, uplink)


class TestSmoothEstimate:
    def test_hand_value(self):
        assert smooth_estimate(10.0, 20.0, 0.8) == pytest.approx(12.0)

    def test_boundaries(self):
        assert smooth_estimate(3.0, 7.0, 1.0) == 3.0
        assert smooth_estimate(3.0, 7.0, 0.0) == 7.0

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ConfigurationError):
            smooth_estimate(1.0, 2.0, alpha)
        with pytest.raises(ConfigurationError):
            SmoothingConfig(alpha)

    @given(finite, st.floats(0, 1))
    def test_fixed_point(self, x, alpha):
        assert smooth_estimate(x, x, alpha) == pytest.approx(x)

    @given(finite, finite, st.floats(0, 1))
    def test_bounded(self, prev, latest, alpha):
        out = smooth_estimate(prev, latest, alpha)
        tol = 1e-9 * max(1.0, abs(prev), abs(latest))
        assert min(prev, latest) - tol <= out <= max(prev, latest) + tol


class TestObserveRound:
    def test_bootstrap(self):
        p = observe_round(None, meas(2.0, {1: 0.3}, 4.0), 0.8, 0.5)
        assert (p.bottom_compute_time, p.top_compute_time, p.link_time[1], p.uplink_time_to_ps) == (2.0, 1.0, 0.3, 4.0)

    def test_smooths_every_time(self):
        p = observe_round(None, meas(10.0, {1: 10.0}, 10.0), 0.8, 0.5)
        p = observe_round(p, meas(20.0, {1: 20.0}, 20.0), 0.8, 0.5)
        assert p.bottom_compute_time == pytest.approx(12.0)
        assert p.link_time[1] == pytest.approx(12.0)
        assert p.uplink_time_to_ps == pytest.approx(12.0)
        assert p.top_compute_time == pytest.approx(6.0)

    def test_constant_converges_monotonically(self):
        p = observe_round(None, meas(1.0), 0.8, 1.0)
        prev = p.bottom_compute_time
        for _ in range(40):
            p = observe_round(p, meas(5.0), 0.8, 1.0)
            assert prev <= p.bottom_compute_time <= 5.0
            prev = p.bottom_compute_time
        assert prev == pytest.approx(5.0, abs=1e-3)

    def test_alternating_stays_in_range(self):
        # 20 scripted steps of alternating 1 s / 3 s measurements with alpha = 0.8
        p = observe_round(None, meas(1.0), 0.8, 1.0)
        for k in range(20):
            p = observe_round(p, meas(3.0 if k % 2 == 0 else 1.0), 0.8, 1.0)
            assert 1.0 <= p.bottom_compute_time <= 3.0

    @pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
    def test_rejects_non_positive(self, bad):
        with pytest.raises(MeasurementError):
            observe_round(None, meas(bad), 0.8, 1.0)
        with pytest.raises(MeasurementError):
            observe_round(None, meas(1.0, {1: bad}), 0.8, 1.0)

    def test_mismatched_worker(self):
        p = observe_round(None, meas(1.0), 0.8, 1.0)
        with pytest.raises(ProfileError):
            observe_round(p, meas(1.0, worker=3), 0.8, 1.0)

    @given(st.lists(st.tuples(st.floats(0.01, 10), st.floats(0.0, 5)), min_size=1, max_size=15))
    def test_order_preserved(self, rounds):
        a = b = None
        for base, extra in rounds:
            a = observe_round(a, meas(base + extra), 0.8, 1.0)
            b = observe_round(b, meas(base), 0.8, 1.0)
            assert a.bottom_compute_time >= b.bottom_compute_time - 1e-12


class TestProfiles:
    def test_missing_link(self):
        p = WorkerProfile(0, 1.0, np.array([1.0]), 1.0, 1.0, {1: 0.2}, 1.0)
        assert p.link_to(0) == 0.0
        with pytest.raises(ProfileError):
            p.link_to(5)

    def test_monitor_keeps_sorted_profiles(self):
        mon = Monitor(0.8, 0.1)
        mon.observe([meas(1.0, {0: 0.5}, worker=2), meas(1.0, {2: 0.5}, worker=0)])
        assert [p.worker_id for p in mon.profiles()] == [0, 2]

    def test_fleet_arrays_iteration_times(self):
        fleet = synthesize_fleet(5, 4.0, (1, 10), seed=0)
        prof = fleet.profiles(np.eye(5))
        fa = fleet_arrays(prof)
        t = fa.iteration_times()
        i, c = 1, 3
        assert t[i, c] == pytest.approx(prof[i].bottom_compute_time + prof[i].link_time[c] + prof[c].top_compute_time)


class TestFleet:
    @pytest.mark.parametrize("spread", [1.0, 3.0, 10.0, 25.0])
    def test_spread(self, spread):
        fleet = synthesize_fleet(40, spread, (1, 30), seed=1)
        ratio = fleet.bottom_time.max() / fleet.bottom_time.min()
        assert ratio == pytest.approx(spread, rel=0.05)

    def test_bandwidth_range(self):
        fleet = synthesize_fleet(200, 2.0, (1, 30), seed=2)
        assert fleet.bandwidth.min() >= 1 * MBPS and fleet.bandwidth.max() <= 30 * MBPS

    def test_links_symmetric(self):
        fleet = synthesize_fleet(8, 10.0, (1, 30), seed=3, jitter=0.1)
        _, link, _ = fleet.realize(np.random.default_rng(0))
        assert np.allclose(link, link.T, atol=1e-9)
        prof = [observe_round(None, m, 0.8, 0.1) for m in fleet.measurements(np.eye(8), *fleet.realize(np.random.default_rng(1)))]
        for p in prof:
            for q in prof:
                if p.worker_id != q.worker_id:
                    assert abs(p.link_to(q.worker_id) - q.link_to(p.worker_id)) < 1e-9

    def test_jitter_free_realisation_is_nominal(self):
        fleet = synthesize_fleet(6, 10.0, (1, 30), seed=4)
        bottom, link, uplink = fleet.realize(np.random.default_rng(0))
        assert np.array_equal(bottom, fleet.bottom_time)
        assert np.array_equal(uplink, fleet.uplink_times())

    def test_rejects_bad_inputs(self):
        with pytest.raises(ConfigurationError):
            synthesize_fleet(4, 0.5, (1, 30), seed=0)
        with pytest.raises(ConfigurationError):
            synthesize_fleet(4, 2.0, (5, 1), seed=0)

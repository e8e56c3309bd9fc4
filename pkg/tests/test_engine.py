import numpy as np
import pytest
from hypothesis import given, strategies as st

import parsfl.splitnet as sn
from parsfl.clustering import ClusterPlan, make_cluster
from parsfl.config import STRATEGIES
from parsfl.engine import (
    BatchSampler,
    Simulation,
    account_traffic,
    aggregate_bottoms,
    aggregation_weights,
    global_aggregate,
    mean_aggregate,
    round_timing,
    run_cluster_round,
    run_training,
    single_cluster_plan,
)
from parsfl.errors import ContractViolation, EmptyShardError, ShapeError
from parsfl.telemetry import synthesize_fleet
from small import tiny_config

vectors = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6)


def toy_profiles(n):
    return synthesize_fleet(n, 2.0, (1, 30), seed=0).profiles(np.eye(n))


def plan(specs, n_workers=None):
    """specs: list of (top, members, tau)."""
    n = n_workers or 1 + max(max(m) for _, m, _ in specs)
    prof = toy_profiles(max(n, 1 + max(t for t, _, _ in specs)))
    return ClusterPlan(tuple(make_cluster(t, m, prof, tau) for t, m, tau in specs))


class TestAggregateBottoms:
    def test_hand_values(self):
        assert np.array_equal(aggregate_bottoms([[1.0], [2.0], [3.0]]), [2.0])
        v = np.array([0.3, -2.0, 5.5])
        assert np.array_equal(aggregate_bottoms([v, -v]), np.zeros(3))

    def test_errors(self):
        with pytest.raises(ContractViolation):
            aggregate_bottoms([])
        with pytest.raises(ShapeError):
            aggregate_bottoms([np.zeros(2), np.zeros(3)])

    @given(vectors)
    def test_identical_inputs(self, v):
        assert np.allclose(aggregate_bottoms([v, v, v]), v, rtol=1e-12, atol=1e-12)


class TestGlobalAggregate:
    def test_hand_value(self):
        assert np.array_equal(global_aggregate([[1.0], [3.0]], [3, 2], [4, 6]), [2.0])

    def test_weights(self):
        assert np.allclose(aggregation_weights([3, 2], [4, 6]), [0.5, 0.5])
        assert np.allclose(aggregation_weights([1, 3], [2, 2]), [0.25, 0.75])

    def test_equal_weights_bitwise_mean(self):
        rng = np.random.default_rng(0)
        models = [rng.normal(size=50) for _ in range(7)]
        assert np.array_equal(global_aggregate(models, [4] * 7, [3] * 7), mean_aggregate(models))

    def test_errors(self):
        with pytest.raises(ContractViolation):
            global_aggregate([], [], [])
        with pytest.raises(ContractViolation):
            global_aggregate([[1.0]], [0], [2])
        with pytest.raises(ShapeError):
            global_aggregate([np.zeros(2), np.zeros(3)], [1, 1], [1, 1])

    @given(st.lists(st.tuples(st.floats(-100, 100), st.integers(1, 9), st.integers(1, 20)), min_size=1, max_size=8))
    def test_property_convex_combination(self, items):
        models = [[x] for x, _, _ in items]
        out = global_aggregate(models, [n for _, n, _ in items], [t for _, _, t in items])[0]
        lo, hi = min(x for x, _, _ in items), max(x for x, _, _ in items)
        assert lo - 1e-9 <= out <= hi + 1e-9


class TestTraffic:
    def test_formula(self):
        p = plan([(0, [1, 2], 3), (3, [4], 2)])
        # cluster 0: 3*2*2*10 + 2*2*100 + 2*1000; cluster 1: 2*1*2*10 + 1*2*100 + 2*1000
        assert account_traffic(p, 100, 10, 1000) == 120 + 400 + 2000 + 40 + 200 + 2000
        assert account_traffic(p, 100, 10, 1000, include_bottom_distribution=False) == 120 + 2000 + 40 + 2000

    def test_empty_plan(self):
        assert account_traffic(ClusterPlan(()), 1, 1, 1) == 0

    def test_linear_in_iterations(self):
        a = account_traffic(plan([(0, [1, 2], 2)]), 0, 7, 0)
        b = account_traffic(plan([(0, [1, 2], 4)]), 0, 7, 0)
        assert b == 2 * a


class TestRoundTiming:
    def test_round_lasts_as_long_as_slowest_cluster(self):
        p = plan([(0, [1], 2), (2, [3], 1)])
        bottom = np.array([1.0, 2.0, 1.0, 5.0])
        link = np.zeros((4, 4))
        uplink = np.array([0.5, 0.0, 1.0, 0.0])
        t = round_timing(p, bottom, link, uplink, top_ratio=0.5)
        # cluster 0: 2 * (2 + 0.5) + 0.5 = 5.5; cluster 1: 1 * (5 + 0.5) + 1 = 6.5
        assert t.cluster_times == pytest.approx([5.5, 6.5])
        assert t.sim_time == pytest.approx(6.5)
        assert t.inter_waiting == pytest.approx(0.5)
        assert t.intra_waiting == 0.0

    def test_intra_waiting(self):
        p = plan([(0, [1, 2], 3)])
        bottom = np.array([1.0, 1.0, 3.0])
        t = round_timing(p, bottom, np.zeros((3, 3)), np.zeros(3), top_ratio=0.0)
        # member 1 waits 2 s in each of 3 iterations, averaged over 2 members
        assert t.intra_waiting == pytest.approx(3.0)


def shard(seed, n=20, dim=4, classes=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dim)), rng.integers(0, classes, size=n)


class TestClusterRound:
    arch = sn.Architecture((4, 6, 5, 3), 2)

    def test_zero_tau_rejected(self):
        c = make_cluster(0, [1], toy_profiles(2))
        b, t = sn.split(self.arch, sn.init_params(self.arch, 0))
        with pytest.raises(ContractViolation):
            run_cluster_round(self.arch, c, {}, b, t, 0, 0.1, 4)

    def test_single_member_equals_sgd(self):
        X, y = shard(0)
        p = sn.init_params(self.arch, 1)
        b, t = sn.split(self.arch, p)
        c = make_cluster(0, [1], toy_profiles(2))
        bottoms, top, consumed = run_cluster_round(self.arch, c, {1: BatchSampler(X, y, np.random.default_rng(5))},
                                                   b, t, 4, 0.2, 6)
        ref_sampler = BatchSampler(X, y, np.random.default_rng(5))
        want = p
        for _ in range(4):
            Xb, yb = ref_sampler.next(6)
            want = sn.sgd_step(self.arch, want, Xb, yb, 0.2)
        assert np.allclose(sn.splice(self.arch, bottoms[0], top), want, atol=1e-12)
        assert consumed == 24

    def test_identical_members_identical_bottoms(self):
        X, y = shard(1)
        b, t = sn.split(self.arch, sn.init_params(self.arch, 2))
        c = make_cluster(0, [1, 2, 3], toy_profiles(4))
        samplers = {m: BatchSampler(X, y, np.random.default_rng(9)) for m in (1, 2, 3)}
        bottoms, _, _ = run_cluster_round(self.arch, c, samplers, b, t, 3, 0.1, 5)
        assert np.array_equal(bottoms[0], bottoms[1]) and np.array_equal(bottoms[1], bottoms[2])

    def test_zero_lr_leaves_model(self):
        X, y = shard(2)
        b, t = sn.split(self.arch, sn.init_params(self.arch, 3))
        c = make_cluster(0, [1, 2], toy_profiles(3))
        samplers = {m: BatchSampler(X, y, np.random.default_rng(m)) for m in (1, 2)}
        bottoms, top, _ = run_cluster_round(self.arch, c, samplers, b, t, 2, 0.0, 5)
        assert np.array_equal(aggregate_bottoms(bottoms), b) and np.array_equal(top, t)

    def test_one_iteration_is_averaged_sgd(self):
        # one iteration over N members equals one step along the mean of their full-model gradients
        p = sn.init_params(self.arch, 4)
        b, t = sn.split(self.arch, p)
        members = [1, 2, 3]
        shards = {m: shard(10 + m) for m in members}
        samplers = {m: BatchSampler(*shards[m], np.random.default_rng(m)) for m in members}
        refs = {m: BatchSampler(*shards[m], np.random.default_rng(m)) for m in members}
        c = make_cluster(0, members, toy_profiles(4))
        bottoms, top, _ = run_cluster_round(self.arch, c, samplers, b, t, 1, 0.3, 7)
        grads = [sn.loss_and_gradient(self.arch, p, *refs[m].next(7))[1] for m in members]
        want = p - 0.3 * np.mean(grads, axis=0)
        assert np.allclose(sn.splice(self.arch, aggregate_bottoms(bottoms), top), want, atol=1e-12)


class TestSampler:
    def test_covers_shard_each_pass(self):
        X = np.arange(10, dtype=float)[:, None]
        s = BatchSampler(X, np.arange(10), np.random.default_rng(0))
        seen = np.concatenate([s.next(5)[1] for _ in range(2)])
        assert sorted(seen) == list(range(10))

    def test_wraps(self):
        s = BatchSampler(np.zeros((3, 1)), np.arange(3), np.random.default_rng(0))
        assert len(s.next(8)[1]) == 8

    def test_empty(self):
        with pytest.raises(EmptyShardError):
            BatchSampler(np.zeros((0, 2)), np.zeros(0, dtype=int), np.random.default_rng(0))


class TestSingleCluster:
    def test_highest_bandwidth_top(self):
        prof = toy_profiles(6)
        p = single_cluster_plan(prof)
        best = max(prof, key=lambda q: q.ingress_bandwidth).worker_id
        assert p.clusters[0].top_worker == best and p.clusters[0].size == 5


class TestSimulation:
    def test_deterministic(self):
        a = run_training(tiny_config(seed=3))
        b = run_training(tiny_config(seed=3))
        assert np.array_equal(a.final.params, b.final.params)
        assert [m.csv_row() for m in a.metrics] == [m.csv_row() for m in b.metrics]

    def test_seed_changes_run(self):
        a = run_training(tiny_config(seed=3, rounds=1))
        b = run_training(tiny_config(seed=4, rounds=1))
        assert not np.array_equal(a.final.params, b.final.params)

    def test_threads_match_serial(self):
        a = run_training(tiny_config(seed=1))
        b = run_training(tiny_config(seed=1, max_workers=4))
        assert np.array_equal(a.final.params, b.final.params)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_every_strategy_runs(self, strategy):
        res = run_training(tiny_config(strategy=strategy, rounds=2))
        assert len(res.metrics) == 2
        for m, p in zip(res.metrics, res.plans):
            p.check_partition(range(10))
            assert m.sim_time > 0 and m.traffic_bytes > 0 and 0 <= m.test_accuracy <= 1
            assert m.inter_waiting >= 0 and m.intra_waiting >= 0
        if strategy == "single-cluster-sfl":
            assert all(len(p.clusters) == 1 for p in res.plans)

    def test_smallest_fleet(self):
        res = run_training(tiny_config(fleet__num_workers=2, rounds=2))
        assert all(len(p.clusters) == 1 and p.clusters[0].size == 1 for p in res.plans)

    def test_learns_on_iid_data(self):
        cfg = tiny_config(rounds=15, data__separation=3.0, data__stretch_rank=0, data__stretch_scale=0.0)
        acc = [m.test_accuracy for m in run_training(cfg).metrics]
        assert acc[-1] > 0.7 and acc[-1] > acc[0] + 0.3  # chance is 0.1

    def test_on_round_callback(self):
        seen = []
        run_training(tiny_config(rounds=2), on_round=lambda m, p: seen.append(m.round))
        assert seen == [0, 1]

    def test_step_advances_round(self):
        sim = Simulation(tiny_config())
        m0, _ = sim.step()
        m1, p1 = sim.step()
        assert (m0.round, m1.round, p1.round) == (0, 1, 1)

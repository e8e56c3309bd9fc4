"""Round loop: clustering, per-cluster split training, aggregation and accounting.

Every round the parameter server folds the workers' latest measurements into
their profiles, builds a cluster plan, assigns local-updating frequencies,
hands the global model to each cluster's top worker and lets the clusters
train. Each cluster's averaged bottom is spliced with its top, and the
cluster models are merged with weights proportional to ``N_c * tau_c``.

Time is simulated: a cluster needs ``tau_c * t_slowest + beta_c`` seconds
and the round lasts as long as its slowest cluster.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import splitnet as sn
from .clustering import (
    Cluster,
    ClusterPlan,
    UtilityWeights,
    build_plan,
    default_weights,
    iid_reference,
    make_cluster,
    random_plan,
    refine_plan,
)
from .config import ExperimentConfig
from .datagen import (
    PartitionedDataset,
    concentration_from_level,
    dirichlet_partition,
    make_synthetic_dataset,
    train_test_split,
)
from .errors import ContractViolation, EmptyShardError, PlanningError, ShapeError
from .frequency import assign_frequencies, uniform_frequencies
from .telemetry import MBPS, Fleet, Monitor, synthesize_fleet

# sub-stream ids for np.random.default_rng([seed, stream])
_DATA, _PARTITION, _FLEET, _INIT, _SAMPLING, _TIMING, _PLAN = range(7)


@dataclass
class RoundMetrics:
    round: int
    sim_time: float
    intra_waiting: float
    inter_waiting: float
    traffic_bytes: int
    test_accuracy: float
    per_cluster: list = field(default_factory=list)  # (cluster index, tau, t_c, N_c)

    CSV_COLUMNS = ("round", "sim_time", "intra_waiting", "inter_waiting", "traffic_bytes", "test_accuracy")

    def csv_row(self) -> list[str]:
        return [str(self.round), repr(float(self.sim_time)), repr(float(self.intra_waiting)),
                repr(float(self.inter_waiting)), str(int(self.traffic_bytes)), repr(float(self.test_accuracy))]


@dataclass
class GlobalModelState:
    params: np.ndarray
    round: int


@dataclass
class TrainingResult:
    metrics: list
    final: GlobalModelState
    plans: list
    arch: sn.Architecture
    partition: PartitionedDataset = field(repr=False)


class BatchSampler:
    """Reshuffled pass over one worker's shard; batches wrap around when short."""

    def __init__(self, features: np.ndarray, labels: np.ndarray, rng: np.random.Generator):
        if len(labels) == 0:
            raise EmptyShardError("a training worker has an empty shard")
        self.features = features
        self.labels = labels
        self.rng = rng
        self._order = rng.permutation(len(labels))
        self._pos = 0

    def next(self, batch_size: int):
        idx = np.empty(batch_size, dtype=np.int64)
        filled = 0
        while filled < batch_size:
            if self._pos == len(self._order):
                self._order = self.rng.permutation(len(self.labels))
                self._pos = 0
            take = min(batch_size - filled, len(self._order) - self._pos)
            idx[filled:filled + take] = self._order[self._pos:self._pos + take]
            self._pos += take
            filled += take
        return self.features[idx], self.labels[idx]


def run_cluster_round(arch: sn.Architecture, cluster: Cluster, samplers: dict, bottom: np.ndarray,
                      top: np.ndarray, tau: int, lr: float, batch_size: int):
    """``tau`` split iterations for one cluster.

    Returns ``(member_bottoms, top, consumed)``; ``member_bottoms`` follows the
    order of ``cluster.members`` and ``consumed`` counts training samples used.
    The top worker's own shard is never read.
    """
    if tau < 1:
        raise ContractViolation(f"tau must be >= 1, got {tau}")
    members = cluster.members
    bottoms = [np.array(bottom, dtype=np.float64) for _ in members]
    top = np.array(top, dtype=np.float64)
    consumed = 0
    for _ in range(tau):
        batches = [samplers[m].next(batch_size) for m in members]
        smashed = [sn.forward_bottom(arch, bw, X, y) for bw, (X, y) in zip(bottoms, batches)]
        top, act_grads = sn.top_step(arch, top, smashed, lr)
        bottoms = [sn.bottom_step(arch, bw, X, g, lr) for bw, (X, _), g in zip(bottoms, batches, act_grads)]
        consumed += sum(len(y) for _, y in batches)
    return bottoms, top, consumed


def aggregate_bottoms(member_bottoms) -> np.ndarray:
    """Unweighted mean of the members' bottom submodels."""
    if len(member_bottoms) == 0:
        raise ContractViolation("no bottom submodels to aggregate")
    first = np.asarray(member_bottoms[0], dtype=np.float64)
    acc = first.copy()
    for v in member_bottoms[1:]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != first.shape:
            raise ShapeError("bottom submodels differ in length")
        acc += v
    return acc / len(member_bottoms)


def aggregation_weights(sizes, taus) -> np.ndarray:
    k = _integer_weights(sizes, taus)
    return k / k.sum()


def _integer_weights(sizes, taus) -> np.ndarray:
    raw = [int(n) * int(t) for n, t in zip(sizes, taus)]
    if not raw:
        raise ContractViolation("no cluster models to aggregate")
    if any(r <= 0 for r in raw):
        raise ContractViolation("every N_c * tau_c must be positive")
    g = math.gcd(*raw)
    return np.array([r // g for r in raw], dtype=np.float64)


def global_aggregate(models, sizes, taus) -> np.ndarray:
    """Merge cluster models with weights ``N_c * tau_c / sum(N_c * tau_c)``.

    Integer weights are reduced by their gcd and accumulated in cluster order,
    so equal weights give exactly ``sum(models) / C``.
    """
    k = _integer_weights(sizes, taus)
    if len(models) != len(k):
        raise ContractViolation("models, sizes and taus differ in length")
    acc = np.zeros_like(np.asarray(models[0], dtype=np.float64))
    for kc, w in zip(k, models):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != acc.shape:
            raise ShapeError("cluster models differ in length")
        acc += kc * w
    return acc / k.sum()


def mean_aggregate(models) -> np.ndarray:
    """Plain average of cluster models, accumulated in cluster order."""
    if len(models) == 0:
        raise ContractViolation("no cluster models to aggregate")
    acc = np.zeros_like(np.asarray(models[0], dtype=np.float64))
    for w in models:
        acc += np.asarray(w, dtype=np.float64)
    return acc / len(models)


def account_traffic(plan: ClusterPlan, bottom_bytes: int, smashed_bytes: int, full_bytes: int,
                    include_bottom_distribution: bool = True) -> int:
    """Bytes moved in one round.

    Per cluster: activations up and gradients down every iteration for every
    member, the bottom submodel out to and back from each member, and the full
    model between the top worker and the parameter server in both directions.
    """
    if min(bottom_bytes, smashed_bytes, full_bytes) < 0:
        raise ContractViolation("byte sizes must be >= 0")
    total = 0
    for c in plan.clusters:
        total += c.tau * c.size * 2 * smashed_bytes
        if include_bottom_distribution:
            total += c.size * 2 * bottom_bytes
        total += 2 * full_bytes
    return int(total)


@dataclass
class RoundTiming:
    sim_time: float
    intra_waiting: float
    inter_waiting: float
    cluster_times: list


def round_timing(plan: ClusterPlan, bottom: np.ndarray, link: np.ndarray, uplink: np.ndarray,
                 top_ratio: float) -> RoundTiming:
    """Realised times for a round given the workers' actual per-iteration costs.

    ``intra_waiting`` is the idle time per member summed over the round's
    iterations and averaged over members; ``inter_waiting`` is the mean over
    clusters of the gap to the slowest cluster.
    """
    times, idle, members = [], 0.0, 0
    for c in plan.clusters:
        top = c.top_worker
        t = np.array([bottom[m] + link[m, top] + top_ratio * bottom[top] for m in c.members])
        t_slow = float(t.max())
        times.append(c.tau * t_slow + float(uplink[top]))
        idle += c.tau * float(np.sum(t_slow - t))
        members += c.size
    t_round = max(times)
    inter = sum(t_round - t for t in times) / len(times)
    return RoundTiming(t_round, idle / members, inter, times)


def single_cluster_plan(profiles, round_: int = 0) -> ClusterPlan:
    """All workers in one cluster behind the highest-bandwidth worker (classic SFL)."""
    profiles = list(profiles)
    top = min(profiles, key=lambda p: (-p.ingress_bandwidth, p.worker_id)).worker_id
    members = [p.worker_id for p in profiles if p.worker_id != top]
    return ClusterPlan((make_cluster(top, members, profiles),), round_)


class Simulation:
    """All state for one training run; ``step()`` advances one round."""

    def __init__(self, config: ExperimentConfig):
        self.cfg = config.validate()
        cfg = self.cfg
        seed = cfg.seed
        rng = lambda stream: np.random.default_rng([seed, stream])  # noqa: E731

        d = cfg.data
        data_seed = int(rng(_DATA).integers(2**31))
        full = make_synthetic_dataset(d.num_classes, d.samples_per_class + d.test_per_class, d.feature_dim,
                                      data_seed, separation=d.separation, stretch_rank=d.stretch_rank,
                                      stretch_scale=d.stretch_scale)
        train, self.test = train_test_split(full, d.test_per_class)
        conc = d.concentration if d.concentration is not None else concentration_from_level(d.noniid_level)
        self.partition = dirichlet_partition(train, cfg.fleet.num_workers, conc,
                                             int(rng(_PARTITION).integers(2**31)))
        self.label_dists = self.partition.label_distributions()

        self.arch = sn.Architecture(cfg.layer_dims, cfg.model.split_layer, cfg.model.activation)
        self.top_ratio = cfg.model.top_ratio or self.arch.top_to_bottom_cost_ratio()
        self.smashed_bytes = cfg.model.batch_size * self.arch.smashed_width * sn.SMASHED_BYTES_PER_VALUE
        self.bottom_bytes = self.arch.bottom_size * sn.SMASHED_BYTES_PER_VALUE
        self.full_bytes = self.arch.total_size * sn.SMASHED_BYTES_PER_VALUE

        f = cfg.fleet
        self.fleet: Fleet = synthesize_fleet(
            f.num_workers, f.compute_spread, tuple(f.bandwidth_mbps), int(rng(_FLEET).integers(2**31)),
            base_time=f.base_time, top_ratio=self.top_ratio, smashed_bytes=self.smashed_bytes,
            model_bytes=self.full_bytes, jitter=f.jitter,
        )
        self.monitor = Monitor(cfg.clustering.alpha, self.top_ratio)
        self.timing_rng = rng(_TIMING)
        self.plan_rng = rng(_PLAN)
        sampling = np.random.SeedSequence([seed, _SAMPLING]).spawn(f.num_workers)
        self.samplers = {
            w: BatchSampler(self.partition.shard_features(w), self.partition.shard_labels(w),
                            np.random.default_rng(sampling[w]))
            for w in range(f.num_workers)
            if len(self.partition.shards[w]) > 0
        }
        self.params = sn.init_params(self.arch, int(rng(_INIT).integers(2**31)))
        self.round = 0
        # probe before the first round so the monitor has something to work with
        self._last_realized = self.fleet.realize(self.timing_rng)

    # -- planning --------------------------------------------------------------

    def weights(self, profiles) -> UtilityWeights:
        c = self.cfg.clustering
        auto = default_weights(profiles, c.lam, c.per_worker_bandwidth_mbps * MBPS)
        return UtilityWeights(c.lam, auto.per_worker_bandwidth, c.waiting_norm or auto.waiting_norm,
                              c.kl_norm or auto.kl_norm)

    def make_plan(self, profiles) -> ClusterPlan:
        cfg = self.cfg
        h = self.round
        if cfg.strategy == "single-cluster-sfl":
            return uniform_frequencies(single_cluster_plan(profiles, h), cfg.fixed_tau)
        w = self.weights(profiles)
        if cfg.strategy == "random-cluster":
            plan = random_plan(profiles, w, self.plan_rng, round_=h)
            return assign_frequencies(plan, profiles, cfg.frequency.tau_max)
        plan = build_plan(profiles, w, cfg.clustering.k, seed=cfg.seed + h, round_=h)
        plan = refine_plan(plan, profiles, w, iid_reference(profiles), cfg.clustering.refine_budget)
        if cfg.strategy == "fixed-frequency":
            return uniform_frequencies(plan, cfg.fixed_tau)
        return assign_frequencies(plan, profiles, cfg.frequency.tau_max)

    # -- one round -------------------------------------------------------------

    def step(self) -> tuple[RoundMetrics, ClusterPlan]:
        cfg = self.cfg
        self.monitor.observe(self.fleet.measurements(self.label_dists, *self._last_realized))
        profiles = self.monitor.profiles()
        plan = self.make_plan(profiles)
        if not plan.clusters:
            raise PlanningError(f"round {self.round}: no feasible cluster can be formed")

        lr = cfg.model.lr * cfg.model.lr_decay ** self.round
        bottom, top = sn.split(self.arch, self.params)

        def train(c: Cluster):
            bottoms, new_top, _ = run_cluster_round(self.arch, c, self.samplers, bottom, top, c.tau, lr,
                                                    cfg.model.batch_size)
            return sn.splice(self.arch, aggregate_bottoms(bottoms), new_top)

        if cfg.max_workers > 1 and len(plan.clusters) > 1:
            with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
                models = list(pool.map(train, plan.clusters))
        else:
            models = [train(c) for c in plan.clusters]
        self.params = global_aggregate(models, [c.size for c in plan.clusters], [c.tau for c in plan.clusters])

        realized = self.fleet.realize(self.timing_rng)
        timing = round_timing(plan, *realized, self.top_ratio)
        self._last_realized = realized

        traffic = account_traffic(plan, self.bottom_bytes, self.smashed_bytes, self.full_bytes,
                                  cfg.output.count_bottom_distribution)
        acc = sn.accuracy(self.arch, self.params, self.test.features, self.test.labels)
        metrics = RoundMetrics(
            round=self.round,
            sim_time=timing.sim_time,
            intra_waiting=timing.intra_waiting,
            inter_waiting=timing.inter_waiting,
            traffic_bytes=traffic,
            test_accuracy=acc,
            per_cluster=[(k, c.tau, t, c.size) for k, (c, t) in enumerate(zip(plan.clusters, timing.cluster_times))],
        )
        self.round += 1
        return metrics, plan


def run_training(config: ExperimentConfig, on_round=None) -> TrainingResult:
    """Run ``config.rounds`` rounds; ``on_round(metrics, plan)`` is called after each."""
    sim = Simulation(config)
    metrics, plans = [], []
    for _ in range(sim.cfg.rounds):
        m, plan = sim.step()
        metrics.append(m)
        plans.append(plan)
        if on_round is not None:
            on_round(m, plan)
    return TrainingResult(metrics, GlobalModelState(sim.params.copy(), sim.round), plans, sim.arch, sim.partition)

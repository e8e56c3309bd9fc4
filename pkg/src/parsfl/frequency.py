"""Per-cluster local-updating frequencies that align round completion times."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .clustering import ClusterPlan, Cluster, _by_id, slowest_iteration_time
from .errors import ConfigurationError, ContractViolation

DEFAULT_TAU_MAX = 20


@dataclass(frozen=True)
class FrequencyConfig:
    tau_max: int = DEFAULT_TAU_MAX

    def __post_init__(self):
        if int(self.tau_max) < 1:
            raise ConfigurationError(f"tau_max must be >= 1, got {self.tau_max}")


def uplink_time(cluster: Cluster, profiles) -> float:
    return _by_id(profiles)[cluster.top_worker].uplink_time_to_ps


def cluster_round_time(cluster: Cluster, profiles, tau: int | None = None) -> float:
    """``tau * t_slowest + beta_c``; ``tau`` defaults to the cluster's own."""
    tau = cluster.tau if tau is None else tau
    if tau < 1:
        raise ContractViolation(f"tau must be >= 1, got {tau}")
    return tau * slowest_iteration_time(cluster, profiles) + uplink_time(cluster, profiles)


def largest_aligned_tau(t_slowest: float, beta: float, reference: float, tau_max: int) -> int:
    """Largest ``tau`` in ``[1, tau_max]`` with ``floor((tau*t + beta) / reference) == 1``.

    Returns 1 when even a single iteration overshoots twice the reference.
    """
    for tau in range(tau_max, 0, -1):
        if math.floor((tau * t_slowest + beta) / reference) == 1:
            return tau
    return 1


def reference_cluster(plan: ClusterPlan, profiles, tau_max: int) -> int:
    times = [cluster_round_time(c, profiles, tau_max) for c in plan.clusters]
    return min(range(len(times)), key=lambda k: (times[k], k))


def assign_frequencies(plan: ClusterPlan, profiles, tau_max: int = DEFAULT_TAU_MAX) -> ClusterPlan:
    """The fastest cluster (at ``tau_max``) keeps ``tau_max``; the rest are sized to finish
    within the same round-time bracket ``[T_ref, 2*T_ref)``."""
    FrequencyConfig(tau_max)
    if not plan.clusters:
        raise ContractViolation("cannot assign frequencies to an empty plan")
    by_id = _by_id(profiles)
    l = reference_cluster(plan, by_id, tau_max)
    T_ref = cluster_round_time(plan.clusters[l], by_id, tau_max)
    taus = []
    for k, c in enumerate(plan.clusters):
        if k == l:
            taus.append(tau_max)
        else:
            taus.append(largest_aligned_tau(slowest_iteration_time(c, by_id), uplink_time(c, by_id), T_ref, tau_max))
    return plan.with_taus(taus)


def uniform_frequencies(plan: ClusterPlan, tau: int) -> ClusterPlan:
    if tau < 1:
        raise ConfigurationError(f"tau must be >= 1, got {tau}")
    return plan.with_taus([tau] * len(plan.clusters))


def inter_cluster_waiting(plan: ClusterPlan, profiles) -> float:
    """Mean over clusters of (slowest round time - own round time)."""
    if not plan.clusters:
        return 0.0
    by_id = _by_id(profiles)
    times = [cluster_round_time(c, by_id) for c in plan.clusters]
    t_max = max(times)
    return sum(t_max - t for t in times) / len(times)

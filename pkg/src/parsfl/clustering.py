"""Worker clustering: k-means label grouping, greedy construction, exchange refinement.

A cluster has one top worker (hosts the top submodel, contributes no data) and
one or more member workers (train bottom submodels). A cluster is feasible
when

* ``N_c * b <= B_top`` (the top worker's ingress bandwidth carries every member), and
* ``N_c * mu_p(top) <= max_i(mu_b(i) + beta(i, top))`` (the top worker keeps up
  with the slowest member).

The clustering objective is the sum over clusters of
``lam * W_c / waiting_norm + (1 - lam) * KL(Phi_c || Phi_0) / kl_norm``.
Ties are always broken toward the lowest worker id (or cluster index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ContractViolation, PlanningError, ShapeError
from .telemetry import FleetArrays, WorkerProfile, fleet_arrays

KL_EPS = 1e-9
_IMPROVE_TOL = 1e-12


@dataclass(frozen=True)
class Cluster:
    top_worker: int
    members: tuple
    label_mix: np.ndarray = field(repr=False, compare=False)
    tau: int = 1

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(int(m) for m in self.members))
        if not self.members:
            raise ContractViolation("a cluster needs at least one member")
        if self.top_worker in self.members:
            raise ContractViolation(f"top worker {self.top_worker} listed as its own member")
        if int(self.tau) < 1:
            raise ContractViolation(f"tau must be >= 1, got {self.tau}")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def workers(self) -> tuple:
        return (self.top_worker,) + self.members


@dataclass(frozen=True)
class ClusterPlan:
    clusters: tuple
    round: int = 0
    idle: tuple = ()  # workers with no feasible placement; they sit the round out

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "idle", tuple(sorted(int(w) for w in self.idle)))

    def worker_ids(self) -> list[int]:
        return sorted([w for c in self.clusters for w in c.workers] + list(self.idle))

    def check_partition(self, worker_ids) -> None:
        seen = [w for c in self.clusters for w in c.workers] + list(self.idle)
        if len(seen) != len(set(seen)):
            raise ContractViolation("a worker appears in more than one role")
        if sorted(seen) != sorted(worker_ids):
            raise ContractViolation("plan does not cover exactly the given workers")

    def with_taus(self, taus) -> "ClusterPlan":
        return replace(self, clusters=tuple(replace(c, tau=int(t)) for c, t in zip(self.clusters, taus)))


@dataclass(frozen=True)
class UtilityWeights:
    lam: float = 0.5
    per_worker_bandwidth: float = 500_000.0  # bytes/s
    waiting_norm: float = 1.0
    kl_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.per_worker_bandwidth <= 0 or self.waiting_norm <= 0 or self.kl_norm <= 0:
            raise ConfigurationError("bandwidth per worker and both norms must be > 0")


@dataclass(frozen=True)
class Feasibility:
    ok: bool
    violations: tuple  # subset of ("bandwidth", "top_compute")

    def __bool__(self) -> bool:
        return self.ok


# -- elementary quantities -----------------------------------------------------


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    """``sum_j p_j log(p_j / q_j)`` on additively smoothed inputs (natural log)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ShapeError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    ps, qs = _kernels.smooth(p, eps), _kernels.smooth(q, eps)
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def iid_reference(profiles) -> np.ndarray:
    dists = np.stack([np.asarray(p.label_dist, dtype=float) for p in profiles])
    return dists.mean(axis=0)


def _by_id(profiles) -> dict:
    if isinstance(profiles, dict):
        return profiles
    return {p.worker_id: p for p in profiles}


def iteration_time(member: WorkerProfile, top: WorkerProfile) -> float:
    return member.bottom_compute_time + member.link_to(top.worker_id) + top.top_compute_time


def _member_times(cluster: Cluster, profiles) -> np.ndarray:
    by_id = _by_id(profiles)
    top = by_id[cluster.top_worker]
    return np.array([iteration_time(by_id[m], top) for m in cluster.members])


def slowest_iteration_time(cluster: Cluster, profiles) -> float:
    return float(_member_times(cluster, profiles).max())


def intra_cluster_waiting(cluster: Cluster, profiles) -> float:
    t = _member_times(cluster, profiles)
    return float(t.max() - t.mean())


def label_mix(members, profiles) -> np.ndarray:
    by_id = _by_id(profiles)
    return np.mean([np.asarray(by_id[m].label_dist, dtype=float) for m in members], axis=0)


def make_cluster(top: int, members, profiles, tau: int = 1) -> Cluster:
    members = tuple(sorted(int(m) for m in members))
    return Cluster(int(top), members, label_mix(members, profiles), tau)


def feasible(cluster: Cluster, profiles, weights: UtilityWeights) -> Feasibility:
    by_id = _by_id(profiles)
    top = by_id[cluster.top_worker]
    n = cluster.size
    bad = []
    if n * weights.per_worker_bandwidth > top.ingress_bandwidth:
        bad.append("bandwidth")
    reach = max(by_id[m].bottom_compute_time + by_id[m].link_to(top.worker_id) for m in cluster.members)
    if n * top.top_compute_time > reach:
        bad.append("top_compute")
    return Feasibility(not bad, tuple(bad))


def cluster_utility(cluster: Cluster, profiles, weights: UtilityWeights, phi0) -> float:
    W = intra_cluster_waiting(cluster, profiles)
    kl = kl_divergence(label_mix(cluster.members, profiles), phi0)
    return weights.lam * W / weights.waiting_norm + (1.0 - weights.lam) * kl / weights.kl_norm


def plan_utility(plan: ClusterPlan, profiles, weights: UtilityWeights, phi0) -> float:
    return float(sum(cluster_utility(c, profiles, weights, phi0) for c in plan.clusters))


def default_weights(profiles, lam: float = 0.5, per_worker_bandwidth: float = 500_000.0) -> UtilityWeights:
    """Normalise waiting by the fleet's iteration-time spread and KL by ``ln M``."""
    fa = fleet_arrays(profiles)
    n = fa.size
    if n > 1:
        t = fa.iteration_times()[~np.eye(n, dtype=bool)]
        spread = float(t.max() - t.min())
    else:
        spread = 0.0
    M = fa.label_dists.shape[1]
    return UtilityWeights(lam, per_worker_bandwidth, spread if spread > 0 else 1.0, math.log(M) if M > 1 else 1.0)


# -- k-means on label distributions ---------------------------------------------


def default_k(num_workers: int) -> int:
    return max(1, round(num_workers / 5))


def kmeans_label_groups(profiles, K: int | None = None, seed: int = 0, max_iter: int = 100) -> list[list[int]]:
    """Group workers by label distribution (symmetrised KL, mean centroids).

    Groups come back as sorted worker-id lists, ordered by their smallest id.
    """
    profiles = list(profiles)
    N = len(profiles)
    ids = [p.worker_id for p in profiles]
    if K is None:
        K = default_k(N)
    if not 1 <= K <= N:
        raise ConfigurationError(f"K must be in [1, {N}], got {K}")
    if K == 1:
        return [sorted(ids)]
    if K == N:
        return [[w] for w in sorted(ids)]

    X = np.stack([np.asarray(p.label_dist, dtype=float) for p in profiles])
    rng = np.random.default_rng(seed)
    # k-means++ seeding
    centers = [int(rng.integers(N))]
    for _ in range(1, K):
        d = _kernels.sym_kl(X, X[centers], KL_EPS).min(axis=1)
        d[centers] = 0.0
        total = d.sum()
        if total <= 0:
            pool = [i for i in range(N) if i not in centers]
            centers.append(int(pool[rng.integers(len(pool))]))
        else:
            centers.append(int(rng.choice(N, p=d / total)))
    C = X[centers].copy()

    assign = np.full(N, -1)
    for _ in range(max_iter):
        D = _kernels.sym_kl(X, C, KL_EPS)
        new = np.argmin(D, axis=1)
        new = _fill_empty(new, D, K)
        if np.array_equal(new, assign):
            break
        assign = new
        C = np.stack([X[assign == k].mean(axis=0) for k in range(K)])

    groups = [sorted(ids[i] for i in np.flatnonzero(assign == k)) for k in range(K)]
    return sorted(groups, key=lambda g: g[0])


def _fill_empty(assign: np.ndarray, D: np.ndarray, K: int) -> np.ndarray:
    assign = assign.copy()
    for k in range(K):
        if np.any(assign == k):
            continue
        counts = np.bincount(assign, minlength=K)
        movable = np.flatnonzero(counts[assign] > 1)
        cost = D[movable, assign[movable]]
        i = movable[np.argmax(cost)]
        assign[i] = k
    return assign


# -- greedy construction ---------------------------------------------------------


class _Planner:
    """Array-backed helpers shared by the greedy builder and the random baseline."""

    def __init__(self, profiles, weights: UtilityWeights, phi0=None):
        self.profiles = list(profiles)
        self.fa: FleetArrays = fleet_arrays(self.profiles)
        self.w = weights
        self.ids = self.fa.ids
        self.pos = {int(w): i for i, w in enumerate(self.ids)}
        self.V = self.fa.label_dists
        self.phi0 = self.V.mean(axis=0) if phi0 is None else np.asarray(phi0, dtype=float)
        self.T = self.fa.iteration_times()
        self.R = self.fa.reach_times()

    def feasible(self, top: int, members) -> bool:
        n = len(members)
        if n == 0:
            return False
        if n * self.w.per_worker_bandwidth > self.fa.bandwidth[top]:
            return False
        return n * self.fa.top_time[top] <= self.R[list(members), top].max()

    def kl(self, members) -> float:
        return kl_divergence(self.V[list(members)].mean(axis=0), self.phi0)

    def utility(self, top: int, members) -> float:
        t = self.T[list(members), top]
        W = t.max() - t.mean()
        return self.w.lam * W / self.w.waiting_norm + (1.0 - self.w.lam) * self.kl(members) / self.w.kl_norm

    def can_host_any(self, top: int, pool) -> bool:
        return any(self.feasible(top, [j]) for j in pool if j != top)

    def place_leftover(self, w: int, groups: list, choose_cluster=None) -> bool:
        """Place ``w`` into an existing cluster, or pair it with a spare worker.

        ``groups`` is a list of ``[top, members]`` (positions) mutated in place.
        Returns False when no feasible placement exists.
        """
        options = []
        for ci, (top, members) in enumerate(groups):
            cand = members + [w]
            if self.feasible(top, cand):
                options.append((self.utility(top, cand) - self.utility(top, members), ci))
        if options:
            ci = choose_cluster(options) if choose_cluster else min(options)[1]
            groups[ci][1].append(w)
            return True
        # Pull a member out to serve as top of a one-member cluster: the donor
        # cluster must stay non-empty and feasible; prefer the most spare bandwidth.
        best = None
        for ci, (top, members) in enumerate(groups):
            if len(members) < 2:
                continue
            for m in members:
                rest = [x for x in members if x != m]
                if not self.feasible(top, rest) or not self.feasible(m, [w]):
                    continue
                key = (-self.fa.bandwidth[m], int(self.ids[m]))
                if best is None or key < best[0]:
                    best = (key, ci, m)
        if best is not None:
            _, ci, m = best
            groups[ci][1].remove(m)
            groups.append([m, [w]])
            return True
        # Reverse roles: w hosts a single member taken from a cluster that can spare one.
        for ci, (top, members) in enumerate(groups):
            if len(members) < 2:
                continue
            for m in members:
                rest = [x for x in members if x != m]
                if not self.feasible(top, rest) or not self.feasible(w, [m]):
                    continue
                key = (self.utility(w, [m]), int(self.ids[m]))
                if best is None or key < best[0]:
                    best = (key, ci, m)
        if best is None:
            return False
        _, ci, m = best
        groups[ci][1].remove(m)
        groups.append([w, [m]])
        return True

    def place_all(self, leftovers, groups: list, choose_cluster=None) -> list[int]:
        """Place every leftover; returns the positions that fit nowhere."""
        idle = [w for w in leftovers if not self.place_leftover(w, groups, choose_cluster)]
        if groups or len(idle) < 2:
            return idle
        # nothing formed at all: try any feasible pair among the stranded workers
        for top in idle:
            for m in idle:
                if m != top and self.feasible(top, [m]):
                    groups.append([top, [m]])
                    return self.place_all([x for x in idle if x not in (top, m)], groups, choose_cluster)
        return idle

    def to_plan(self, groups, round_: int = 0, idle=()) -> ClusterPlan:
        clusters = [
            make_cluster(int(self.ids[top]), [int(self.ids[m]) for m in members], self.profiles)
            for top, members in groups
        ]
        return ClusterPlan(tuple(clusters), round_, tuple(int(self.ids[w]) for w in idle))


def build_plan(profiles, weights: UtilityWeights, K: int | None = None, seed: int = 0, round_: int = 0) -> ClusterPlan:
    """Greedy clustering: label-grouped candidates, max-bandwidth tops, KL-driven filling."""
    profiles = list(profiles)
    if len(profiles) < 2:
        raise ContractViolation("clustering needs at least two workers")
    P = _Planner(profiles, weights)
    id_groups = kmeans_label_groups(profiles, K, seed)
    groups = [[P.pos[w] for w in g] for g in id_groups]
    remaining = set(range(len(profiles)))
    cannot_host: set[int] = set()
    out: list[list] = []

    def by_id(i):
        return int(P.ids[i])

    while remaining:
        live = [g for g in groups if any(i in remaining for i in g)]
        hosts = [i for i in remaining if i not in cannot_host]
        if len(remaining) < 2 or not hosts:
            break
        # largest group that still has a host candidate; tie -> earlier group
        sized = [(sum(i in remaining for i in g), -gi, g) for gi, g in enumerate(live)
                 if any(i in hosts for i in g)]
        _, _, g = max(sized, key=lambda s: (s[0], s[1]))
        top = min((i for i in g if i in hosts), key=lambda i: (-P.fa.bandwidth[i], by_id(i)))
        remaining.discard(top)

        def head(group):
            pool = [i for i in group if i in remaining]
            if not pool:
                return None
            return min(pool, key=lambda i: (-P.T[i, top], by_id(i)))

        members: list[int] = []
        cand = {gi: head(gr) for gi, gr in enumerate(groups)}
        cur_kl = math.inf
        while True:
            scored = []
            for gi, j in cand.items():
                if j is None:
                    continue
                trial = members + [j]
                if P.feasible(top, trial):
                    scored.append((P.kl(trial), by_id(j), gi, j))
            if not members and not scored:
                # no group head fits; any remaining worker may open the cluster
                scored = [(P.kl([j]), by_id(j), -1, j) for j in remaining if P.feasible(top, [j])]
            if not scored:
                break
            kl, _, gi, j = min(scored)
            if members and kl > cur_kl + _IMPROVE_TOL:
                break
            members.append(j)
            remaining.discard(j)
            cur_kl = kl
            for gk, gr in enumerate(groups):
                if j in gr:
                    cand[gk] = head(gr)
        if members:
            out.append([top, members])
        else:
            remaining.add(top)
            cannot_host.add(top)

    idle = P.place_all(sorted(remaining, key=by_id), out)
    return P.to_plan(out, round_, idle)


def random_plan(profiles, weights: UtilityWeights, rng: np.random.Generator, sizes=None,
                round_: int = 0, max_attempts: int = 1000) -> ClusterPlan:
    """Random feasible clustering.

    With ``sizes`` (member counts per cluster) the plan reproduces those sizes;
    otherwise random tops are filled with random members until the next one
    would break a constraint.
    """
    profiles = list(profiles)
    if len(profiles) < 2:
        raise ContractViolation("clustering needs at least two workers")
    P = _Planner(profiles, weights)
    N = len(profiles)
    b = weights.per_worker_bandwidth

    if sizes is not None:
        sizes = sorted((int(s) for s in sizes), reverse=True)
        if sum(sizes) + len(sizes) != N:
            raise ContractViolation("cluster sizes do not account for every worker")
        for _ in range(max_attempts):
            pool = list(rng.permutation(N))
            groups = []
            for n in sizes:
                hosts = [i for i in pool if n * b <= P.fa.bandwidth[i]]
                if not hosts:
                    break
                top = hosts[int(rng.integers(len(hosts)))]
                pool.remove(top)
                picks = rng.choice(len(pool), size=n, replace=False)
                members = [pool[k] for k in sorted(picks)]
                if not P.feasible(top, members):
                    break
                for m in members:
                    pool.remove(m)
                groups.append([top, members])
            else:
                return P.to_plan(groups, round_)
        raise PlanningError(f"no random feasible plan with sizes {sizes} after {max_attempts} attempts")

    pool = [int(i) for i in rng.permutation(N)]
    groups: list[list] = []
    while len(pool) >= 2:
        hosts = [i for i in pool if P.can_host_any(i, pool)]
        if not hosts:
            break
        top = hosts[int(rng.integers(len(hosts)))]
        pool.remove(top)
        members: list[int] = []
        for j in list(pool):
            if P.feasible(top, members + [j]):
                members.append(j)
                pool.remove(j)
            elif members:
                break
        groups.append([top, members])
    idle = P.place_all(pool, groups, choose_cluster=lambda opts: opts[int(rng.integers(len(opts)))][1])
    return P.to_plan(groups, round_, idle)


# -- exchange refinement -----------------------------------------------------------


def refine_plan(plan: ClusterPlan, profiles, weights: UtilityWeights, phi0=None, budget: int = 10_000) -> ClusterPlan:
    """Best-improvement local search over member moves and pairwise swaps.

    Top workers stay fixed. A change is applied only if it strictly lowers the
    summed utility and keeps every cluster feasible. When no single change
    helps, pairs of changes are tried (a non-improving first change followed by
    the best second one), cheapest first change first. The search stops when
    neither level improves or once ``budget`` candidate changes have been
    evaluated.
    """
    profiles = list(profiles)
    if budget <= 0 or len(plan.clusters) < 2:
        return plan
    P = _Planner(profiles, weights, phi0)
    tops = np.array([P.pos[c.top_worker] for c in plan.clusters], dtype=np.int64)
    member_of = np.full(len(profiles), -1, dtype=np.int64)
    for ci, c in enumerate(plan.clusters):
        for m in c.members:
            member_of[P.pos[m]] = ci
    q_s = _kernels.smooth(P.phi0, KL_EPS)
    N, C = len(profiles), len(tops)
    iu = np.triu_indices(N, 1)

    def table(assign):
        cur_u = np.array([P.utility(tops[ci], np.flatnonzero(assign == ci)) for ci in range(C)])
        moves, swaps = _kernels.exchange_table(
            P.V, q_s, P.T, P.R, P.fa.top_time, P.fa.bandwidth, tops, assign,
            weights.per_worker_bandwidth, weights.lam, weights.waiting_norm, weights.kl_norm, KL_EPS, cur_u,
        )
        return np.concatenate([moves.ravel(), swaps[iu]])

    def apply(assign, k):
        out = assign.copy()
        if k < N * C:
            i, c = divmod(int(k), C)
            out[i] = c
        else:
            s = int(k) - N * C
            i, j = int(iu[0][s]), int(iu[1][s])
            out[i], out[j] = assign[j], assign[i]
        return out

    def scan(assign, remaining):
        """(best candidate, its delta, all deltas, candidates evaluated)."""
        t = table(assign)
        valid = np.flatnonzero(~np.isnan(t))[:remaining]
        if len(valid) == 0:
            return None, np.inf, t, 0
        k = valid[np.argmin(t[valid])]
        return int(k), float(t[k]), t, len(valid)

    changed = False
    evaluated = 0
    while evaluated < budget:
        k, delta, t, used = scan(member_of, budget - evaluated)
        evaluated += used
        if k is None:
            break
        if delta < -_IMPROVE_TOL:
            member_of = apply(member_of, k)
            changed = True
            continue
        # stalled: look two changes deep
        finite = np.flatnonzero(np.isfinite(t))
        improved = False
        for k1 in finite[np.argsort(t[finite], kind="stable")]:
            if evaluated >= budget:
                break
            trial = apply(member_of, k1)
            k2, delta2, _, used = scan(trial, budget - evaluated)
            evaluated += used
            if k2 is not None and t[k1] + delta2 < -_IMPROVE_TOL:
                member_of = apply(trial, k2)
                changed = improved = True
                break
        if not improved:
            break
    if not changed:
        return plan
    groups = [[int(tops[ci]), list(np.flatnonzero(member_of == ci))] for ci in range(C)]
    refined = P.to_plan(groups, plan.round, [P.pos[w] for w in plan.idle])
    return refined.with_taus([c.tau for c in plan.clusters])


# -- serialisation --------------------------------------------------------------------


def plan_to_dict(plan: ClusterPlan) -> dict:
    return {
        "round": plan.round,
        "idle": list(plan.idle),
        "clusters": [
            {"top": c.top_worker, "members": list(c.members), "tau": int(c.tau),
             "label_mix": [float(x) for x in c.label_mix]}
            for c in plan.clusters
        ],
    }


def plan_from_dict(doc: dict) -> ClusterPlan:
    clusters = [
        Cluster(int(c["top"]), tuple(c["members"]), np.asarray(c["label_mix"], dtype=float), int(c["tau"]))
        for c in doc["clusters"]
    ]
    return ClusterPlan(tuple(clusters), int(doc["round"]), tuple(doc.get("idle", ())))

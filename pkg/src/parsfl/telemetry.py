"""Worker state monitoring: smoothed compute/link estimates and fleet synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, MeasurementError, ProfileError

DEFAULT_ALPHA = 0.8
MBPS = 1e6 / 8.0  # bytes per second in one megabit per second


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: int
    ingress_bandwidth: float  # bytes/s
    label_dist: np.ndarray
    bottom_compute_time: float  # s/iteration
    top_compute_time: float  # s/iteration
    link_time: dict = field(default_factory=dict)  # peer id -> s/iteration
    uplink_time_to_ps: float = 0.0  # s

    def link_to(self, other: int) -> float:
        if other == self.worker_id:
            return 0.0
        try:
            return self.link_time[other]
        except KeyError:
            raise ProfileError(f"worker {self.worker_id} has no link estimate to {other}") from None


@dataclass(frozen=True)
class SmoothingConfig:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class Measurement:
    """What a worker reports at the start of a round."""

    worker_id: int
    ingress_bandwidth: float
    label_dist: np.ndarray
    bottom_time: float
    link_times: dict
    uplink_time: float


def smooth_estimate(previous: float, latest: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * previous + (1.0 - alpha) * latest


def _positive(name: str, value: float) -> float:
    if not (math.isfinite(value) and value > 0):
        raise MeasurementError(f"{name} must be positive and finite, got {value}")
    return float(value)


def observe_round(profile: WorkerProfile | None, m: Measurement, alpha: float, top_ratio: float) -> WorkerProfile:
    """Fold one round's measurement into a profile.

    ``profile=None`` bootstraps: the estimates start at the measurement. The
    top-submodel time is always ``top_ratio`` times the bottom estimate.
    """
    bottom = _positive("bottom time", m.bottom_time)
    uplink = _positive("uplink time", m.uplink_time)
    bandwidth = _positive("bandwidth", m.ingress_bandwidth)
    links = {int(j): _positive(f"link time to {j}", t) for j, t in m.link_times.items()}

    if profile is None:
        return WorkerProfile(m.worker_id, bandwidth, np.asarray(m.label_dist, dtype=float), bottom,
                             top_ratio * bottom, links, uplink)
    if profile.worker_id != m.worker_id:
        raise ProfileError(f"measurement for {m.worker_id} applied to profile {profile.worker_id}")

    bottom = smooth_estimate(profile.bottom_compute_time, bottom, alpha)
    new_links = dict(profile.link_time)
    for j, t in links.items():
        new_links[j] = smooth_estimate(profile.link_time[j], t, alpha) if j in profile.link_time else t
    return replace(
        profile,
        ingress_bandwidth=bandwidth,
        label_dist=np.asarray(m.label_dist, dtype=float),
        bottom_compute_time=bottom,
        top_compute_time=top_ratio * bottom,
        link_time=new_links,
        uplink_time_to_ps=smooth_estimate(profile.uplink_time_to_ps, uplink, alpha),
    )


class Monitor:
    """Per-worker profile store kept by the parameter server."""

    def __init__(self, alpha: float = DEFAULT_ALPHA, top_ratio: float = 1.0):
        SmoothingConfig(alpha)
        self.alpha = alpha
        self.top_ratio = top_ratio
        self._profiles: dict[int, WorkerProfile] = {}

    def observe(self, measurements) -> None:
        for m in measurements:
            self._profiles[m.worker_id] = observe_round(self._profiles.get(m.worker_id), m,
                                                        self.alpha, self.top_ratio)

    def profiles(self) -> list[WorkerProfile]:
        return [self._profiles[k] for k in sorted(self._profiles)]


@dataclass(frozen=True)
class FleetArrays:
    """Dense view of a profile list, indexed by position."""

    ids: np.ndarray
    bandwidth: np.ndarray
    label_dists: np.ndarray
    bottom_time: np.ndarray
    top_time: np.ndarray
    link: np.ndarray  # link[i, j], zero on the diagonal
    uplink: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)

    def position(self, worker_id: int) -> int:
        pos = np.flatnonzero(self.ids == worker_id)
        if pos.size == 0:
            raise ProfileError(f"unknown worker {worker_id}")
        return int(pos[0])

    def iteration_times(self) -> np.ndarray:
        """``t[i, c] = mu_b[i] + beta[i, c] + mu_p[c]`` for member ``i`` under top ``c``."""
        return self.bottom_time[:, None] + self.link + self.top_time[None, :]

    def reach_times(self) -> np.ndarray:
        return self.bottom_time[:, None] + self.link


def fleet_arrays(profiles) -> FleetArrays:
    profiles = list(profiles)
    ids = np.array([p.worker_id for p in profiles], dtype=np.int64)
    n = len(profiles)
    link = np.zeros((n, n))
    for a, p in enumerate(profiles):
        for c, q in enumerate(profiles):
            if a != c:
                link[a, c] = p.link_to(q.worker_id)
    return FleetArrays(
        ids=ids,
        bandwidth=np.array([p.ingress_bandwidth for p in profiles], dtype=float),
        label_dists=np.stack([np.asarray(p.label_dist, dtype=float) for p in profiles]),
        bottom_time=np.array([p.bottom_compute_time for p in profiles], dtype=float),
        top_time=np.array([p.top_compute_time for p in profiles], dtype=float),
        link=link,
        uplink=np.array([p.uplink_time_to_ps for p in profiles], dtype=float),
    )


@dataclass(frozen=True)
class Fleet:
    """Ground-truth capabilities of a simulated worker fleet."""

    bandwidth: np.ndarray  # bytes/s
    bottom_time: np.ndarray  # nominal s/iteration
    top_ratio: float
    smashed_bytes: int  # one direction, one iteration
    model_bytes: int  # full model, one direction
    jitter: float = 0.0  # log-normal sigma of per-round fluctuation

    @property
    def size(self) -> int:
        return len(self.bandwidth)

    def link_matrix(self) -> np.ndarray:
        """Activations up plus gradients down over the narrower of the two links."""
        bw = np.minimum(self.bandwidth[:, None], self.bandwidth[None, :])
        link = 2.0 * self.smashed_bytes / bw
        np.fill_diagonal(link, 0.0)
        return link

    def uplink_times(self) -> np.ndarray:
        return self.model_bytes / self.bandwidth

    def realize(self, rng: np.random.Generator):
        """Draw one round's actual (bottom, link, uplink) times."""
        n = self.size
        if self.jitter == 0:
            return self.bottom_time.copy(), self.link_matrix(), self.uplink_times()
        bottom = self.bottom_time * np.exp(self.jitter * rng.standard_normal(n))
        noise = np.exp(self.jitter * rng.standard_normal((n, n)))
        noise = np.triu(noise, 1)
        noise = noise + noise.T
        link = self.link_matrix() * noise
        uplink = self.uplink_times() * np.exp(self.jitter * rng.standard_normal(n))
        return bottom, link, uplink

    def measurements(self, label_dists: np.ndarray, bottom, link, uplink) -> list[Measurement]:
        out = []
        for i in range(self.size):
            links = {j: float(link[i, j]) for j in range(self.size) if j != i}
            out.append(Measurement(i, float(self.bandwidth[i]), label_dists[i], float(bottom[i]),
                                   links, float(uplink[i])))
        return out

    def profiles(self, label_dists: np.ndarray) -> list[WorkerProfile]:
        """Noise-free profiles (estimates equal to the nominal capabilities)."""
        ms = self.measurements(label_dists, self.bottom_time, self.link_matrix(), self.uplink_times())
        return [observe_round(None, m, DEFAULT_ALPHA, self.top_ratio) for m in ms]


def synthesize_fleet(
    num_workers: int,
    spread: float,
    bandwidth_range: tuple[float, float],
    seed: int,
    *,
    base_time: float = 0.05,
    top_ratio: float = 0.1,
    smashed_bytes: int = 32 * 1024,
    model_bytes: int = 256 * 1024,
    jitter: float = 0.0,
) -> Fleet:
    """Heterogeneous fleet with bottom times log-uniform over ``[base, base*spread]``.

    The draws are stretched in log space so the fastest worker sits at
    ``base_time`` and the slowest at ``base_time * spread`` exactly.
    ``bandwidth_range`` is in Mb/s; bandwidths are uniform over it.
    """
    if num_workers < 1:
        raise ConfigurationError(f"num_workers must be >= 1, got {num_workers}")
    if spread < 1:
        raise ConfigurationError(f"spread must be >= 1, got {spread}")
    lo, hi = bandwidth_range
    if not 0 < lo <= hi:
        raise ConfigurationError(f"bad bandwidth range {bandwidth_range}")
    if base_time <= 0 or top_ratio <= 0 or jitter < 0:
        raise ConfigurationError("base_time and top_ratio must be > 0, jitter >= 0")

    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 1.0, num_workers)
    if num_workers > 1 and np.ptp(u) > 0:
        u = (u - u.min()) / np.ptp(u)
    bottom = base_time * spread ** u
    bandwidth = rng.uniform(lo, hi, num_workers) * MBPS
    return Fleet(bandwidth, bottom, float(top_ratio), int(smashed_bytes), int(model_bytes), float(jitter))

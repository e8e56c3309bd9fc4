"""Synthetic classification data and Dirichlet non-IID partitioning.

The partition draws one class-mixture vector per worker from ``Dir(delta * q)``
(``q`` is the dataset's class prior), then fits a worker-by-class count matrix
whose class totals equal the dataset's class counts and whose worker totals are
as equal as possible. Fitting is done with iterative proportional scaling, which
keeps each worker's row as close (in KL) to its drawn mixture as the marginals
allow; the fitted matrix is rounded per class with the largest-remainder rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmptyShardError


class _IIDSentinel:
    """Marker for the infinite-concentration (identical distributions) case."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "IID"

    def __reduce__(self):
        return (_IIDSentinel, ())


IID = _IIDSentinel()

# Dirichlet draws with tiny concentration can underflow to exact zeros.
_MIX_FLOOR = 1e-12


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, feature_dim) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def prior(self) -> np.ndarray:
        counts = self.class_counts()
        return counts / counts.sum()

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionedDataset:
    dataset: Dataset
    shards: list  # list of int64 index arrays into ``dataset``
    num_classes: int
    prior: np.ndarray = field(repr=False)

    @property
    def num_workers(self) -> int:
        return len(self.shards)

    def shard_features(self, worker: int) -> np.ndarray:
        return self.dataset.features[self.shards[worker]]

    def shard_labels(self, worker: int) -> np.ndarray:
        return self.dataset.labels[self.shards[worker]]

    def label_distribution(self, worker: int) -> np.ndarray:
        return label_distribution_of(self.shard_labels(worker), self.num_classes)

    def label_distributions(self) -> np.ndarray:
        return np.stack([self.label_distribution(i) for i in range(self.num_workers)])

    def histograms(self) -> np.ndarray:
        return np.stack(
            [np.bincount(self.shard_labels(i), minlength=self.num_classes) for i in range(self.num_workers)]
        )


def make_synthetic_dataset(
    num_classes: int,
    samples_per_class: int,
    feature_dim: int,
    seed: int,
    separation: float = 1.0,
    stretch_rank: int = 0,
    stretch_scale: float = 0.0,
) -> Dataset:
    """Gaussian blobs, one per class, with unit within-class noise.

    Class centres are drawn from ``N(0, separation**2 * I)``. With
    ``stretch_rank > 0`` every class also gets its own random
    ``stretch_rank``-dimensional subspace along which its spread is widened by
    ``stretch_scale``, so class covariances differ and the best decision
    boundary is quadratic rather than linear.

    Samples are emitted class-major (all of class 0, then class 1, ...), so
    sample ``k`` of class ``c`` has index ``c * samples_per_class + k``.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    if samples_per_class < 1:
        raise ConfigurationError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if feature_dim < 2:
        raise ConfigurationError(f"feature_dim must be >= 2, got {feature_dim}")
    if not separation > 0:
        raise ConfigurationError(f"separation must be > 0, got {separation}")
    if not 0 <= stretch_rank <= feature_dim:
        raise ConfigurationError(f"stretch_rank must be in [0, {feature_dim}], got {stretch_rank}")
    if stretch_scale < 0:
        raise ConfigurationError(f"stretch_scale must be >= 0, got {stretch_scale}")

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(num_classes, feature_dim))
    noise = rng.normal(0.0, 1.0, size=(num_classes, samples_per_class, feature_dim))
    samples = centers[:, None, :] + noise
    if stretch_rank > 0 and stretch_scale > 0:
        for c in range(num_classes):
            basis, _ = np.linalg.qr(rng.normal(size=(feature_dim, stretch_rank)))
            latent = rng.normal(size=(samples_per_class, stretch_rank))
            samples[c] += stretch_scale * latent @ basis.T
    features = samples.reshape(-1, feature_dim)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    return Dataset(features, labels, num_classes)


def train_test_split(dataset: Dataset, test_per_class: int) -> tuple[Dataset, Dataset]:
    """Hold out the last ``test_per_class`` samples of every class."""
    counts = dataset.class_counts()
    if test_per_class < 1 or np.any(counts <= test_per_class):
        raise ConfigurationError(
            f"test_per_class={test_per_class} must leave >= 1 training sample in every class"
        )
    test_mask = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        test_mask[idx[-test_per_class:]] = True
    return dataset.subset(np.flatnonzero(~test_mask)), dataset.subset(np.flatnonzero(test_mask))


def largest_remainder(weights: np.ndarray, total: int, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``.

    Floors first, then hands out the remaining units by descending fractional
    part. Equal fractions go to the smaller ``tiebreak`` value, then the lower
    index.
    """
    weights = np.asarray(weights, dtype=float)
    if total == 0:
        return np.zeros(len(weights), dtype=np.int64)
    s = weights.sum()
    if s <= 0:
        weights = np.ones(len(weights))
        s = float(len(weights))
    quota = weights * (total / s)
    base = np.floor(quota).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        frac = quota - base
        tb = np.zeros(len(weights)) if tiebreak is None else np.asarray(tiebreak, dtype=float)
        order = np.lexsort((np.arange(len(weights)), tb, -frac))
        base[order[:short]] += 1
    return base


def _fit_counts(mix: np.ndarray, row_totals: np.ndarray, col_totals: np.ndarray,
                max_iter: int = 5000, tol: float = 1e-9) -> np.ndarray:
    """Scale ``mix`` so rows sum to ``row_totals`` and columns to ``col_totals``."""
    P = np.maximum(mix, _MIX_FLOOR) * row_totals[:, None]
    for _ in range(max_iter):
        P *= (col_totals / P.sum(axis=0))[None, :]
        rows = P.sum(axis=1)
        if np.max(np.abs(rows - row_totals)) <= tol * max(1.0, row_totals.max()):
            break
        P *= (row_totals / rows)[:, None]
    return P


def dirichlet_partition(dataset: Dataset, num_workers: int, concentration, seed: int) -> PartitionedDataset:
    """Split ``dataset`` across workers with mixtures ``v_i ~ Dir(concentration * prior)``.

    ``concentration`` is a positive float or :data:`IID`.
    """
    n = len(dataset)
    if num_workers < 1:
        raise ConfigurationError(f"num_workers must be >= 1, got {num_workers}")
    if num_workers > n:
        raise ConfigurationError(f"{num_workers} workers but only {n} samples")
    if concentration is not IID:
        concentration = float(concentration)
        if not (concentration > 0 and np.isfinite(concentration)):
            raise ConfigurationError(f"concentration must be > 0 or IID, got {concentration}")

    rng = np.random.default_rng(seed)
    M = dataset.num_classes
    counts = dataset.class_counts()
    prior = counts / n

    if concentration is IID:
        mix = np.tile(prior, (num_workers, 1))
    else:
        # Classes absent from the dataset have zero concentration; skip them.
        present = prior > 0
        mix = np.zeros((num_workers, M))
        mix[:, present] = rng.dirichlet(concentration * prior[present], size=num_workers)

    row_totals = largest_remainder(np.ones(num_workers), n).astype(float)
    fitted = _fit_counts(mix, row_totals, counts.astype(float))

    alloc = np.zeros((num_workers, M), dtype=np.int64)
    for c in range(M):
        # Workers furthest below their running target win rounding ties.
        ahead = alloc.sum(axis=1) - fitted[:, :c].sum(axis=1)
        alloc[:, c] = largest_remainder(fitted[:, c], int(counts[c]), tiebreak=ahead)
    _repair_empty(alloc, fitted)

    shards_parts: list[list[np.ndarray]] = [[] for _ in range(num_workers)]
    for c in range(M):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        bounds = np.concatenate([[0], np.cumsum(alloc[:, c])])
        for w in range(num_workers):
            shards_parts[w].append(idx[bounds[w]:bounds[w + 1]])
    shards = [np.sort(np.concatenate(p)).astype(np.int64) for p in shards_parts]
    return PartitionedDataset(dataset, shards, M, prior)


def _repair_empty(alloc: np.ndarray, fitted: np.ndarray) -> None:
    # Rounding can starve a worker when shards hold only a few samples.
    sizes = alloc.sum(axis=1)
    while np.any(sizes == 0):
        w = int(np.flatnonzero(sizes == 0)[0])
        donor = int(np.argmax(sizes))
        classes = np.flatnonzero(alloc[donor] > 0)
        c = int(classes[np.argmax(fitted[w, classes])])
        alloc[donor, c] -= 1
        alloc[w, c] += 1
        sizes = alloc.sum(axis=1)


def label_distribution_of(labels, num_classes: int) -> np.ndarray:
    """Normalised label histogram of a shard."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyShardError("cannot compute the label distribution of an empty shard")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigurationError(f"labels must lie in [0, {num_classes})")
    hist = np.bincount(labels, minlength=num_classes).astype(float)
    return hist / hist.sum()


def concentration_from_level(p: float):
    """Map a non-IID level ``p = 1/delta`` to a concentration (``p == 0`` is IID)."""
    if p < 0:
        raise ConfigurationError(f"non-IID level must be >= 0, got {p}")
    return IID if p == 0 else 1.0 / p

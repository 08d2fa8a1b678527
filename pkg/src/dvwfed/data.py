"""Datasets, IID partitioning across learners, validation splits and ingestion."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dvwfed.errors import IngestionError, InputError


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            raise InputError("labels must be integers")
        y = y.astype(np.int64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise InputError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> LabeledDataset:
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.features[index], self.labels[index], self.num_classes)

    def with_labels(self, labels: np.ndarray) -> LabeledDataset:
        return LabeledDataset(self.features, labels, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def same_as(self, other: LabeledDataset) -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @staticmethod
    def empty(dim: int, num_classes: int) -> LabeledDataset:
        return LabeledDataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)

    @staticmethod
    def concat(parts: Sequence[LabeledDataset]) -> LabeledDataset:
        if not parts:
            raise InputError("nothing to concatenate")
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].num_classes,
        )


@dataclass(frozen=True, eq=False)
class LearnerShard:
    learner_id: int
    train: LabeledDataset
    validation: LabeledDataset

    def __len__(self) -> int:
        return len(self.train) + len(self.validation)

    def merged(self) -> LearnerShard:
        """Fold the validation set back into training (the FedAvg view)."""
        if len(self.validation) == 0:
            return self
        full = LabeledDataset.concat([self.train, self.validation])
        return LearnerShard(self.learner_id, full, LabeledDataset.empty(full.dim, full.num_classes))

    def same_as(self, other: LearnerShard) -> bool:
        return (
            self.learner_id == other.learner_id
            and self.train.same_as(other.train)
            and self.validation.same_as(other.validation)
        )


@dataclass(frozen=True)
class PartitionPlan:
    counts: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not self.counts or any(c < 1 for c in self.counts):
            raise InputError(f"partition counts must be positive, got {self.counts}")


# Per-learner example counts of the skewed CIFAR-10 environment.
CIFAR_POWERLAW_COUNTS = (16964, 11314, 7537, 5023, 3348, 2232, 1488, 992, 661, 441)


def largest_remainder(shares: Sequence[float], total: int) -> np.ndarray:
    """Round non-negative ``shares`` to integers summing to ``total``.

    Leftover units go to the largest fractional parts; ties resolve to the
    lower index.
    """
    shares = np.asarray(shares, dtype=np.float64)
    quotas = shares / shares.sum() * total
    counts = np.floor(quotas).astype(np.int64)
    leftover = int(total - counts.sum())
    order = np.lexsort((np.arange(len(quotas)), -(quotas - counts)))
    counts[order[:leftover]] += 1
    return counts


def _stratified_order(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Row order that interleaves classes in proportion to their frequency.

    Each class is shuffled, its j-th member gets the key (j + 0.5) / n_c, and
    rows are sorted by key (class breaks ties). Any contiguous run of this
    order is then close to stratified.
    """
    keys = np.empty(labels.shape[0])
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        keys[members] = (np.arange(members.size) + 0.5) / members.size
    return np.lexsort((labels, keys))


def _split_by_counts(
    data: LabeledDataset, counts: Sequence[int], seed: int
) -> list[LabeledDataset]:
    order = _stratified_order(data.labels, data.num_classes, np.random.default_rng(seed))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [data.subset(np.sort(order[bounds[k] : bounds[k + 1]])) for k in range(len(counts))]


def partition_uniform(data: LabeledDataset, n_learners: int, seed: int) -> list[LabeledDataset]:
    """Equal-sized IID shards; the ``n % N`` leftover rows go to the lowest ids."""
    n = len(data)
    if n_learners < 1:
        raise InputError("need at least one learner")
    if n < n_learners:
        raise InputError(f"{n} examples cannot give {n_learners} learners one example each")
    # Dealing a class-grouped order round-robin gives every learner
    # floor or ceil of n_c / N per class and the leftover rows to the lowest ids.
    rng = np.random.default_rng(seed)
    order = np.concatenate(
        [rng.permutation(np.flatnonzero(data.labels == c)) for c in range(data.num_classes)]
    )
    return [data.subset(np.sort(order[k::n_learners])) for k in range(n_learners)]


def powerlaw_counts(total: int, n_learners: int, decay: float) -> PartitionPlan:
    """Geometric shard sizes ``decay**k`` scaled to ``total`` examples."""
    if not 0.0 < decay < 1.0:
        raise InputError(f"decay must lie in (0, 1), got {decay}")
    counts = largest_remainder(decay ** np.arange(n_learners, dtype=np.float64), total)
    if np.any(counts == 0):
        raise InputError(
            f"decay {decay} leaves a learner with no examples out of {total}"
        )
    return PartitionPlan(tuple(int(c) for c in counts))


def partition_powerlaw(
    data: LabeledDataset,
    n_learners: int,
    decay: float = 2.0 / 3.0,
    seed: int = 0,
    plan: PartitionPlan | None = None,
) -> list[LabeledDataset]:
    """Skewed IID shards, either from a geometric decay or an explicit plan."""
    if plan is None:
        plan = powerlaw_counts(len(data), n_learners, decay)
    elif len(plan.counts) != n_learners:
        raise InputError(f"plan has {len(plan.counts)} counts for {n_learners} learners")
    if sum(plan.counts) > len(data):
        raise InputError(f"plan needs {sum(plan.counts)} examples, dataset has {len(data)}")
    return _split_by_counts(data, plan.counts, seed)


def stratified_split(
    shard: LabeledDataset, validation_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Hold out ``round(fraction * m_c)`` examples of every class for validation.

    Classes with at least two members always give one example to each side.
    A singleton class stays in training and a warning is emitted.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise InputError(f"validation fraction must lie in (0, 1), got {validation_fraction}")
    rng = np.random.default_rng(seed)
    held: list[np.ndarray] = []
    for c in range(shard.num_classes):
        members = np.flatnonzero(shard.labels == c)
        m = members.size
        if m == 0:
            continue
        if m == 1:
            warnings.warn(f"class {c} has a single example; it stays in training", stacklevel=2)
            continue
        k = min(max(math.floor(validation_fraction * m + 0.5), 1), m - 1)
        held.append(members[rng.permutation(m)[:k]])
    val_mask = np.zeros(len(shard), dtype=bool)
    if held:
        val_mask[np.concatenate(held)] = True
    return shard.subset(np.flatnonzero(~val_mask)), shard.subset(np.flatnonzero(val_mask))


def class_centroids(d: int, num_classes: int, class_separation: float, seed: int) -> np.ndarray:
    """Centroids at pairwise distance ``class_separation`` when ``C <= d``.

    With more classes than dimensions the centroids are random directions on
    a sphere of the same radius, so distances are only approximately equal.
    """
    rng = np.random.default_rng(seed)
    radius = class_separation / np.sqrt(2.0)
    if num_classes <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, num_classes)))
        return radius * q.T
    v = rng.standard_normal((num_classes, d))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(
    n: int, d: int, num_classes: int, class_separation: float, seed: int
) -> LabeledDataset:
    """Balanced isotropic Gaussian blobs (unit variance), rows in random order."""
    if n < num_classes:
        raise InputError(f"need at least one example per class, got n={n}, C={num_classes}")
    if d < 2:
        raise InputError(f"need d >= 2, got {d}")
    centroids = class_centroids(d, num_classes, class_separation, seed)
    rng = np.random.default_rng([seed, 1])
    labels = rng.permutation(np.arange(n) % num_classes)
    features = centroids[labels] + rng.standard_normal((n, d))
    return LabeledDataset(features, labels, num_classes)


def load_csv(path: str | Path, label_column: str, num_classes: int) -> LabeledDataset:
    """Read a headered, comma-separated UTF-8 file; every other column is a feature."""
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise IngestionError(f"{path}: empty file")
        if label_column not in header:
            raise IngestionError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
        features, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            try:
                label = int(row[label_idx])
                feats = [float(v) for i, v in enumerate(row) if i != label_idx]
            except ValueError as exc:
                raise IngestionError(f"{path}: row {row_no}: {exc}") from exc
            if not 0 <= label < num_classes:
                raise IngestionError(
                    f"{path}: row {row_no}: label {label} outside [0, {num_classes})"
                )
            features.append(feats)
            labels.append(label)
    if not labels:
        raise IngestionError(f"{path}: no data rows")
    return LabeledDataset(np.array(features), np.array(labels, dtype=np.int64), num_classes)

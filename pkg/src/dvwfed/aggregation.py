"""Contribution weights and weighted model averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dvwfed.errors import DegenerateWeightsError, InputError
from dvwfed.nn import ModelParams


@dataclass(frozen=True, eq=False)
class WeightVector:
    raw: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_raw(cls, raw: Sequence[float]) -> WeightVector:
        r = np.array(raw, dtype=np.float64)
        total = r.sum()
        return cls(r, r / total)

    def __len__(self) -> int:
        return self.raw.size


def fedavg_weights(train_sizes: Sequence[int]) -> WeightVector:
    """Weight each learner by its training-set size."""
    sizes = list(train_sizes)
    if not sizes:
        raise InputError("no learners to weight")
    if any(int(s) < 1 for s in sizes):
        raise InputError(f"every training set must be nonempty, got sizes {sizes}")
    return WeightVector.from_raw(sizes)


def performance_weights(scores: Sequence[float]) -> WeightVector:
    """Use validation scores directly as contribution values."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise InputError("no learners to weight")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise InputError(f"scores must be finite and non-negative, got {s.tolist()}")
    if not np.any(s > 0):
        raise DegenerateWeightsError("every learner scored 0; cannot normalize weights")
    return WeightVector.from_raw(s)


def weighted_average(models: Sequence[ModelParams], weights: WeightVector) -> ModelParams:
    """Convex combination of ``models`` summed in list order.

    Computed as ``m_0 + sum_k w_k (m_k - m_0)`` so that identical inputs come
    back bit-for-bit.
    """
    if not models:
        raise InputError("no models to average")
    if len(models) != len(weights):
        raise InputError(f"{len(models)} models but {len(weights)} weights")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise InputError(f"architecture mismatch: {m.arch} vs {arch}")
    anchor = models[0].values
    out = anchor.copy()
    for w, m in zip(weights.normalized, models):
        out += w * (m.values - anchor)
    return ModelParams(out, arch)

"""Static label-poisoning attacks applied to corrupted learners before round 0.

Attacks only rewrite labels. Both the training and validation sets of a
corrupted learner are poisoned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dvwfed.data import LearnerShard
from dvwfed.errors import InputError

ATTACK_KINDS = ("none", "uniform_shuffle", "targeted_flip")


@dataclass(frozen=True)
class AttackPlan:
    kind: str = "none"
    corrupted_learner_ids: frozenset[int] = field(default_factory=frozenset)
    source_class: int = 0
    target_class: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "corrupted_learner_ids", frozenset(int(i) for i in self.corrupted_learner_ids))
        if self.kind not in ATTACK_KINDS:
            raise InputError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.kind == "targeted_flip" and self.source_class == self.target_class:
            raise InputError("source and target class must differ")

    def validate(self, n_learners: int, num_classes: int) -> None:
        bad = [i for i in self.corrupted_learner_ids if not 0 <= i < n_learners]
        if bad:
            raise InputError(f"corrupted learner ids {sorted(bad)} outside [0, {n_learners})")
        if self.kind == "targeted_flip":
            for cls in (self.source_class, self.target_class):
                if not 0 <= cls < num_classes:
                    raise InputError(f"class {cls} outside [0, {num_classes})")


@dataclass(frozen=True)
class CorruptionStats:
    corrupted_examples: int
    total_examples: int
    total_ratio: float
    class_level_ratio: float | None = None

    def to_dict(self) -> dict:
        return {
            "corrupted_examples": self.corrupted_examples,
            "total_examples": self.total_examples,
            "total_ratio": self.total_ratio,
            "class_level_ratio": self.class_level_ratio,
        }


def apply_uniform_shuffle(shard: LearnerShard, num_classes: int, seed: int) -> LearnerShard:
    """Resample every label i.i.d. from U{0, ..., C-1}."""
    rng = np.random.default_rng(seed)
    train = shard.train.with_labels(rng.integers(0, num_classes, size=len(shard.train)))
    validation = shard.validation.with_labels(
        rng.integers(0, num_classes, size=len(shard.validation))
    )
    return LearnerShard(shard.learner_id, train, validation)


def apply_targeted_flip(shard: LearnerShard, source: int, target: int) -> LearnerShard:
    if source == target:
        raise InputError("source and target class must differ")

    def flip(labels: np.ndarray) -> np.ndarray:
        return np.where(labels == source, target, labels)

    return LearnerShard(
        shard.learner_id,
        shard.train.with_labels(flip(shard.train.labels)),
        shard.validation.with_labels(flip(shard.validation.labels)),
    )


def learner_attack_seed(plan: AttackPlan, learner_id: int) -> int:
    return int(np.random.SeedSequence([plan.seed, learner_id]).generate_state(1, np.uint64)[0])


def apply_attack(plan: AttackPlan, shards: Sequence[LearnerShard], num_classes: int) -> list[LearnerShard]:
    """Poison the corrupted learners; everyone else is returned untouched."""
    plan.validate(len(shards), num_classes)
    out = []
    for shard in shards:
        if plan.kind == "none" or shard.learner_id not in plan.corrupted_learner_ids:
            out.append(shard)
        elif plan.kind == "uniform_shuffle":
            out.append(apply_uniform_shuffle(shard, num_classes, learner_attack_seed(plan, shard.learner_id)))
        else:
            out.append(apply_targeted_flip(shard, plan.source_class, plan.target_class))
    return out


def corruption_report(plan: AttackPlan, shards: Sequence[LearnerShard], num_classes: int) -> CorruptionStats:
    """Share of corrupted examples, computed on the clean (pre-attack) shards.

    For shuffling every example of a corrupted learner counts as corrupted.
    For a targeted flip only its source-class examples do, and the class-level
    ratio is measured against all source-class examples in the federation.
    """
    plan.validate(len(shards), num_classes)
    total = sum(len(s) for s in shards)
    hit = [s for s in shards if s.learner_id in plan.corrupted_learner_ids]
    if plan.kind == "none":
        return CorruptionStats(0, total, 0.0)
    if plan.kind == "uniform_shuffle":
        corrupted = sum(len(s) for s in hit)
        return CorruptionStats(corrupted, total, corrupted / total)

    def n_source(s: LearnerShard) -> int:
        return int(np.sum(s.train.labels == plan.source_class) + np.sum(s.validation.labels == plan.source_class))

    corrupted = sum(n_source(s) for s in hit)
    all_source = sum(n_source(s) for s in shards)
    class_level = corrupted / all_source if all_source else 0.0
    return CorruptionStats(corrupted, total, corrupted / total, class_level)

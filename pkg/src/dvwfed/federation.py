"""Synchronous federation rounds with FedAvg or performance-weighted aggregation.

Each round every participating learner trains the community model locally,
the resulting models are (optionally) scored on the union of all learners'
validation sets, and the controller forms the new community model as the
weighted average of the local models. Learner work is delegated to a
backend so the same controller loop drives both the in-process simulation
and the networked mode in :mod:`dvwfed.transport`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from dvwfed.aggregation import WeightVector, fedavg_weights, performance_weights, weighted_average
from dvwfed.data import LabeledDataset, LearnerShard
from dvwfed.errors import ConfigError, DegenerateWeightsError
from dvwfed.metrics import (
    DEFAULT_GMEAN_EPSILON,
    ConfusionMatrix,
    ScoreFn,
    accumulate,
    evaluate,
    micro_accuracy,
    score_function,
)
from dvwfed.nn import Architecture, Batch, ModelParams, init_params, loss_and_grad, sgd_step

log = logging.getLogger(__name__)

SCHEMES = ("fedavg", "dvw_micro", "dvw_macro", "dvw_gmean")


@dataclass(frozen=True)
class FederationConfig:
    n_learners: int = 10
    rounds: int = 200
    local_epochs: int = 4
    batch_size: int = 100
    learning_rate: float = 0.05
    scheme: str = "dvw_gmean"
    gmean_epsilon: float = DEFAULT_GMEAN_EPSILON
    validation_fraction: float = 0.05
    exclusion_ids: frozenset[int] = field(default_factory=frozenset)
    hidden: tuple[int, ...] = ()
    master_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "exclusion_ids", frozenset(int(i) for i in self.exclusion_ids))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.n_learners < 1:
            raise ConfigError(f"n_learners must be >= 1, got {self.n_learners}")
        if self.local_epochs < 0:
            raise ConfigError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.gmean_epsilon > 0:
            raise ConfigError("gmean_epsilon must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        bad = [i for i in self.exclusion_ids if not 0 <= i < self.n_learners]
        if bad:
            raise ConfigError(f"exclusion ids {sorted(bad)} outside [0, {self.n_learners})")

    @property
    def uses_validation(self) -> bool:
        return self.scheme != "fedavg"

    def to_dict(self) -> dict:
        return {
            "n_learners": self.n_learners,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "scheme": self.scheme,
            "gmean_epsilon": self.gmean_epsilon,
            "validation_fraction": self.validation_fraction,
            "exclusion_ids": sorted(self.exclusion_ids),
            "hidden": list(self.hidden),
            "master_seed": self.master_seed,
        }


@dataclass(frozen=True, eq=False)
class RoundRecord:
    """Outcome of one round.

    Per-learner arrays are aligned with ``learner_ids`` (the participants of
    the round). Per-class accuracies are measured on the clean test set so
    that FedAvg runs, which hold no validation data, remain comparable.
    ``cumulative_cms`` holds each local model's accumulated validation matrix
    and is empty under FedAvg.
    """

    round: int
    learner_ids: tuple[int, ...]
    community_test_accuracy: float
    per_learner_scores: np.ndarray
    per_learner_weights: np.ndarray
    community_class_accuracy: np.ndarray
    learner_class_accuracy: np.ndarray
    cumulative_cms: tuple[ConfusionMatrix, ...]
    community_model: ModelParams
    local_models: tuple[ModelParams, ...] = ()

    def same_as(self, other: RoundRecord) -> bool:
        return (
            self.round == other.round
            and self.learner_ids == other.learner_ids
            and self.community_test_accuracy == other.community_test_accuracy
            and np.array_equal(self.per_learner_scores, other.per_learner_scores)
            and np.array_equal(self.per_learner_weights, other.per_learner_weights)
            and np.array_equal(self.community_class_accuracy, other.community_class_accuracy)
            and np.array_equal(self.learner_class_accuracy, other.learner_class_accuracy)
            and self.cumulative_cms == other.cumulative_cms
            and self.community_model.same_as(other.community_model)
        )


def learner_seed(master_seed: int, learner_id: int, round_no: int) -> int:
    return int(np.random.SeedSequence([master_seed, learner_id, round_no]).generate_state(1, np.uint64)[0])


def client_opt(
    start: ModelParams,
    shard: LearnerShard,
    epochs: int,
    beta: int,
    eta: float,
    seed: int,
) -> ModelParams:
    """Local SGD: ``epochs`` reshuffled passes in batches of ``beta`` (last one may be short)."""
    train = shard.train
    if len(train) == 0:
        raise ConfigError(f"learner {shard.learner_id} has no training data")
    rng = np.random.default_rng(seed)
    params = start
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, beta):
            idx = order[lo : lo + beta]
            _, grad = loss_and_grad(params, Batch(train.features[idx], train.labels[idx]))
            params = sgd_step(params, grad, eta)
    return params


def eval_fanout(
    model: ModelParams,
    validation_sets: Sequence[LabeledDataset],
    score_fn: ScoreFn,
) -> tuple[float, ConfusionMatrix]:
    """Score ``model`` on the accumulated confusion matrix of every validation set."""
    if not any(len(v) for v in validation_sets):
        raise ConfigError("performance weighting needs at least one nonempty validation set")
    cm = accumulate([evaluate(model, v) for v in validation_sets])
    return score_fn(cm), cm


class LearnerBackend(Protocol):
    """Where local training and evaluation actually happen."""

    learner_ids: list[int]

    def train(self, round_no: int, model: ModelParams) -> list[tuple[ModelParams, int]]:
        """Local models and training-set sizes, in ``learner_ids`` order."""

    def evaluate(self, round_no: int, models: Sequence[ModelParams]) -> list[list[ConfusionMatrix]]:
        """``result[k][j]``: matrix of ``models[k]`` on learner ``j``'s validation set."""


class InProcessBackend:
    def __init__(self, shards: Sequence[LearnerShard], config: FederationConfig, workers: int = 1) -> None:
        self.shards = list(shards)
        self.learner_ids = [s.learner_id for s in self.shards]
        self.config = config
        self.workers = workers

    def _map(self, fn: Callable, items: Iterable) -> list:
        if self.workers <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def train(self, round_no: int, model: ModelParams) -> list[tuple[ModelParams, int]]:
        cfg = self.config

        def work(shard: LearnerShard) -> tuple[ModelParams, int]:
            seed = learner_seed(cfg.master_seed, shard.learner_id, round_no)
            local = client_opt(model, shard, cfg.local_epochs, cfg.batch_size, cfg.learning_rate, seed)
            return local, len(shard.train)

        return self._map(work, self.shards)

    def evaluate(self, round_no: int, models: Sequence[ModelParams]) -> list[list[ConfusionMatrix]]:
        return self._map(lambda m: [evaluate(m, s.validation) for s in self.shards], models)


def _compute_weights(
    config: FederationConfig,
    round_no: int,
    train_sizes: Sequence[int],
    matrices: list[list[ConfusionMatrix]] | None,
) -> tuple[WeightVector, tuple[ConfusionMatrix, ...]]:
    if not config.uses_validation:
        return fedavg_weights(train_sizes), ()
    if not any(cm.total for row in matrices for cm in row):
        raise ConfigError("performance weighting needs at least one nonempty validation set")
    score_fn = score_function(config.scheme, config.gmean_epsilon)
    cumulative = tuple(accumulate(row) for row in matrices)
    try:
        return performance_weights([score_fn(cm) for cm in cumulative]), cumulative
    except DegenerateWeightsError as exc:
        raise DegenerateWeightsError(f"round {round_no}: {exc}") from exc


def federate(
    config: FederationConfig,
    backend: LearnerBackend,
    test_set: LabeledDataset,
    keep_local_models: bool = False,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> list[RoundRecord]:
    """Controller loop shared by every backend."""
    arch = Architecture(test_set.dim, config.hidden, test_set.num_classes)
    community = init_params(arch, config.master_seed)
    learner_ids = tuple(backend.learner_ids)
    records: list[RoundRecord] = []
    for t in range(config.rounds):
        trained = backend.train(t, community)
        local_models = [m for m, _ in trained]
        matrices = backend.evaluate(t, local_models) if config.uses_validation else None
        weights, cumulative = _compute_weights(config, t, [n for _, n in trained], matrices)
        community = weighted_average(local_models, weights)

        test_cm = evaluate(community, test_set)
        record = RoundRecord(
            round=t,
            learner_ids=learner_ids,
            community_test_accuracy=micro_accuracy(test_cm),
            per_learner_scores=weights.raw,
            per_learner_weights=weights.normalized,
            community_class_accuracy=test_cm.per_class_accuracy(),
            learner_class_accuracy=np.array(
                [evaluate(m, test_set).per_class_accuracy() for m in local_models]
            ),
            cumulative_cms=cumulative,
            community_model=community,
            local_models=tuple(local_models) if keep_local_models else (),
        )
        records.append(record)
        if on_round is not None:
            on_round(record)
        log.debug("round %d scheme=%s test_acc=%.4f", t, config.scheme, record.community_test_accuracy)
    return records


def _participants(config: FederationConfig, shards: Sequence[LearnerShard]) -> list[LearnerShard]:
    if len(shards) != config.n_learners:
        raise ConfigError(f"config expects {config.n_learners} learners, got {len(shards)} shards")
    active = [s for s in shards if s.learner_id not in config.exclusion_ids]
    if not active:
        raise ConfigError("every learner is excluded")
    return active


def run_federation(
    config: FederationConfig,
    shards: Sequence[LearnerShard],
    test_set: LabeledDataset,
    workers: int = 1,
    keep_local_models: bool = False,
) -> list[RoundRecord]:
    """Run ``config.rounds`` rounds in-process over the non-excluded learners."""
    backend = InProcessBackend(_participants(config, shards), config, workers)
    return federate(config, backend, test_set, keep_local_models)


def run_exclusion_baseline(
    config: FederationConfig,
    shards: Sequence[LearnerShard],
    test_set: LabeledDataset,
    workers: int = 1,
) -> list[RoundRecord]:
    """FedAvg over the honest learners only, each training on its full shard."""
    if not config.exclusion_ids:
        raise ConfigError("the exclusion baseline needs at least one excluded learner")
    cfg = replace(config, scheme="fedavg")
    return run_federation(cfg, [s.merged() for s in shards], test_set, workers)

"""Experiment specs, the data pipeline and result files.

An experiment generates (or loads) a dataset, partitions it across learners,
holds out per-learner validation sets, poisons the corrupted learners once,
and then runs every requested aggregation scheme on the same shards.

Output files, all with a header row and fixed column order:

``rounds.csv``
    ``round, scheme, test_accuracy``
``weights.csv``
    ``round, scheme, learner, raw_score, weight``
``per_class.csv``
    ``scheme, model, class_0 .. class_{C-1}``; final-round test accuracy per
    class for the community model and each participating learner (``L1`` is
    learner 0).
``manifest.json``
    config, every derived seed, the corruption report and wall-clock time.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from dvwfed.attacks import AttackPlan, CorruptionStats, apply_attack, corruption_report
from dvwfed.data import (
    LabeledDataset,
    LearnerShard,
    PartitionPlan,
    generate_synthetic,
    load_csv,
    partition_powerlaw,
    partition_uniform,
    stratified_split,
)
from dvwfed.errors import ConfigError, FedError
from dvwfed.federation import SCHEMES, FederationConfig, RoundRecord, run_exclusion_baseline, run_federation

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

NO_CORRUPTION = "fedavg_no_corruption"
EXCLUSION = "fedavg_exclusion"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    n: int = 10000
    n_test: int = 2000
    dim: int = 32
    num_classes: int = 10
    class_separation: float = 5.0
    path: str | None = None
    test_path: str | None = None
    label_column: str = "label"

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and (self.path is None or self.test_path is None):
            raise ConfigError("csv datasets need both 'path' and 'test_path'")


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "uniform"
    decay: float = 2.0 / 3.0
    counts: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "counts", tuple(self.counts))
        if self.kind not in ("uniform", "powerlaw", "explicit"):
            raise ConfigError(f"partition.kind must be uniform, powerlaw or explicit, got {self.kind!r}")
        if self.kind == "explicit" and not self.counts:
            raise ConfigError("explicit partitions need 'counts'")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    corrupted: tuple[int, ...] = ()
    source_class: int = 0
    target_class: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "corrupted", tuple(sorted(set(self.corrupted))))


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    federation: FederationConfig = field(default_factory=FederationConfig)
    schemes: tuple[str, ...] = ("fedavg", "dvw_gmean")
    no_corruption: bool = False
    exclusion: bool = False
    output: str = "results"
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if not self.schemes:
            raise ConfigError("at least one scheme is required")
        unknown = [s for s in self.schemes if s not in SCHEMES]
        if unknown:
            raise ConfigError(f"unknown schemes {unknown}; expected some of {SCHEMES}")

    def with_corrupted(self, count: int) -> ExperimentSpec:
        return replace(self, attack=replace(self.attack, corrupted=tuple(range(count))))


def _build(cls: type, table: dict[str, Any], section: str) -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{section}]")
    return cls(**table)


def spec_from_dict(raw: dict[str, Any]) -> ExperimentSpec:
    raw = dict(raw)
    top = {}
    for key in ("dataset", "partition", "attack", "federation", "baselines"):
        if key in raw and not isinstance(raw[key], dict):
            raise ConfigError(f"[{key}] must be a table")
    dataset = _build(DatasetSpec, raw.pop("dataset", {}), "dataset")
    partition = _build(PartitionSpec, raw.pop("partition", {}), "partition")
    attack = _build(AttackSpec, raw.pop("attack", {}), "attack")
    fed_table = dict(raw.pop("federation", {}))
    if "scheme" in fed_table or "master_seed" in fed_table or "exclusion_ids" in fed_table:
        raise ConfigError("[federation] sets neither scheme, master_seed nor exclusion_ids; use top-level keys")
    federation = _build(FederationConfig, fed_table, "federation")
    baselines = dict(raw.pop("baselines", {}))
    unknown = sorted(set(baselines) - {"no_corruption", "exclusion"})
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [baselines]")
    top.update(baselines)
    for key in ("schemes", "output", "seed", "workers"):
        if key in raw:
            top[key] = raw.pop(key)
    if raw:
        raise ConfigError(f"unknown top-level key(s) {sorted(raw)}")
    try:
        return ExperimentSpec(dataset, partition, attack, federation, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return spec_from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def spec_to_dict(spec: ExperimentSpec) -> dict[str, Any]:
    fed = spec.federation.to_dict()
    for key in ("scheme", "master_seed", "exclusion_ids"):
        fed.pop(key)
    return {
        "seed": spec.seed,
        "output": spec.output,
        "schemes": list(spec.schemes),
        "workers": spec.workers,
        "dataset": dataclasses.asdict(spec.dataset),
        "partition": {**dataclasses.asdict(spec.partition), "counts": list(spec.partition.counts)},
        "attack": {**dataclasses.asdict(spec.attack), "corrupted": list(spec.attack.corrupted)},
        "federation": fed,
        "baselines": {"no_corruption": spec.no_corruption, "exclusion": spec.exclusion},
    }


def derive_seeds(seed: int) -> dict[str, int]:
    """Independent seeds for every random stage, all from one master seed."""
    stages = ("data", "partition", "split", "attack", "federation")
    return {
        name: int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint32)[0])
        for i, name in enumerate(stages)
    }


@dataclass(frozen=True, eq=False)
class PreparedData:
    clean_shards: list[LearnerShard]
    attacked_shards: list[LearnerShard]
    test_set: LabeledDataset
    plan: AttackPlan
    corruption: CorruptionStats
    seeds: dict[str, int]


def load_dataset(spec: DatasetSpec, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if spec.kind == "csv":
        return (
            load_csv(spec.path, spec.label_column, spec.num_classes),
            load_csv(spec.test_path, spec.label_column, spec.num_classes),
        )
    full = generate_synthetic(spec.n + spec.n_test, spec.dim, spec.num_classes, spec.class_separation, seed)
    return full.subset(np.arange(spec.n)), full.subset(np.arange(spec.n, spec.n + spec.n_test))


def prepare_data(spec: ExperimentSpec) -> PreparedData:
    seeds = derive_seeds(spec.seed)
    train, test = load_dataset(spec.dataset, seeds["data"])
    n_learners = spec.federation.n_learners
    part = spec.partition
    if part.kind == "uniform":
        pieces = partition_uniform(train, n_learners, seeds["partition"])
    elif part.kind == "powerlaw":
        pieces = partition_powerlaw(train, n_learners, part.decay, seeds["partition"])
    else:
        pieces = partition_powerlaw(train, n_learners, seed=seeds["partition"], plan=PartitionPlan(part.counts))

    fraction = spec.federation.validation_fraction
    shards = []
    for k, piece in enumerate(pieces):
        if fraction > 0:
            tr, val = stratified_split(piece, fraction, seeds["split"] + k)
        else:
            tr, val = piece, LabeledDataset.empty(piece.dim, piece.num_classes)
        shards.append(LearnerShard(k, tr, val))

    atk = spec.attack
    plan = AttackPlan(atk.kind, frozenset(atk.corrupted), atk.source_class, atk.target_class, seeds["attack"])
    corruption = corruption_report(plan, shards, train.num_classes)
    attacked = apply_attack(plan, shards, train.num_classes)
    return PreparedData(shards, attacked, test, plan, corruption, seeds)


def learner_shard_for(data: PreparedData, learner_id: int, scheme: str) -> LearnerShard:
    """The shard a learner serves: FedAvg learners train on everything they hold."""
    shard = data.attacked_shards[learner_id]
    return shard.merged() if scheme == "fedavg" else shard


@dataclass(eq=False)
class ResultBundle:
    output_dir: Path
    runs: dict[str, list[RoundRecord]]
    corruption: CorruptionStats
    manifest: dict[str, Any]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_results(out_dir: Path, runs: dict[str, list[RoundRecord]], num_classes: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "rounds.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "scheme", "test_accuracy"])
        for scheme, records in runs.items():
            for r in records:
                w.writerow([r.round, scheme, _fmt(r.community_test_accuracy)])
    with (out_dir / "weights.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "scheme", "learner", "raw_score", "weight"])
        for scheme, records in runs.items():
            for r in records:
                for k, raw, norm in zip(r.learner_ids, r.per_learner_scores, r.per_learner_weights):
                    w.writerow([r.round, scheme, k, _fmt(raw), _fmt(norm)])
    with (out_dir / "per_class.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "model", *[f"class_{c}" for c in range(num_classes)]])
        for scheme, records in runs.items():
            last = records[-1]
            w.writerow([scheme, "community", *map(_fmt, last.community_class_accuracy)])
            for k, acc in zip(last.learner_ids, last.learner_class_accuracy):
                w.writerow([scheme, f"L{k + 1}", *map(_fmt, acc)])


def run_experiment(spec: ExperimentSpec, data: PreparedData | None = None) -> ResultBundle:
    """Run every scheme and baseline of ``spec`` on shared shards and write the results."""
    started = time.perf_counter()
    try:
        data = data or prepare_data(spec)
        fed = replace(spec.federation, master_seed=data.seeds["federation"])
        corrupted = sorted(data.plan.corrupted_learner_ids) if data.plan.kind != "none" else []
        runs: dict[str, list[RoundRecord]] = {}
        for scheme in spec.schemes:
            cfg = replace(fed, scheme=scheme)
            shards = [learner_shard_for(data, s.learner_id, scheme) for s in data.attacked_shards]
            log.info("running %s", scheme)
            runs[scheme] = run_federation(cfg, shards, data.test_set, spec.workers)
        if spec.no_corruption:
            cfg = replace(fed, scheme="fedavg")
            runs[NO_CORRUPTION] = run_federation(cfg, [s.merged() for s in data.clean_shards], data.test_set, spec.workers)
        if spec.exclusion:
            if corrupted:
                cfg = replace(fed, scheme="fedavg", exclusion_ids=frozenset(corrupted))
                runs[EXCLUSION] = run_exclusion_baseline(cfg, data.attacked_shards, data.test_set, spec.workers)
            else:
                log.warning("exclusion baseline skipped: no corrupted learners")
    except FedError as exc:
        raise type(exc)(f"experiment {spec.output!r} (seed {spec.seed}): {exc}") from exc

    out_dir = Path(spec.output)
    write_results(out_dir, runs, data.test_set.num_classes)
    manifest = {
        "config": spec_to_dict(spec),
        "seeds": {"master": spec.seed, **data.seeds},
        "corrupted_learners": corrupted,
        "corruption": data.corruption.to_dict(),
        "shard_sizes": [len(s) for s in data.clean_shards],
        "runs": {name: {"final_test_accuracy": recs[-1].community_test_accuracy} for name, recs in runs.items()},
        "wall_clock_seconds": time.perf_counter() - started,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return ResultBundle(out_dir, runs, data.corruption, manifest)


def sweep(spec: ExperimentSpec, corrupted_counts: Sequence[int]) -> list[ResultBundle]:
    """One experiment per corruption level, corrupting the lowest learner ids first.

    Results land in ``<output>/corrupted_<count>/`` plus a ``sweep.csv`` summary
    with columns ``corrupted, total_corruption, class_corruption, scheme,
    final_test_accuracy``.
    """
    n = spec.federation.n_learners
    bad = [c for c in corrupted_counts if not 0 <= c <= n]
    if bad:
        raise ConfigError(f"corrupted counts {bad} outside [0, {n}]")
    bundles = []
    root = Path(spec.output)
    for count in corrupted_counts:
        sub = replace(spec.with_corrupted(count), output=str(root / f"corrupted_{count}"))
        if count == 0:
            sub = replace(sub, attack=replace(sub.attack, kind="none"))
        bundles.append(run_experiment(sub))
    root.mkdir(parents=True, exist_ok=True)
    with (root / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corrupted", "total_corruption", "class_corruption", "scheme", "final_test_accuracy"])
        for count, b in zip(corrupted_counts, bundles):
            cls = b.corruption.class_level_ratio
            for scheme, records in b.runs.items():
                w.writerow([
                    count,
                    _fmt(b.corruption.total_ratio),
                    "" if cls is None else _fmt(cls),
                    scheme,
                    _fmt(records[-1].community_test_accuracy),
                ])
    return bundles

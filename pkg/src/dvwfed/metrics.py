"""Confusion matrices and the three validation performance scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dvwfed.data import LabeledDataset
from dvwfed.errors import InputError
from dvwfed.nn import ModelParams, forward

DEFAULT_GMEAN_EPSILON = 0.001


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Integer counts indexed ``[true_label, predicted_label]``."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise InputError(f"confusion matrix must be square, got shape {counts.shape}")
        if np.any(counts < 0):
            raise InputError("confusion matrix counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __hash__(self) -> int:
        return hash(self.counts.tobytes())

    @staticmethod
    def zeros(num_classes: int) -> ConfusionMatrix:
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))

    def per_class_accuracy(self) -> np.ndarray:
        """``TP_i / m_i``; classes without examples get 0."""
        rows = self.counts.sum(axis=1)
        diag = np.diag(self.counts).astype(np.float64)
        return np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class.
    return np.argmax(forward(params, features), axis=1)


def confusion_from_labels(true: np.ndarray, pred: np.ndarray, num_classes: int) -> ConfusionMatrix:
    flat = np.bincount(np.asarray(true) * num_classes + np.asarray(pred), minlength=num_classes**2)
    return ConfusionMatrix(flat.reshape(num_classes, num_classes))


def evaluate(params: ModelParams, data: LabeledDataset) -> ConfusionMatrix:
    c = params.arch.num_classes
    if data.num_classes != c:
        raise InputError(f"dataset has {data.num_classes} classes, model predicts {c}")
    if len(data) == 0:
        return ConfusionMatrix.zeros(c)
    return confusion_from_labels(data.labels, predict(params, data.features), c)


def accumulate(cms: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
    if not cms:
        raise InputError("no confusion matrices to accumulate")
    sizes = {cm.num_classes for cm in cms}
    if len(sizes) != 1:
        raise InputError(f"cannot accumulate matrices of different sizes {sorted(sizes)}")
    total = np.zeros_like(cms[0].counts)
    for cm in cms:
        total = total + cm.counts
    return ConfusionMatrix(total)


def _require_examples(cm: ConfusionMatrix) -> None:
    if cm.total < 1:
        raise InputError("confusion matrix holds no examples")


def micro_accuracy(cm: ConfusionMatrix) -> float:
    _require_examples(cm)
    return float(np.trace(cm.counts) / cm.total)


def macro_accuracy(cm: ConfusionMatrix) -> float:
    _require_examples(cm)
    return float(cm.per_class_accuracy().sum() / cm.num_classes)


def gmean_score(cm: ConfusionMatrix, epsilon: float = DEFAULT_GMEAN_EPSILON) -> float:
    """Geometric mean of per-class accuracies, each floored at ``epsilon``.

    The floor keeps a single failed (or absent) class from zeroing the score.
    """
    _require_examples(cm)
    if not epsilon > 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    acc = np.maximum(cm.per_class_accuracy(), epsilon)
    return float(np.exp(np.mean(np.log(acc))))


ScoreFn = Callable[[ConfusionMatrix], float]


def score_function(scheme: str, epsilon: float = DEFAULT_GMEAN_EPSILON) -> ScoreFn:
    if scheme == "dvw_micro":
        return micro_accuracy
    if scheme == "dvw_macro":
        return macro_accuracy
    if scheme == "dvw_gmean":
        return lambda cm: gmean_score(cm, epsilon)
    raise InputError(f"no score function for scheme {scheme!r}")

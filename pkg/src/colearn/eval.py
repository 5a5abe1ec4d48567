"""Test accuracy, memorization diagnostics and last-k summaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .augment import normalize
from .data import ImageDataset
from .errors import ParameterError
from .model import ModelParams, flatten, predict

UNDEFINED = -1.0


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    l_sup: float
    l_int: float
    l_str: float
    l_total: float
    test_accuracy: float
    clean_subset_train_acc: float
    noisy_subset_memorization: float

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(f.name for f in fields(MetricsRow))


def predictions(params: ModelParams, ds: ImageDataset, stats=None) -> np.ndarray:
    return predict(params, flatten(normalize(ds.images, stats)))


def test_accuracy(params: ModelParams, test_ds: ImageDataset, stats=None) -> float:
    """Fraction of un-augmented test images whose argmax matches the clean label."""
    if len(test_ds) == 0:
        raise ParameterError("empty test set")
    return float(np.mean(predictions(params, test_ds, stats) == test_ds.clean_labels))


def memorization_from_predictions(pred: np.ndarray, ds: ImageDataset) -> tuple[float, float]:
    clean = ~ds.corruption_mask
    noisy = ds.corruption_mask
    clean_acc = float(np.mean(pred[clean] == ds.clean_labels[clean])) if clean.any() else UNDEFINED
    memorized = float(np.mean(pred[noisy] == ds.noisy_labels[noisy])) if noisy.any() else UNDEFINED
    return clean_acc, memorized


def memorization_metrics(params: ModelParams, train_ds: ImageDataset, stats=None) -> tuple[float, float]:
    """(accuracy on correctly-labelled samples, fraction of corrupted samples predicted as their wrong label).

    Either value is -1 when its subset is empty.
    """
    return memorization_from_predictions(predictions(params, train_ds, stats), train_ds)


def last_k_summary(traces: Sequence[Sequence[MetricsRow]], k: int = 10) -> tuple[float, float]:
    """Mean over seeds of each seed's final-``k``-epoch test accuracy, and the sample std across seeds."""
    if not traces:
        raise ParameterError("no traces to summarize")
    per_seed = []
    for trace in traces:
        if len(trace) < k:
            raise ParameterError(f"trace has {len(trace)} epochs, fewer than k={k}")
        per_seed.append(math.fsum(r.test_accuracy for r in trace[-k:]) / k)
    return summarize(per_seed)


def summarize(values: Sequence[float]) -> tuple[float, float]:
    values = sorted(values)  # order-independent float sums
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))

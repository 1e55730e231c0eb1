"""Group-wise accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import Dataset
from .models import ModelSpec, predict_logits
from .autodiff import Tensor


@dataclass(frozen=True)
class GroupMetrics:
    per_group_accuracy: dict[int, float]
    counts: dict[int, int]
    robust_accuracy: float
    average_accuracy: float

    def to_json(self) -> dict:
        return {
            "per_group_accuracy": {str(g): a for g, a in self.per_group_accuracy.items()},
            "counts": {str(g): c for g, c in self.counts.items()},
            "robust_accuracy": self.robust_accuracy,
            "average_accuracy": self.average_accuracy,
        }


def group_metrics_from_predictions(pred, labels, groups, num_groups: int | None = None) -> GroupMetrics:
    """Robust accuracy is the minimum over groups that have examples."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = (pred == labels).astype(np.float64)
    num_groups = int(groups.max()) + 1 if num_groups is None else num_groups
    per_group, counts = {}, {}
    for g in range(num_groups):
        mask = groups == g
        c = int(mask.sum())
        if c:
            per_group[g] = float(correct[mask].mean())
            counts[g] = c
    return GroupMetrics(per_group, counts, min(per_group.values()), float(correct.mean()))


def evaluate_groups(params: Mapping[str, Tensor], spec: ModelSpec, dataset: Dataset) -> GroupMetrics:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argmax(predict_logits(params, spec, dataset.X), axis=1)
    return group_metrics_from_predictions(pred, dataset.y, dataset.group, dataset.num_groups)

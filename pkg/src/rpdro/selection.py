"""Post-hoc checkpoint selection.

The Minmax criterion scores every checkpointed model against every
checkpointed adversary on the validation set and keeps the model whose
worst weighted validation loss is smallest. Adversaries whose validation
KL estimate exceeds a threshold (``log 10`` by default) are discarded
first; a uniform adversary is always kept so selection is never empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .data import Dataset
from .metrics import evaluate_groups
from .models import ModelSpec, nll_values, predict_logits, zero_one_per_example
from .weighting import (
    StrategyConfig,
    kl_estimate_mean1,
    nonparam_chi2_weights,
    nonparam_cvar_weights,
    nonparam_kl_weights,
)

LOG10 = math.log(10.0)


def full_set_weights(adversary: Mapping[str, Tensor], spec: ModelSpec, valid: Dataset) -> Tensor:
    """Ratios ``N * softmax(scores)`` over the whole set, so their mean is one."""
    logits = predict_logits(adversary, spec, valid.X)
    return ratios_from_scores(logits[np.arange(len(valid)), valid.y])


def ratios_from_scores(scores) -> Tensor:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one validation example")
    e = np.exp(s - s.max())
    return len(s) * e / e.sum()


def nonparam_validation_ratios(strategy: StrategyConfig, losses) -> Tensor:
    """Closed-form worst-case ratios of a nonparametric adversary on the full set."""
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses)
    if strategy.kind == "np-kl":
        w = nonparam_kl_weights(losses, strategy.kappa).weights
    elif strategy.kind == "np-cvar":
        w = nonparam_cvar_weights(losses, strategy.alpha).weights
    elif strategy.kind == "np-chi2":
        w = nonparam_chi2_weights(losses, strategy.rho).weights
    else:
        raise ValueError(f"{strategy.kind!r} is not a nonparametric strategy")
    return n * w / w.sum()


@dataclass(frozen=True)
class FilterResult:
    kept: list[int]
    kl_values: list[float]
    candidates: Tensor  # rows: kept adversaries' ratios, then the uniform adversary


def kl_filter(ratios: Sequence[Tensor], threshold: float = LOG10, num_examples: int | None = None) -> FilterResult:
    """Drop adversaries whose ``mean(r log r)`` exceeds ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if num_examples is None:
        if not ratios:
            raise ValueError("num_examples is required when no adversaries are given")
        num_examples = len(ratios[0])
    kl_values = [kl_estimate_mean1(r) for r in ratios]
    kept = [j for j, kl in enumerate(kl_values) if kl <= threshold]
    rows = [np.asarray(ratios[j], dtype=np.float64) for j in kept]
    rows.append(np.ones(num_examples))
    return FilterResult(kept, kl_values, np.vstack(rows))


@dataclass(frozen=True)
class CandidatePool:
    """Per-example validation losses of each model and ratios of each adversary."""

    losses: Tensor  # [models, N]
    ratios: Tensor  # [adversaries, N]

    def __post_init__(self):
        if len(self.losses) == 0:
            raise ValueError("candidate pool needs at least one model")


@dataclass(frozen=True)
class MinmaxResult:
    index: int
    matrix: Tensor
    value: float


def minmax_from_matrix(matrix) -> MinmaxResult:
    """``argmin_i max_j M[i, j]``, earliest row on ties."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    row_max = m.max(axis=1)
    i = int(np.argmin(row_max))
    return MinmaxResult(i, m, float(row_max[i]))


def minmax_select(pool: CandidatePool) -> MinmaxResult:
    losses = np.atleast_2d(pool.losses)
    ratios = np.atleast_2d(pool.ratios)
    matrix = losses @ ratios.T / losses.shape[1]
    return minmax_from_matrix(matrix)


def model_losses(models: Sequence[Mapping[str, Tensor]], spec: ModelSpec, valid: Dataset,
                 loss_kind: str = "zero-one") -> Tensor:
    rows = []
    for params in models:
        logits = predict_logits(params, spec, valid.X)
        if loss_kind == "zero-one":
            rows.append(zero_one_per_example(logits, valid.y))
        elif loss_kind == "nll":
            rows.append(nll_values(logits, valid.y))
        else:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
    return np.vstack(rows)


def oracle_select(models: Sequence[Mapping[str, Tensor]], spec: ModelSpec, valid: Dataset) -> int:
    """Checkpoint with the best worst-group validation accuracy."""
    if valid.group is None or valid.num_groups < 1:
        raise ValueError("oracle selection needs group ids")
    robust = [evaluate_groups(p, spec, valid).robust_accuracy for p in models]
    return int(np.argmax(robust))


def average_select(models: Sequence[Mapping[str, Tensor]], spec: ModelSpec, valid: Dataset) -> int:
    acc = [evaluate_groups(p, spec, valid).average_accuracy for p in models]
    return int(np.argmax(acc))


def select_checkpoint(
    checkpoints,
    spec: ModelSpec,
    valid: Dataset,
    criterion: str = "minmax",
    *,
    strategy: StrategyConfig | None = None,
    adversary_spec: ModelSpec | None = None,
    kl_threshold: float = LOG10,
    loss_kind: str = "zero-one",
) -> dict:
    """Pick a checkpoint and return a JSON-ready report.

    ``checkpoints`` is a sequence of objects with ``step``, ``model`` and
    ``adversary`` attributes (a :class:`~rpdro.training.CheckpointLog`).
    For nonparametric strategies each checkpoint's adversary is the closed
    form solution against that checkpoint's own validation losses.
    """
    entries = list(checkpoints)
    if not entries:
        raise ValueError("no checkpoints to select from")
    models = [c.model for c in entries]
    per_ckpt = []
    for c in entries:
        m = evaluate_groups(c.model, spec, valid)
        per_ckpt.append({"step": c.step, **m.to_json()})
    report = {"criterion": criterion, "threshold": kl_threshold, "loss": loss_kind}
    if criterion == "minmax":
        ratios = []
        if strategy is not None and strategy.kind.startswith("np-"):
            nll = model_losses(models, spec, valid, "nll")
            ratios = [nonparam_validation_ratios(strategy, row) for row in nll]
        elif all(c.adversary is not None for c in entries) and adversary_spec is not None:
            ratios = [full_set_weights(c.adversary, adversary_spec, valid) for c in entries]
        filt = kl_filter(ratios, kl_threshold, num_examples=len(valid))
        result = minmax_select(CandidatePool(model_losses(models, spec, valid, loss_kind), filt.candidates))
        index = result.index
        report.update({
            "matrix": result.matrix.tolist(),
            "kl_values": filt.kl_values,
            "kept_adversaries": filt.kept,
            "minmax_value": result.value,
        })
    elif criterion == "oracle":
        index = oracle_select(models, spec, valid)
    elif criterion == "average":
        index = average_select(models, spec, valid)
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    report.update({"selected_index": index, "selected_step": entries[index].step, "checkpoints": per_ckpt})
    return report

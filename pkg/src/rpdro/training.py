"""Min-max training loop for RP-DRO and the reweighting baselines."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .autodiff import AutodiffError, ParamSet, Tape, backward
from .data import Dataset
from .metrics import GroupMetrics, evaluate_groups
from .models import (
    ModelSpec,
    OptimizerState,
    Schedule,
    forward_logits,
    init_params,
    lr_at_step,
    nll_per_example,
    optimizer_step,
)
from .weighting import (
    SCORE_CLIP,
    GroupWeights,
    StrategyConfig,
    batch_normalized_weights,
    group_example_weights,
    group_mean_losses,
    groupdro_reweight,
    nonparam_chi2_weights,
    nonparam_cvar_weights,
    nonparam_kl_weights,
    rpdro_batch_objective,
    selfnorm_objective,
    uniform_weights,
)

STEP_COLUMNS = ("step", "epoch", "strategy", "train_weighted_loss", "kl_term", "mean_weight_entropy", "lr")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    strategy: StrategyConfig
    model_spec: ModelSpec
    adversary_spec: ModelSpec | None = None
    optimizer: str = "sgd"
    lr: float = 0.1
    schedule: str = "constant"
    batch_size: int = 32
    epochs: int = 300
    adversary_steps: int = 1
    checkpoint_interval: int = 100
    seed: int = 0
    # by default the adversary shares the model's optimizer and learning rate
    adversary_optimizer: str | None = None
    adversary_lr: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.adversary_steps < 1:
            raise ValueError("adversary_steps must be >= 1")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.strategy.kind == "rpdro" and self.adversary_spec is None:
            self.adversary_spec = self.model_spec

    @property
    def uses_adversary(self) -> bool:
        return self.strategy.kind == "rpdro"

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy.to_json(),
            "model_spec": self.model_spec.to_dict(),
            "adversary_spec": self.adversary_spec.to_dict() if self.adversary_spec else None,
            "optimizer": self.optimizer,
            "lr": self.lr,
            "schedule": self.schedule,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "adversary_steps": self.adversary_steps,
            "checkpoint_interval": self.checkpoint_interval,
            "seed": self.seed,
            "adversary_optimizer": self.adversary_optimizer,
            "adversary_lr": self.adversary_lr,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "TrainConfig":
        obj = dict(obj)
        obj["strategy"] = StrategyConfig.from_json(obj["strategy"])
        obj["model_spec"] = ModelSpec.from_dict(obj["model_spec"])
        if obj.get("adversary_spec"):
            obj["adversary_spec"] = ModelSpec.from_dict(obj["adversary_spec"])
        return cls(**obj)


@dataclass(frozen=True)
class Batch:
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Checkpoint:
    step: int
    model: ParamSet
    adversary: ParamSet | None


@dataclass
class CheckpointLog:
    entries: list[Checkpoint] = field(default_factory=list)

    def append(self, step: int, model: ParamSet, adversary: ParamSet | None) -> None:
        if self.entries and step <= self.entries[-1].step:
            raise ValueError("checkpoint steps must be strictly increasing")
        self.entries.append(Checkpoint(step, model.copy(), adversary.copy() if adversary is not None else None))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> Checkpoint:
        return self.entries[i]

    @property
    def steps(self) -> list[int]:
        return [c.step for c in self.entries]


@dataclass
class TrainState:
    """Mutable per-run state: parameters, optimizer moments, group weights."""

    theta: ParamSet
    psi: ParamSet | None
    model_opt: OptimizerState
    adversary_opt: OptimizerState | None
    q: GroupWeights | None = None
    step: int = 0


@dataclass
class TrainResult:
    checkpoints: CheckpointLog
    step_log: list[dict]
    checkpoint_metrics: list[dict]
    state: TrainState


def _stream(seed: int, tag: int) -> int:
    """Independent integer seed for one RNG stream of a run."""
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def make_batches(dataset: Dataset, batch_size: int, epoch_seed: int) -> list[Batch]:
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batches.append(Batch(dataset.X[idx], dataset.y[idx], dataset.group[idx], idx))
    return batches


def init_state(config: TrainConfig, num_groups: int = 1) -> TrainState:
    theta = init_params(config.model_spec, _stream(config.seed, 1))
    model_opt = OptimizerState(config.optimizer, config.lr)
    psi = adversary_opt = None
    if config.uses_adversary:
        psi = init_params(config.adversary_spec, _stream(config.seed, 2))
        adversary_opt = OptimizerState(
            config.adversary_optimizer or config.optimizer,
            config.lr if config.adversary_lr is None else config.adversary_lr,
        )
    q = GroupWeights(np.full(num_groups, 1.0 / num_groups)) if config.strategy.kind == "group-dro" else None
    return TrainState(theta, psi, model_opt, adversary_opt, q)


def _weight_stats(w: np.ndarray) -> tuple[float, float]:
    """(KL to uniform, entropy) of a normalized weight vector."""
    pos = w[w > 0]
    entropy = float(-np.sum(pos * np.log(pos)))
    return math.log(len(w)) - entropy, entropy


def _adversary_objective(tape: Tape, strategy: StrategyConfig, scores: int, losses: int) -> int:
    if strategy.norm_mode == "self":
        return selfnorm_objective(tape, scores, losses, strategy.beta, strategy.tau)
    return rpdro_batch_objective(tape, batch_normalized_weights(tape, scores), losses, strategy.tau)


def _scores(tape: Tape, spec: ModelSpec, weights: Mapping[str, int], x: int, labels) -> int:
    return tape.select(forward_logits(tape, spec, weights, x), labels)


def _normalized_from_scores(strategy: StrategyConfig, scores: np.ndarray) -> np.ndarray:
    s = scores if strategy.norm_mode == "batch" else np.clip(scores, -30.0, 30.0)
    e = np.exp(s - s.max())
    return e / e.sum()


def _grads_by_name(grads, nodes: Mapping[str, int]) -> dict[str, np.ndarray]:
    return {name: grads[nid] for name, nid in nodes.items()}


def _adversary_lr(state: TrainState, config: TrainConfig, lr: float, adv_lr: float | None) -> float:
    """Adversary rate on the same schedule as the model, scaled from its own base rate."""
    if adv_lr is not None:
        return adv_lr
    base = state.adversary_opt.learning_rate
    return base * (lr / config.lr) if config.lr > 0 else base


def simultaneous_step(state: TrainState, batch: Batch, config: TrainConfig, lr: float,
                      adv_lr: float | None = None) -> dict:
    """Descend on the model and ascend on the adversary from the same pre-step point."""
    tape = Tape()
    theta_nodes = state.theta.bind(tape)
    psi_nodes = state.psi.bind(tape)
    x = tape.constant(batch.X)
    losses = nll_per_example(tape, forward_logits(tape, config.model_spec, theta_nodes, x), batch.y)
    scores = _scores(tape, config.adversary_spec, psi_nodes, x, batch.y)
    objective = _adversary_objective(tape, config.strategy, scores, losses)
    grads = backward(tape, objective)
    theta, _ = optimizer_step(state.theta, _grads_by_name(grads, theta_nodes), state.model_opt, "descend", lr)
    psi, _ = optimizer_step(state.psi, _grads_by_name(grads, psi_nodes), state.adversary_opt, "ascend",
                            _adversary_lr(state, config, lr, adv_lr))
    state.theta, state.psi = theta, psi
    w = _normalized_from_scores(config.strategy, tape.value(scores))
    return {"objective": float(tape.value(objective)), "weights": w, "losses": tape.value(losses)}


def adversary_objective_value(psi: ParamSet, losses: np.ndarray, batch: Batch, config: TrainConfig) -> float:
    """Adversary objective for fixed per-example losses."""
    tape = Tape()
    nodes = psi.bind(tape)
    scores = _scores(tape, config.adversary_spec, nodes, tape.constant(batch.X), batch.y)
    return float(tape.value(_adversary_objective(tape, config.strategy, scores, tape.constant(losses))))


def adversary_grads_direct(psi: Mapping[str, np.ndarray], spec: ModelSpec, X: np.ndarray, y: np.ndarray,
                           losses: np.ndarray, strategy: StrategyConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Adversary objective and its gradient for fixed losses, without a tape.

    Hand-written backward pass used by the inner loop of :func:`adversary_extra_steps`;
    it agrees with the taped objective to rounding error.
    """
    n = len(y)
    rows = np.arange(n)
    last = len(spec.hidden_sizes)
    acts = [X]
    h = X
    for layer in range(last + 1):
        h = h @ psi[f"W{layer}"] + psi[f"b{layer}"]
        if layer < last:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
            acts.append(h)
    s = h[rows, y]
    tau = strategy.tau
    if strategy.norm_mode == "self":
        c = np.clip(s, -SCORE_CLIP, SCORE_CLIP)
        r = np.exp(c)
        m = r.mean()
        log_m = math.log(m)
        obj = float((r * losses).mean() - strategy.beta * log_m**2 - tau * (r * c).mean())
        g_s = r * (losses - 2.0 * strategy.beta * log_m / m - tau * (c + 1.0)) / n
        g_s = g_s * ((s >= -SCORE_CLIP) & (s <= SCORE_CLIP))
    else:
        e = np.exp(s - s.max())
        w = e / e.sum()
        pos = w > 0
        logw = np.log(np.where(pos, w, 1.0))
        obj = float(w @ losses - tau * (w * logw).sum())
        g_w = losses - np.where(pos, tau * (logw + 1.0), 0.0)
        g_s = w * (g_w - w @ g_w)
    grads = {}
    dz = np.zeros_like(h)
    dz[rows, y] = g_s
    for layer in range(last, -1, -1):
        a = acts[layer]
        grads[f"W{layer}"] = a.T @ dz
        grads[f"b{layer}"] = dz.sum(axis=0)
        if layer:
            dh = dz @ psi[f"W{layer}"].T
            dz = dh * (a > 0) if spec.activation == "relu" else dh * (1.0 - a * a)
    return obj, grads


def _ascend_adversary(psi: ParamSet, opt: OptimizerState, lr: float, k: int, trace: list | None,
                      objective_and_grads) -> ParamSet:
    """``k`` ascent steps on one flat parameter vector.

    Elementwise arithmetic is the same as :func:`optimizer_step`, so the result matches
    ``k`` calls of it bit for bit; the flat layout only saves per-array overhead.
    """
    names = list(psi)
    shapes = [psi[n].shape for n in names]
    bounds = np.cumsum([0] + [psi[n].size for n in names])
    flat = np.concatenate([psi[n].ravel() for n in names])

    def unflat(vec):
        return {n: vec[bounds[i]:bounds[i + 1]].reshape(shapes[i]) for i, n in enumerate(names)}

    adam = opt.kind == "adam"
    if adam:
        first = np.concatenate([opt.first.get(n, np.zeros(shapes[i])).ravel() for i, n in enumerate(names)])
        second = np.concatenate([opt.second.get(n, np.zeros(shapes[i])).ravel() for i, n in enumerate(names)])
        b1, b2 = opt.beta1, opt.beta2
    sign = 1.0
    for _ in range(k):
        obj, grads = objective_and_grads(unflat(flat))
        g = np.concatenate([grads[n].ravel() for n in names])
        if not (math.isfinite(obj) and math.isfinite(g.sum())):
            raise AutodiffError("adversary objective or gradient is not finite")
        if trace is not None:
            trace.append(obj)
        opt.step += 1
        if adam:
            t = opt.step
            first = b1 * first + (1 - b1) * g
            second = b2 * second + (1 - b2) * g * g
            m_hat = first / (1 - b1**t)
            v_hat = second / (1 - b2**t)
            flat = flat + sign * lr * m_hat / (np.sqrt(v_hat) + opt.epsilon)
        else:
            flat = flat + sign * lr * g
    if adam:
        opt.first.update(unflat(first))
        opt.second.update(unflat(second))
    new = ParamSet()
    for n, v in unflat(flat).items():
        dict.__setitem__(new, n, v.copy())
    return new


def adversary_extra_steps(state: TrainState, batch: Batch, config: TrainConfig, lr: float, k: int,
                          trace: list | None = None, adv_lr: float | None = None) -> dict:
    """``k`` ascent steps on the adversary with the model frozen, then one model step."""
    tape = Tape()
    theta_nodes = state.theta.bind(tape)
    x = tape.constant(batch.X)
    losses = nll_per_example(tape, forward_logits(tape, config.model_spec, theta_nodes, x), batch.y)
    loss_values = tape.value(losses)
    strategy = config.strategy
    state.psi = _ascend_adversary(
        state.psi, state.adversary_opt, _adversary_lr(state, config, lr, adv_lr), k, trace,
        lambda p: adversary_grads_direct(p, config.adversary_spec, batch.X, batch.y, loss_values, strategy),
    )
    # model step against the final adversary; its scores are constants here
    final_scores = _scores(tape, config.adversary_spec, {k_: tape.constant(v) for k_, v in state.psi.items()},
                           x, batch.y)
    objective = _adversary_objective(tape, strategy, final_scores, losses)
    grads = backward(tape, objective)
    state.theta, _ = optimizer_step(state.theta, _grads_by_name(grads, theta_nodes), state.model_opt, "descend", lr)
    w = _normalized_from_scores(strategy, tape.value(final_scores))
    return {"objective": float(tape.value(objective)), "weights": w, "losses": loss_values}


def closed_form_weights(strategy: StrategyConfig, losses: np.ndarray, groups: np.ndarray,
                        state: TrainState) -> np.ndarray:
    kind = strategy.kind
    if kind == "erm":
        return uniform_weights(len(losses)).weights
    if kind == "np-kl":
        return nonparam_kl_weights(losses, strategy.kappa).weights
    if kind == "np-cvar":
        return nonparam_cvar_weights(losses, strategy.alpha).weights
    if kind == "np-chi2":
        return nonparam_chi2_weights(losses, strategy.rho).weights
    if kind == "group-dro":
        group_losses, counts = group_mean_losses(losses, groups, len(state.q.q))
        state.q = groupdro_reweight(state.q, group_losses, strategy.eta_q)
        return group_example_weights(state.q, groups).weights
    raise ValueError(f"strategy {kind!r} has no closed-form weights")


def reweighted_step(state: TrainState, batch: Batch, config: TrainConfig, lr: float) -> dict:
    """One model step on ``sum w_i l_i`` with weights fixed from the current losses."""
    tape = Tape()
    theta_nodes = state.theta.bind(tape)
    x = tape.constant(batch.X)
    losses = nll_per_example(tape, forward_logits(tape, config.model_spec, theta_nodes, x), batch.y)
    loss_values = tape.value(losses)
    w = closed_form_weights(config.strategy, loss_values, batch.group, state)
    objective = tape.sum(tape.mul(tape.constant(w), losses))
    grads = backward(tape, objective)
    state.theta, _ = optimizer_step(state.theta, _grads_by_name(grads, theta_nodes), state.model_opt, "descend", lr)
    return {"objective": float(tape.value(objective)), "weights": w, "losses": loss_values}


def train_step(state: TrainState, batch: Batch, config: TrainConfig, lr: float) -> dict:
    """Route one batch to the update rule the configuration calls for."""
    if not config.uses_adversary:
        return reweighted_step(state, batch, config, lr)
    if config.adversary_steps == 1:
        return simultaneous_step(state, batch, config, lr)
    return adversary_extra_steps(state, batch, config, lr, config.adversary_steps)


def train_run(
    train: Dataset,
    valid: Dataset | None,
    config: TrainConfig,
    *,
    evaluate: bool = True,
) -> TrainResult:
    """Full training run with periodic snapshots of both players."""
    if config.strategy.kind == "group-dro" and train.num_groups < 1:
        raise ValueError("group-dro needs group ids on the training set")
    state = init_state(config, train.num_groups)
    batches_per_epoch = math.ceil(len(train) / config.batch_size)
    total = batches_per_epoch * config.epochs
    schedule = Schedule("linear" if config.schedule in ("linear", "linear-decay-to-zero") else "constant", total)
    log = CheckpointLog()
    step_log: list[dict] = []
    ckpt_metrics: list[dict] = []
    kind_label = config.strategy.kind if config.strategy.kind != "rpdro" else f"rpdro-{config.strategy.norm_mode}"

    def snapshot():
        log.append(state.step, state.theta, state.psi)
        if evaluate and valid is not None:
            m = evaluate_groups(state.theta, config.model_spec, valid)
            ckpt_metrics.append({"step": state.step, **_flatten_metrics(m)})

    for epoch in range(config.epochs):
        for batch in make_batches(train, config.batch_size, _stream(config.seed, 1000 + epoch)):
            lr = lr_at_step(schedule, config.lr, state.step)
            try:
                info = train_step(state, batch, config, lr)
            except (AutodiffError, ValueError) as exc:
                raise TrainingError(str(exc), state.step) from exc
            if not math.isfinite(info["objective"]):
                raise TrainingError("non-finite objective", state.step)
            state.step += 1
            w = info["weights"]
            kl, entropy = _weight_stats(w)
            step_log.append({
                "step": state.step,
                "epoch": epoch,
                "strategy": kind_label,
                "train_weighted_loss": float(np.dot(w, info["losses"])),
                "kl_term": kl,
                "mean_weight_entropy": entropy,
                "lr": lr,
            })
            if state.step % config.checkpoint_interval == 0:
                snapshot()
    if not log.entries or log.entries[-1].step != state.step:
        snapshot()
    return TrainResult(log, step_log, ckpt_metrics, state)


def _flatten_metrics(m: GroupMetrics) -> dict:
    row = {"robust_accuracy": m.robust_accuracy, "average_accuracy": m.average_accuracy}
    for g, acc in sorted(m.per_group_accuracy.items()):
        row[f"group_{g}_accuracy"] = acc
    return row


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(rows: list[dict], path: str | Path, columns: tuple[str, ...] | None = None) -> None:
    """Deterministic CSV: fixed column order, floats written with ``repr``."""
    if columns is None:
        columns = tuple(rows[0]) if rows else ()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_step_csv(step_log: list[dict], path: str | Path) -> None:
    write_csv(step_log, path, STEP_COLUMNS)

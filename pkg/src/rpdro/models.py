"""Classifier / adversary networks, per-example losses, optimizers and schedules."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .autodiff import AutodiffError, ParamSet, Tape, Tensor

ARCHITECTURES = ("linear", "mlp")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    output_dim: int
    hidden_sizes: tuple[int, ...] = ()
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2")
        if self.architecture == "linear" and self.hidden_sizes:
            raise ValueError("linear models take no hidden sizes")
        if self.architecture == "mlp" and (not self.hidden_sizes or min(self.hidden_sizes) < 1):
            raise ValueError("mlp needs hidden sizes >= 1")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, self.output_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSpec":
        return cls(
            architecture=d["architecture"],
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden_sizes=tuple(d.get("hidden_sizes", ())),
            activation=d.get("activation", "tanh"),
        )

    @classmethod
    def named(cls, name: str, input_dim: int, output_dim: int, activation: str = "tanh") -> "ModelSpec":
        """Build from a short name: ``linear``, ``mlp-2``, ``mlp-4``, ``mlp-16x8`` ..."""
        if name == "linear":
            return cls("linear", input_dim, output_dim)
        if name.startswith("mlp-"):
            hidden = tuple(int(h) for h in name[4:].split("x"))
            return cls("mlp", input_dim, output_dim, hidden, activation)
        raise ValueError(f"unknown model name {name!r}")


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    sizes = spec.layer_sizes
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{layer}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"b{layer}"] = np.zeros(fan_out)
    return params


def _num_layers(spec: ModelSpec) -> int:
    return len(spec.hidden_sizes) + 1


def forward_logits(tape: Tape, spec: ModelSpec, weights: Mapping[str, int], x: int) -> int:
    """Class scores ``[n, output_dim]`` as a tape node.

    ``weights`` maps parameter names to leaf ids (see :meth:`ParamSet.bind`).
    """
    shape = tape.value(x).shape
    if len(shape) != 2 or shape[1] != spec.input_dim:
        raise AutodiffError(f"expected inputs of shape [n, {spec.input_dim}], got {list(shape)}")
    h = x
    last = _num_layers(spec) - 1
    for layer in range(last + 1):
        h = tape.add(tape.matmul(h, weights[f"W{layer}"]), weights[f"b{layer}"])
        if layer < last:
            h = tape.relu(h) if spec.activation == "relu" else tape.tanh(h)
    return h


def predict_logits(params: Mapping[str, Tensor], spec: ModelSpec, X: Tensor) -> Tensor:
    """Tape-free forward pass, for evaluation."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs of shape [n, {spec.input_dim}], got {list(X.shape)}")
    h = X
    last = _num_layers(spec) - 1
    for layer in range(last + 1):
        h = h @ params[f"W{layer}"] + params[f"b{layer}"]
        if layer < last:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    return h


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def nll_per_example(tape: Tape, logits: int, labels) -> int:
    """Softmax cross-entropy per row, as ``logsumexp - selected logit``."""
    labels = _check_labels(labels, tape.value(logits).shape[1])
    return tape.sub(tape.logsumexp(logits, axis=1), tape.select(logits, labels))


def nll_values(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    return lse - logits[np.arange(len(labels)), labels]


def zero_one_per_example(logits: Tensor, labels) -> Tensor:
    """1.0 where the argmax (lowest index on ties) misses the label."""
    logits = np.asarray(logits)
    labels = _check_labels(labels, logits.shape[1])
    return (np.argmax(logits, axis=1) != labels).astype(np.float64)


# ---------------------------------------------------------------------------
# optimizers and schedules
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: dict[str, Tensor] = field(default_factory=dict)
    second: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(
    params: ParamSet,
    grads: Mapping[str, Tensor],
    state: OptimizerState,
    direction: str = "descend",
    lr: float | None = None,
) -> tuple[ParamSet, OptimizerState]:
    """Apply one update; returns new parameters and the (advanced) state."""
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    lr = state.learning_rate if lr is None else lr
    sign = -1.0 if direction == "descend" else 1.0
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {list(g.shape)}, expected {list(p.shape)}")
        if not math.isfinite(g.sum()) and not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name!r}")
    state.step += 1
    new = ParamSet()
    # shapes match by construction, so bypass the ParamSet checks
    put = dict.__setitem__
    if state.kind == "sgd":
        for name, p in params.items():
            put(new, name, p + sign * lr * grads[name])
        return new, state
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.first.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.second.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        state.first[name], state.second[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        put(new, name, p + sign * lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return new, state


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    total_steps: int = 1

    def __post_init__(self):
        if self.kind == "linear-decay-to-zero":
            object.__setattr__(self, "kind", "linear")
        if self.kind not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.kind!r}")


def lr_at_step(schedule: Schedule, base_lr: float, step: int) -> float:
    if step > schedule.total_steps:
        return 0.0
    if schedule.kind == "constant":
        return base_lr
    return base_lr * (1.0 - step / schedule.total_steps)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def params_to_json(params: Mapping[str, Tensor]) -> dict:
    # Python's float repr is the shortest string that round-trips exactly
    return {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.items()}


def params_from_json(obj: Mapping[str, Any]) -> ParamSet:
    return ParamSet(
        {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in obj.items()}
    )


def save_checkpoint(
    path: str | Path,
    spec: ModelSpec,
    params: Mapping[str, Tensor],
    *,
    step: int,
    seed: int,
    strategy: Mapping[str, Any] | None = None,
    adversary_spec: ModelSpec | None = None,
    adversary: Mapping[str, Tensor] | None = None,
) -> None:
    obj = {
        "spec": spec.to_dict(),
        "params": params_to_json(params),
        "step": int(step),
        "seed": int(seed),
        "strategy": dict(strategy) if strategy is not None else None,
    }
    if adversary is not None:
        obj["adversary_spec"] = adversary_spec.to_dict()
        obj["adversary"] = params_to_json(adversary)
    Path(path).write_text(json.dumps(obj))


def load_checkpoint(path: str | Path) -> dict:
    """Returns a dict with ``spec``, ``params`` and optional ``adversary`` keys decoded."""
    obj = json.loads(Path(path).read_text())
    out = dict(obj)
    out["spec"] = ModelSpec.from_dict(obj["spec"])
    out["params"] = params_from_json(obj["params"])
    if obj.get("adversary") is not None:
        out["adversary_spec"] = ModelSpec.from_dict(obj["adversary_spec"])
        out["adversary"] = params_from_json(obj["adversary"])
    return out

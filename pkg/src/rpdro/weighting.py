"""Example reweighting rules.

Tape-based objectives (``rpdro_batch_objective``, ``selfnorm_objective``) are
differentiated jointly in the classifier and adversary parameters. The
nonparametric and group rules return constant weights computed from loss
values, which the trainer multiplies into the per-example losses.

Batch weights always sum to one, so ERM is the uniform vector ``1/n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .autodiff import Tape, Tensor

STRATEGY_KINDS = ("erm", "rpdro", "np-kl", "np-cvar", "np-chi2", "group-dro")

_FIELDS = {
    "erm": (),
    "np-kl": ("kappa",),
    "np-cvar": ("alpha",),
    "np-chi2": ("rho",),
    "group-dro": ("eta_q",),
}

SCORE_CLIP = 30.0


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "erm"
    norm_mode: str = "batch"
    tau: float = 0.1
    beta: float = 1.0
    kappa: float = 1.0
    alpha: float = 0.2
    rho: float = 1.0
    eta_q: float = 0.01

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.norm_mode not in ("batch", "self"):
            raise ValueError(f"norm_mode must be 'batch' or 'self', got {self.norm_mode!r}")
        if self.tau < 0 or self.beta < 0:
            raise ValueError("tau and beta must be >= 0")
        if self.kappa <= 0 or self.rho <= 0 or self.eta_q <= 0:
            raise ValueError("kappa, rho and eta_q must be > 0")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def active_fields(self) -> tuple[str, ...]:
        if self.kind == "rpdro":
            return ("norm_mode", "tau", "beta") if self.norm_mode == "self" else ("norm_mode", "tau")
        return _FIELDS[self.kind]

    def to_json(self) -> dict:
        return {"kind": self.kind, **{f: getattr(self, f) for f in self.active_fields}}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "StrategyConfig":
        kind = obj["kind"]
        cfg = cls(kind=kind, **{k: v for k, v in obj.items() if k != "kind" and k in _ALL_FIELDS})
        extra = set(obj) - {"kind"} - set(cfg.active_fields)
        if extra:
            raise ValueError(f"fields {sorted(extra)} are not used by strategy {kind!r}")
        return cfg


_ALL_FIELDS = ("norm_mode", "tau", "beta", "kappa", "alpha", "rho", "eta_q")


@dataclass(frozen=True)
class BatchWeights:
    weights: Tensor
    kind: str


@dataclass(frozen=True)
class GroupWeights:
    q: Tensor


def uniform_weights(n: int) -> BatchWeights:
    return BatchWeights(np.full(n, 1.0 / n), "erm")


def _kl_to_uniform(w: Tensor) -> float:
    n = len(w)
    pos = w > 0
    return float(np.sum(w[pos] * np.log(n * w[pos])))


# ---------------------------------------------------------------------------
# parametric ratios
# ---------------------------------------------------------------------------


def batch_normalized_weights(tape: Tape, scores: int) -> int:
    """Softmax of adversary scores over the mini-batch."""
    return tape.softmax(scores, axis=0)


def rpdro_batch_objective(tape: Tape, weights: int, losses: int, tau: float) -> int:
    """``sum w*l - tau * sum w log w``; the model descends it, the adversary ascends."""
    weighted = tape.sum(tape.mul(weights, losses))
    if tau == 0:
        return weighted
    return tape.sub(weighted, tape.scale(tape.sum(tape.xlogx(weights)), tau))


def selfnorm_objective(tape: Tape, scores: int, losses: int, beta: float, tau: float) -> int:
    """Unnormalized ratios ``r = exp(s)`` with a squared log-normalizer penalty."""
    clipped = tape.clip(scores, -SCORE_CLIP, SCORE_CLIP)
    r = tape.exp(clipped)
    objective = tape.mean(tape.mul(r, losses))
    if beta:
        penalty = tape.square(tape.log(tape.mean(r)))
        objective = tape.sub(objective, tape.scale(penalty, beta))
    if tau:
        # r log r == r * s for r = exp(s)
        kl = tape.mean(tape.mul(r, clipped))
        objective = tape.sub(objective, tape.scale(kl, tau))
    return objective


# ---------------------------------------------------------------------------
# nonparametric closed forms
# ---------------------------------------------------------------------------


def _tempered(losses: Tensor, temperature: float) -> Tensor:
    z = losses / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def nonparam_kl_weights(losses, kappa: float, tol: float = 1e-6) -> BatchWeights:
    """Most adversarial ``softmax(l / T)`` whose KL to uniform stays within ``kappa``.

    KL decreases monotonically in the temperature, so the boundary
    temperature is found by bisection on ``log T`` over ``[1e-4, 1e4]``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses)
    if np.ptp(losses) == 0:
        return BatchWeights(np.full(n, 1.0 / n), "np-kl")
    lo, hi = math.log(1e-4), math.log(1e4)
    w_lo = _tempered(losses, math.exp(lo))
    if _kl_to_uniform(w_lo) <= kappa:
        return BatchWeights(w_lo, "np-kl")
    w_hi = _tempered(losses, math.exp(hi))
    if _kl_to_uniform(w_hi) > kappa:
        return BatchWeights(np.full(n, 1.0 / n), "np-kl")
    # invariants: KL(lo) > kappa >= KL(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        w_mid = _tempered(losses, math.exp(mid))
        if _kl_to_uniform(w_mid) > kappa:
            lo = mid
        else:
            hi, w_hi = mid, w_mid
        if kappa - _kl_to_uniform(w_hi) <= tol or hi - lo < 1e-13:
            break
    return BatchWeights(w_hi, "np-kl")


def nonparam_cvar_weights(losses, alpha: float) -> BatchWeights:
    """Uniform mass on the worst ``alpha`` fraction, fractional at the boundary."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses)
    capacity = alpha * n
    whole = math.floor(capacity + 1e-12)
    if whole >= n:
        return BatchWeights(np.full(n, 1.0 / n), "np-cvar")
    order = np.argsort(-losses, kind="stable")
    w = np.zeros(n)
    w[order[:whole]] = 1.0 / capacity
    remainder = capacity - whole
    if whole < n and remainder > 1e-12:
        w[order[whole]] = remainder / capacity
    return BatchWeights(w / w.sum(), "np-cvar")


def chi2_divergence(q: Tensor) -> float:
    """``(1/2n) * sum (n q - 1)^2``, the divergence from uniform."""
    q = np.asarray(q, dtype=np.float64)
    n = len(q)
    return float(np.sum((n * q - 1.0) ** 2) / (2 * n))


def _chi2_q(losses: Tensor, eta: float) -> Tensor:
    q = np.maximum(losses - eta, 0.0)
    return q / q.sum()


def nonparam_chi2_weights(losses, rho: float, tol: float = 1e-6) -> BatchWeights:
    """Maximize ``sum q l`` over the simplex inside the chi-square ball of radius ``rho``.

    The optimum has the form ``q ∝ max(l - eta, 0)``; the divergence grows
    with ``eta`` and ``eta`` is bisected until it meets the radius (or the
    vertex solution, if that already lies inside the ball).
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses)
    top = losses.max()
    if np.ptp(losses) == 0:
        return BatchWeights(np.full(n, 1.0 / n), "np-chi2")
    vertex = (losses == top).astype(np.float64)
    vertex /= vertex.sum()
    if chi2_divergence(vertex) <= rho:
        return BatchWeights(vertex, "np-chi2")
    span = top - losses.min()
    lo = losses.min() - span
    while chi2_divergence(_chi2_q(losses, lo)) > rho:
        lo -= 2 * (top - lo)
    hi = top
    q_lo = _chi2_q(losses, lo)
    # invariants: D(lo) <= rho < D(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        q_mid = _chi2_q(losses, mid)
        if chi2_divergence(q_mid) <= rho:
            lo, q_lo = mid, q_mid
        else:
            hi = mid
        if rho - chi2_divergence(q_lo) <= tol or hi - lo < 1e-14 * max(1.0, abs(hi)):
            break
    return BatchWeights(q_lo, "np-chi2")


# ---------------------------------------------------------------------------
# group DRO
# ---------------------------------------------------------------------------


def group_mean_losses(losses, groups, num_groups: int) -> tuple[Tensor, Tensor]:
    """Per-group mean loss and counts; absent groups get loss 0."""
    losses = np.asarray(losses, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    counts = np.bincount(groups, minlength=num_groups).astype(np.float64)
    sums = np.bincount(groups, weights=losses, minlength=num_groups)
    means = np.divide(sums, counts, out=np.zeros(num_groups), where=counts > 0)
    return means, counts


def groupdro_reweight(q: GroupWeights, group_losses, eta_q: float) -> GroupWeights:
    """Exponentiated-gradient step on the group distribution."""
    gl = np.asarray(group_losses, dtype=np.float64)
    logits = np.log(np.maximum(q.q, 1e-300)) + eta_q * gl
    logits -= logits[q.q > 0].max() if np.any(q.q > 0) else 0.0
    new = np.where(q.q > 0, np.exp(logits), 0.0)
    return GroupWeights(new / new.sum())


def group_example_weights(q: GroupWeights, groups) -> BatchWeights:
    """Spread each group's mass evenly over its members in the batch."""
    groups = np.asarray(groups, dtype=np.int64)
    n = len(groups)
    counts = np.bincount(groups, minlength=len(q.q)).astype(np.float64)
    freq = counts[groups] / n
    w = q.q[groups] / (n * freq)
    total = w.sum()
    if total <= 0:
        return BatchWeights(np.full(n, 1.0 / n), "group-dro")
    return BatchWeights(w / total, "group-dro")


# ---------------------------------------------------------------------------
# validation-time ratio statistics
# ---------------------------------------------------------------------------


def kl_estimate_mean1(ratios) -> float:
    """``mean(r log r)`` for ratios normalized to mean one."""
    r = np.asarray(ratios, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("ratios must be nonnegative")
    if abs(r.mean() - 1.0) > 1e-9:
        raise ValueError(f"ratios must have mean 1, got {r.mean()!r}")
    pos = r > 0
    return float(np.sum(r[pos] * np.log(r[pos])) / len(r))

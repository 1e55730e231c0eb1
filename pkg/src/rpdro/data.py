"""Synthetic datasets with known group structure, label noise and JSONL I/O."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of ``(x, y, group, domain)`` rows, stored column-wise."""

    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    domain: np.ndarray
    num_classes: int
    num_groups: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DataFormatError("features must form an [n, d] array")
        n = X.shape[0]
        cols = {}
        for name in ("y", "group", "domain"):
            col = np.array(getattr(self, name), dtype=np.int64)
            if col.shape != (n,):
                raise DataFormatError(f"{name} must have length {n}")
            cols[name] = col
        if not np.all(np.isfinite(X)):
            raise DataFormatError("features must be finite")
        if n and (cols["y"].min() < 0 or cols["y"].max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")
        if n and (cols["group"].min() < 0 or cols["group"].max() >= self.num_groups):
            raise DataFormatError(f"group ids must lie in [0, {self.num_groups})")
        if n and cols["domain"].min() < 0:
            raise DataFormatError("domain ids must be >= 0")
        for arr in (X, *cols.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        for name, col in cols.items():
            object.__setattr__(self, name, col)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices, **metadata) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            group=self.group[idx],
            domain=self.domain[idx],
            metadata={**self.metadata, **metadata},
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.group, other.group)
            and np.array_equal(self.domain, other.domain)
            and self.num_classes == other.num_classes
            and self.num_groups == other.num_groups
        )


def _sign(y: np.ndarray) -> np.ndarray:
    return np.where(y == 1, 1.0, -1.0)


def gen_two_domain(n: int, minority_frac: float = 0.05, sigma: float = 0.3, seed: int = 0) -> Dataset:
    """Binary task with a majority and a minority domain whose class means disagree.

    Majority class means sit at ``±(1, 0)`` and minority ones at
    ``±(-0.5, 1)``, so the classifier ``w = (1, 0)`` that suits the majority
    misclassifies the minority.
    """
    if not 0 < minority_frac < 0.5:
        raise ValueError("minority_frac must lie in (0, 0.5)")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    small = n < 20 / minority_frac
    if small:
        warnings.warn(f"n={n} is small for minority_frac={minority_frac}; the minority may be nearly empty")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    domain = (rng.random(n) < minority_frac).astype(np.int64)
    means = np.where(domain[:, None] == 1, np.array([-0.5, 1.0]), np.array([1.0, 0.0]))
    X = _sign(y)[:, None] * means + sigma * rng.standard_normal((n, 2))
    meta = {
        "generator": "toy2domain",
        "n": n,
        "minority_frac": minority_frac,
        "sigma": sigma,
        "seed": seed,
        "small_sample_warning": small,
    }
    return Dataset(X, y, domain, domain, num_classes=2, num_groups=2, metadata=meta)


def gen_spurious(
    n: int,
    bias_rate: float = 0.95,
    d: int = 20,
    signal: float = 0.5,
    distractor_amp: float = 2.0,
    seed: int = 0,
    direction_seed: int = 12345,
) -> Dataset:
    """Weak true signal plus a strong distractor coordinate correlated with the label.

    Group ``2*y + b`` with ``b`` the distractor bit; groups with ``b != y``
    are the minorities when ``bias_rate`` is high. The signal direction is
    drawn from ``direction_seed`` so that train and test splits generated
    with different ``seed`` share it.
    """
    if not 0.5 <= bias_rate <= 1:
        raise ValueError("bias_rate must lie in [0.5, 1]")
    if d < 2:
        raise ValueError("d must be >= 2")
    v = np.random.default_rng(direction_seed).standard_normal(d - 1)
    v /= np.linalg.norm(v)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    agree = rng.random(n) < bias_rate
    b = np.where(agree, y, 1 - y)
    X = np.empty((n, d))
    X[:, : d - 1] = (_sign(y) * signal)[:, None] * v + rng.standard_normal((n, d - 1))
    X[:, d - 1] = b * distractor_amp + 0.01 * rng.standard_normal(n)
    group = 2 * y + b
    meta = {
        "generator": "spurious",
        "n": n,
        "bias_rate": bias_rate,
        "d": d,
        "signal": signal,
        "distractor_amp": distractor_amp,
        "seed": seed,
        "direction_seed": direction_seed,
    }
    return Dataset(X, y, group, group, num_classes=2, num_groups=4, metadata=meta)


def inject_label_noise(dataset: Dataset, p_noise: float, seed: int) -> Dataset:
    """Redraw each label uniformly (possibly to itself) with probability ``p_noise``."""
    if not 0 <= p_noise <= 1:
        raise ValueError("p_noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    hit = rng.random(n) < p_noise
    redraw = rng.integers(0, dataset.num_classes, size=n)
    y = np.where(hit, redraw, dataset.y)
    meta = {**dataset.metadata, "p_noise": p_noise, "noise_seed": seed}
    return replace(dataset, y=y, metadata=meta)


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Seeded shuffle followed by contiguous slices."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.floor(np.cumsum([0.0, *fractions]) * n + 1e-9).astype(int)
    bounds[-1] = n
    parts = []
    for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        if b <= a:
            raise ValueError(f"split {k} would be empty")
        parts.append(dataset.subset(order[a:b], split_seed=seed, split_index=k))
    return parts


# ---------------------------------------------------------------------------
# JSON Lines
# ---------------------------------------------------------------------------


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    header = {
        "metadata": dataset.metadata,
        "feature_dim": dataset.feature_dim,
        "num_classes": dataset.num_classes,
        "num_groups": dataset.num_groups,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for x, y, g, dom in zip(dataset.X.tolist(), dataset.y.tolist(), dataset.group.tolist(), dataset.domain.tolist()):
            fh.write(json.dumps({"x": x, "y": y, "group": g, "domain": dom}) + "\n")


def load_jsonl(path: str | Path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError("no metadata header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"line 0: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or "feature_dim" not in header:
        raise DataFormatError("no metadata header")
    dim = int(header["feature_dim"])
    xs, ys, gs, ds = [], [], [], []
    # the header is line 0
    for lineno, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        for key in ("x", "y", "group", "domain"):
            if key not in row:
                raise DataFormatError(f"line {lineno}: missing field {key!r}")
        if len(row["x"]) != dim:
            raise DataFormatError(f"line {lineno}: feature_dim {len(row['x'])} != {dim}")
        xs.append(row["x"])
        ys.append(row["y"])
        gs.append(row["group"])
        ds.append(row["domain"])
    X = np.array(xs, dtype=np.float64).reshape(len(xs), dim)
    try:
        return Dataset(
            X, ys, gs, ds,
            num_classes=int(header["num_classes"]),
            num_groups=int(header["num_groups"]),
            metadata=header.get("metadata", {}),
        )
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None

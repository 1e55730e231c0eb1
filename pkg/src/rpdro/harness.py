"""Experiment orchestration: single runs, seed replicates, grids, figure data."""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data import Dataset, gen_spurious, gen_two_domain, inject_label_noise, load_jsonl
from .metrics import GroupMetrics, evaluate_groups
from .models import ModelSpec, save_checkpoint
from .selection import LOG10, select_checkpoint
from .training import TrainConfig, train_run, write_csv, write_step_csv
from .weighting import StrategyConfig

METHODS = ("erm", "rpdro", "np-kl", "np-cvar", "np-chi2", "group-dro", "oracle-dro")
CRITERIA = ("minmax", "oracle", "average", "final")
FIGURES = ("noise", "noise-groups", "adv-steps", "selfnorm-beta", "batch-size", "trajectories")
TOY_EPOCHS = 300
SPURIOUS_EPOCHS = 30
TOY_MLP_ADVERSARY_LR = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run, flat so grid axes can name any field."""

    task: str = "spurious"
    n_train: int = 2000
    n_valid: int = 1000
    n_test: int = 2000
    data_seed: int = 0
    minority_frac: float = 0.05
    sigma: float = 0.3
    bias_rate: float = 0.95
    test_bias_rate: float = 0.5
    p_noise: float = 0.0
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None

    method: str = "erm"
    norm: str = "batch"
    tau: float = 0.1
    beta: float = 1.0
    kappa: float = 1.0
    alpha: float = 0.2
    rho: float = 1.0
    eta_q: float = 0.01

    model: str = "linear"
    adversary: str = "linear"
    activation: str = "tanh"
    optimizer: str = "sgd"
    lr: float = 0.1
    adversary_optimizer: str | None = None
    adversary_lr: float | None = None
    schedule: str = "constant"
    batch_size: int = 32
    epochs: int | None = None
    adversary_steps: int = 1
    ckpt_interval: int = 100

    criterion: str = "minmax"
    kl_threshold: float = LOG10
    selection_loss: str = "zero-one"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.task not in ("toy2domain", "spurious"):
            raise ValueError(f"unknown task {self.task!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown experiment fields {sorted(unknown)}")
        return cls(**obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def strategy(self) -> StrategyConfig:
        kind = "group-dro" if self.method == "oracle-dro" else self.method
        return StrategyConfig(kind, self.norm, self.tau, self.beta, self.kappa, self.alpha, self.rho, self.eta_q)

    def resolved(self) -> "ExperimentConfig":
        """Copy with task-dependent defaults filled in.

        Toy runs train for 300 epochs and give MLP adversaries adam at 1e-3;
        spurious runs default to 30 epochs. Explicit values are kept.
        """
        toy = self.task == "toy2domain"
        changes = {}
        if self.epochs is None:
            changes["epochs"] = TOY_EPOCHS if toy else SPURIOUS_EPOCHS
        if toy and self.adversary != "linear" and self.adversary_optimizer is None:
            changes["adversary_optimizer"] = "adam"
            if self.adversary_lr is None:
                changes["adversary_lr"] = TOY_MLP_ADVERSARY_LR
        return replace(self, **changes) if changes else self

    def train_config(self, input_dim: int, num_classes: int) -> TrainConfig:
        if self is not (full := self.resolved()):
            return full.train_config(input_dim, num_classes)
        model = ModelSpec.named(self.model, input_dim, num_classes, self.activation)
        adversary = ModelSpec.named(self.adversary, input_dim, num_classes, self.activation)
        return TrainConfig(
            strategy=self.strategy(),
            model_spec=model,
            adversary_spec=adversary if self.method == "rpdro" else None,
            optimizer=self.optimizer,
            lr=self.lr,
            schedule=self.schedule,
            batch_size=self.batch_size,
            epochs=self.epochs,
            adversary_steps=self.adversary_steps,
            checkpoint_interval=self.ckpt_interval,
            seed=self.seed,
            adversary_optimizer=self.adversary_optimizer,
            adversary_lr=self.adversary_lr,
        )


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Train (with label noise applied), validation and test sets."""
    if cfg.train_path:
        if not (cfg.valid_path and cfg.test_path):
            raise ValueError("train_path requires valid_path and test_path")
        train, valid, test = (load_jsonl(p) for p in (cfg.train_path, cfg.valid_path, cfg.test_path))
    elif cfg.task == "toy2domain":
        s = cfg.data_seed
        train = gen_two_domain(cfg.n_train, cfg.minority_frac, cfg.sigma, seed=3 * s)
        valid = gen_two_domain(cfg.n_valid, cfg.minority_frac, cfg.sigma, seed=3 * s + 1)
        test = gen_two_domain(cfg.n_test, cfg.minority_frac, cfg.sigma, seed=3 * s + 2)
    else:
        s = cfg.data_seed
        train = gen_spurious(cfg.n_train, cfg.bias_rate, seed=3 * s)
        valid = gen_spurious(cfg.n_valid, cfg.bias_rate, seed=3 * s + 1)
        test = gen_spurious(cfg.n_test, cfg.test_bias_rate, seed=3 * s + 2)
    if cfg.p_noise > 0:
        train = inject_label_noise(train, cfg.p_noise, seed=10_000 + cfg.data_seed)
    return train, valid, test


def training_view(train: Dataset, method: str) -> Dataset:
    """``group-dro`` trains on the domain column (pseudo-groups); ``oracle-dro`` on true groups."""
    if method != "group-dro":
        return train
    return replace(train, group=train.domain, num_groups=int(train.domain.max()) + 1)


@dataclass
class RunRecord:
    config: dict
    seed: int
    criterion: str
    selected_step: int
    test: dict
    valid: dict
    trajectory: list[dict] = field(default_factory=list)
    test_trajectory: list[dict] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def robust_accuracy(self) -> float:
        return self.test["robust_accuracy"]

    @property
    def average_accuracy(self) -> float:
        return self.test["average_accuracy"]


def _metrics_row(step: int, m: GroupMetrics) -> dict:
    row = {"step": step, "robust_accuracy": m.robust_accuracy, "average_accuracy": m.average_accuracy}
    for g, acc in sorted(m.per_group_accuracy.items()):
        row[f"group_{g}_accuracy"] = acc
    return row


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   *, save_checkpoints: bool = False) -> RunRecord:
    """Train, select a checkpoint and evaluate it on the test set.

    With ``out_dir`` the run's artifacts go to ``out_dir/<method>-<hash>``;
    a ``FAILED`` marker is left there if anything raises.
    """
    started = time.perf_counter()
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir) / f"{cfg.method}-{cfg.digest()[:12]}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        (run_dir / "FAILED").unlink(missing_ok=True)
    try:
        train, valid, test = build_datasets(cfg)
        tcfg = cfg.train_config(train.feature_dim, train.num_classes)
        result = train_run(training_view(train, cfg.method), valid, tcfg)
        ckpts = result.checkpoints
        if cfg.criterion == "final":
            index = len(ckpts) - 1
            report = {"criterion": "final", "selected_index": index, "selected_step": ckpts[index].step}
        else:
            report = select_checkpoint(
                ckpts, tcfg.model_spec, valid, cfg.criterion,
                strategy=tcfg.strategy, adversary_spec=tcfg.adversary_spec,
                kl_threshold=cfg.kl_threshold, loss_kind=cfg.selection_loss,
            )
        chosen = ckpts[report["selected_index"]]
        test_metrics = evaluate_groups(chosen.model, tcfg.model_spec, test)
        valid_metrics = evaluate_groups(chosen.model, tcfg.model_spec, valid)
        test_traj = [_metrics_row(c.step, evaluate_groups(c.model, tcfg.model_spec, test)) for c in ckpts]
        record = RunRecord(
            config=cfg.to_json(),
            seed=cfg.seed,
            criterion=cfg.criterion,
            selected_step=chosen.step,
            test=test_metrics.to_json(),
            valid=valid_metrics.to_json(),
            trajectory=result.checkpoint_metrics,
            test_trajectory=test_traj,
        )
    except Exception as exc:
        if run_dir is not None:
            (run_dir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    record.wall_clock_seconds = time.perf_counter() - started
    if run_dir is not None:
        write_step_csv(result.step_log, run_dir / "steps.csv")
        write_csv(result.checkpoint_metrics, run_dir / "checkpoints.csv")
        (run_dir / "selection.json").write_text(json.dumps(report, indent=1))
        save_checkpoint(run_dir / "model.json", tcfg.model_spec, chosen.model, step=chosen.step,
                        seed=cfg.seed, strategy=tcfg.strategy.to_json())
        if save_checkpoints:
            ck_dir = run_dir / "checkpoints"
            ck_dir.mkdir(exist_ok=True)
            for c in ckpts:
                save_checkpoint(ck_dir / f"step_{c.step:08d}.json", tcfg.model_spec, c.model, step=c.step,
                                seed=cfg.seed, strategy=tcfg.strategy.to_json(),
                                adversary_spec=tcfg.adversary_spec, adversary=c.adversary)
        (run_dir / "record.json").write_text(json.dumps(record.to_json(), indent=1))
    return record


def run_seeds(cfg: ExperimentConfig, seeds: Iterable[int], workers: int = 1) -> list[RunRecord]:
    configs = [replace(cfg, seed=s) for s in seeds]
    return _map(run_experiment, configs, workers)


def _map(fn, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepGrid:
    base: ExperimentConfig
    axes: dict[str, list]
    seeds: list[int]

    def __post_init__(self):
        names = {f.name for f in fields(ExperimentConfig)}
        for axis in self.axes:
            if axis not in names:
                raise ValueError(f"unknown sweep axis {axis!r}")
            if axis == "seed":
                raise ValueError("seeds are given separately, not as an axis")
        if not self.seeds:
            raise ValueError("a sweep needs at least one seed")

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, values)) for values in itertools.product(*(self.axes[n] for n in names))]

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "SweepGrid":
        return cls(ExperimentConfig.from_json(obj.get("base", {})), dict(obj.get("axes", {})),
                   list(obj.get("seeds", [0])))

    def to_json(self) -> dict:
        return {"base": self.base.to_json(), "axes": self.axes, "seeds": self.seeds}


def _sweep_job(job: tuple) -> dict:
    cell_index, seed, cfg, out_dir = job
    try:
        rec = run_experiment(cfg, out_dir).to_json()
        return {"cell": cell_index, "seed": seed, "status": "ok", "record": rec}
    except Exception as exc:
        return {"cell": cell_index, "seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


SWEEP_METRICS = ("robust_accuracy", "average_accuracy")


def run_sweep(grid: SweepGrid, out_dir: str | Path | None = None, workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Run every (cell, seed) pair; returns (raw rows, aggregate rows).

    When ``out_dir`` is given, ``sweep.csv`` holds raw rows followed by one
    aggregate (mean/std) row per cell. Rows are ordered by cell then seed
    regardless of completion order.
    """
    runs_dir = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        runs_dir = str(Path(out_dir) / "runs")
    jobs = []
    cells = grid.cells()
    for ci, cell in enumerate(cells):
        for seed in grid.seeds:
            jobs.append((ci, seed, replace(grid.base, **cell, seed=seed), runs_dir))
    results = _map(_sweep_job, jobs, workers)
    results.sort(key=lambda r: (r["cell"], grid.seeds.index(r["seed"])))
    axis_names = list(grid.axes)
    raw, agg = [], []
    for res in results:
        row = {"kind": "run", "cell": res["cell"], "seed": res["seed"], "status": res["status"],
               **cells[res["cell"]]}
        if res["status"] == "ok":
            rec = res["record"]
            row.update({
                "robust_accuracy": rec["test"]["robust_accuracy"],
                "average_accuracy": rec["test"]["average_accuracy"],
                "selected_step": rec["selected_step"],
            })
        raw.append(row)
    for ci, cell in enumerate(cells):
        ok = [r for r in raw if r["cell"] == ci and r["status"] == "ok"]
        row = {"kind": "aggregate", "cell": ci, "seed": "", "status": "ok" if ok else "failed", **cell,
               "n": len(ok)}
        for metric in SWEEP_METRICS:
            vals = np.array([r[metric] for r in ok])
            row[metric] = float(vals.mean()) if ok else ""
            row[f"{metric}_std"] = float(vals.std()) if ok else ""
        agg.append(row)
    if out_dir is not None:
        columns = ("kind", "cell", "seed", "status", *axis_names, "robust_accuracy", "average_accuracy",
                   "robust_accuracy_std", "average_accuracy_std", "n", "selected_step")
        write_csv(raw + agg, Path(out_dir) / "sweep.csv", columns)
        (Path(out_dir) / "grid.json").write_text(json.dumps(grid.to_json(), indent=1, sort_keys=True))
    return raw, agg


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

_FIGURE_AXIS = {
    "noise": "p_noise",
    "noise-groups": "p_noise",
    "adv-steps": "adversary_steps",
    "selfnorm-beta": "beta",
    "batch-size": "batch_size",
    "trajectories": "step",
}


def _method_label(cfg: Mapping[str, Any], figure: str) -> str:
    method = cfg["method"]
    if figure == "adv-steps":
        return cfg["adversary"]
    if figure == "trajectories":
        return f"{cfg['adversary']}/k={cfg['adversary_steps']}"
    if method == "rpdro":
        return f"rpdro-{cfg['norm']}"
    return method


def load_records(runs_dir: str | Path) -> list[dict]:
    """All ``record.json`` files below ``runs_dir``, in a stable order."""
    recs = [json.loads(p.read_text()) for p in sorted(Path(runs_dir).rglob("record.json"))]
    recs.sort(key=lambda r: (json.dumps(r["config"], sort_keys=True), r["seed"]))
    return recs


def figure_rows(records: Sequence[Mapping[str, Any]], figure: str) -> tuple[str, list[dict]]:
    """Long-format rows ``(axis, method, seed, metric, value)`` for one figure."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure kind {figure!r}")
    axis = _FIGURE_AXIS[figure]
    rows = []
    for rec in records:
        rec = rec.to_json() if isinstance(rec, RunRecord) else rec
        cfg = rec["config"]
        method = _method_label(cfg, figure)
        if figure == "trajectories":
            traj = rec.get("test_trajectory") or rec.get("trajectory")
            if not traj:
                raise ValueError("records lack the 'step' axis (no trajectory data)")
            for point in traj:
                for key in sorted(k for k in point if k.startswith("group_")):
                    rows.append({axis: point["step"], "method": method, "seed": rec["seed"],
                                 "metric": key.replace("group_", "domain_"), "value": point[key]})
            continue
        if axis not in cfg:
            raise ValueError(f"records lack the {axis!r} axis")
        base = {axis: cfg[axis], "method": method, "seed": rec["seed"]}
        test = rec["test"]
        if figure == "noise-groups":
            for g, acc in sorted(test["per_group_accuracy"].items(), key=lambda kv: int(kv[0])):
                rows.append({**base, "metric": f"group_{g}_acc", "value": acc})
        else:
            rows.append({**base, "metric": "robust_acc", "value": test["robust_accuracy"]})
            rows.append({**base, "metric": "average_acc", "value": test["average_accuracy"]})
    return axis, rows


def emit_figure_csv(records: Sequence[Mapping[str, Any]], figure: str, path: str | Path) -> None:
    axis, rows = figure_rows(records, figure)
    write_csv(rows, path, (axis, "method", "seed", "metric", "value"))


def summarize(records: Sequence[RunRecord], metric: str = "robust_accuracy") -> tuple[float, float]:
    vals = np.array([getattr(r, metric) for r in records])
    return float(vals.mean()), float(vals.std())

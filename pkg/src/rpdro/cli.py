"""Command line entry point (``rpdro``).

Exit status: 0 on success, 1 on invalid input, 2 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import DataFormatError, gen_spurious, gen_two_domain, inject_label_noise, load_jsonl, save_jsonl
from .harness import FIGURES, METHODS, SweepGrid, emit_figure_csv, load_records, run_sweep, training_view
from .metrics import evaluate_groups
from .models import load_checkpoint, save_checkpoint
from .selection import LOG10, select_checkpoint
from .training import Checkpoint, TrainingError, train_run, write_csv, write_step_csv
from .harness import ExperimentConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def cmd_gen(args) -> None:
    if args.kind == "toy2domain":
        ds = gen_two_domain(args.n, args.minority_frac, args.sigma, seed=args.seed)
    else:
        ds = gen_spurious(args.n, args.bias_rate, d=args.d, seed=args.seed)
    save_jsonl(ds, args.out)


def cmd_noise(args) -> None:
    save_jsonl(inject_label_noise(load_jsonl(args.inp), args.p, args.seed), args.out)


def _experiment_from_args(args, train) -> ExperimentConfig:
    task = "toy2domain" if train.metadata.get("generator") == "toy2domain" else "spurious"
    return ExperimentConfig(
        task=task, method=args.method, norm=args.norm, tau=args.tau, beta=args.beta, kappa=args.kappa,
        alpha=args.alpha, rho=args.rho, eta_q=args.eta_q, model=args.model, adversary=args.adversary,
        optimizer=args.optimizer, lr=args.lr, adversary_optimizer=args.adv_optimizer, adversary_lr=args.adv_lr,
        schedule=args.schedule, batch_size=args.batch_size, epochs=args.epochs,
        adversary_steps=args.adv_steps, ckpt_interval=args.ckpt_interval, seed=args.seed,
    )


def cmd_train(args) -> None:
    train = load_jsonl(args.train)
    valid = load_jsonl(args.valid)
    exp = _experiment_from_args(args, train)
    cfg = exp.train_config(train.feature_dim, train.num_classes)
    out = Path(args.out)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    result = train_run(training_view(train, args.method), valid, cfg)
    write_step_csv(result.step_log, out / "steps.csv")
    write_csv(result.checkpoint_metrics, out / "checkpoints.csv")
    for c in result.checkpoints:
        save_checkpoint(ck_dir / f"step_{c.step:08d}.json", cfg.model_spec, c.model, step=c.step,
                        seed=cfg.seed, strategy=cfg.strategy.to_json(),
                        adversary_spec=cfg.adversary_spec, adversary=c.adversary)


def cmd_select(args) -> None:
    from .weighting import StrategyConfig

    files = sorted(Path(args.ckpt_dir).glob("step_*.json"))
    if not files:
        raise DataFormatError(f"no checkpoints found in {args.ckpt_dir}")
    loaded = [load_checkpoint(f) for f in files]
    loaded.sort(key=lambda c: c["step"])
    entries = [Checkpoint(c["step"], c["params"], c.get("adversary")) for c in loaded]
    strategy = StrategyConfig.from_json(loaded[0]["strategy"]) if loaded[0].get("strategy") else None
    report = select_checkpoint(
        entries, loaded[0]["spec"], load_jsonl(args.valid), args.criterion,
        strategy=strategy, adversary_spec=loaded[0].get("adversary_spec"),
        kl_threshold=args.kl_threshold, loss_kind=args.loss,
    )
    report["selected_checkpoint"] = str(files[[c["step"] for c in loaded].index(report["selected_step"])])
    Path(args.out).write_text(json.dumps(report, indent=1))


def cmd_eval(args) -> None:
    ck = load_checkpoint(args.model)
    metrics = evaluate_groups(ck["params"], ck["spec"], load_jsonl(args.data))
    Path(args.out).write_text(json.dumps({"step": ck["step"], **metrics.to_json()}, indent=1))


def cmd_sweep(args) -> None:
    grid = SweepGrid.from_json(json.loads(Path(args.grid).read_text()))
    raw, _ = run_sweep(grid, args.out, workers=args.workers)
    if any(r["status"] != "ok" for r in raw):
        print("some sweep cells failed; see sweep.csv", file=sys.stderr)


def cmd_report(args) -> None:
    records = load_records(args.runs)
    if not records:
        raise DataFormatError(f"no run records under {args.runs}")
    emit_figure_csv(records, args.figure, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rpdro", description="Distributionally robust training with parametric likelihood ratios.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--kind", choices=("toy2domain", "spurious"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--bias-rate", type=float, default=0.95)
    g.add_argument("--minority-frac", type=float, default=0.05)
    g.add_argument("--sigma", type=float, default=0.3)
    g.add_argument("--d", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    n = sub.add_parser("noise", help="inject label noise")
    n.add_argument("--in", dest="inp", required=True)
    n.add_argument("--p", type=float, required=True)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", required=True)
    n.set_defaults(fn=cmd_noise)

    t = sub.add_parser("train", help="train and checkpoint a model")
    t.add_argument("--train", required=True)
    t.add_argument("--valid", required=True)
    t.add_argument("--method", choices=METHODS, default="rpdro")
    t.add_argument("--norm", choices=("batch", "self"), default="batch")
    t.add_argument("--tau", type=float, default=0.1)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--kappa", type=float, default=1.0)
    t.add_argument("--alpha", type=float, default=0.2)
    t.add_argument("--rho", type=float, default=1.0)
    t.add_argument("--eta-q", type=float, default=0.01)
    t.add_argument("--model", default="linear")
    t.add_argument("--adversary", default="linear")
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--epochs", type=int, default=None, help="default: 300 on toy2domain data, 30 otherwise")
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--adv-optimizer", choices=("sgd", "adam"), default=None)
    t.add_argument("--adv-lr", type=float, default=None)
    t.add_argument("--schedule", choices=("constant", "linear"), default="constant")
    t.add_argument("--adv-steps", type=int, default=1)
    t.add_argument("--ckpt-interval", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("select", help="choose a checkpoint")
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--valid", required=True)
    s.add_argument("--criterion", choices=("minmax", "oracle", "average"), default="minmax")
    s.add_argument("--kl-threshold", type=float, default=LOG10)
    s.add_argument("--loss", choices=("zero-one", "nll"), default="zero-one")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_select)

    e = sub.add_parser("eval", help="group-wise accuracy of a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    w = sub.add_parser("sweep", help="run a hyper-parameter grid")
    w.add_argument("--grid", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--workers", type=int, default=1)
    w.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("report", help="emit figure data from run records")
    r.add_argument("--runs", required=True)
    r.add_argument("--figure", choices=FIGURES, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"rpdro: error: {exc}", file=sys.stderr)
        return 1
    try:
        args.fn(args)
    except TrainingError as exc:
        print(f"rpdro: run failed: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DataFormatError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"rpdro: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"rpdro: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

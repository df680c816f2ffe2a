"""Command-line entry point: synth, split, train, eval, gradcheck, sweep-epsilon.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
Every command writes a run.json provenance record (resolved arguments, seed,
version string) into its output directory.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from . import corpus, metrics, model, objective, trainer
from .errors import ConfigError, DataError, NumericalError

DEFAULT_EPSILON_GRID = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6)


def _version() -> str:
    try:
        from importlib.metadata import version

        base = version("coheat")
    except Exception:
        base = "0.1.0"
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{base}+g{out.stdout.strip()}"
    except Exception:
        pass
    return base


def _write_run_record(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": _version(), **payload}
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


_CONFIG_FLAGS = (
    ("--d", "d", int),
    ("--K", "K", int),
    ("--learning-rate", "learning_rate", float),
    ("--lambda1", "lambda1", float),
    ("--lambda2", "lambda2", float),
    ("--epsilon", "epsilon", float),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--edge-dropout-rate", "edge_dropout_rate", float),
    ("--seed", "seed", int),
    ("--variant", "variant", str),
    ("--l2-form", "l2_form", str),
    ("--dropout-scope", "dropout_scope", str),
    ("--candidate-policy", "candidate_policy", str),
    ("--eval-k", "eval_k", int),
)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    for flag, dest, typ in _CONFIG_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None)


def _resolve_config(args: argparse.Namespace) -> trainer.TrainConfig:
    overrides = {dest: getattr(args, dest) for _, dest, _ in _CONFIG_FLAGS}
    return trainer.TrainConfig.from_sources(args.config, overrides)


def _load_split(args: argparse.Namespace, data: corpus.DatasetBundle) -> corpus.ScenarioSplit:
    return corpus.load_split(args.split_dir, args.scenario, data.u_count, data.b_count)


def cmd_synth(args: argparse.Namespace) -> int:
    data = corpus.gen_synthetic(
        args.users, args.bundles, args.items, args.zipf, args.interactions, args.seed
    )
    out_dir = Path(args.out_dir)
    corpus.save_dataset(data, out_dir)
    _write_run_record(
        out_dir, "synth",
        {
            "users": args.users, "bundles": args.bundles, "items": args.items,
            "zipf": args.zipf, "interactions": args.interactions, "seed": args.seed,
        },
    )
    print(f"synthetic dataset written to {out_dir} ({len(data.ub)} ub pairs)")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3:
        raise ConfigError(f"--ratios needs three comma-separated numbers, got {args.ratios!r}")
    data = corpus.load_dataset(args.dataset_dir)
    split = corpus.split_scenario(data, args.scenario, ratios, args.seed)
    out_dir = Path(args.out_dir)
    corpus.save_split(split, out_dir)
    _write_run_record(
        out_dir, "split",
        {
            "dataset_dir": str(args.dataset_dir), "scenario": args.scenario,
            "ratios": list(ratios), "seed": args.seed,
        },
    )
    print(
        f"{args.scenario} split: train={len(split.train)} val={len(split.val)} "
        f"test={len(split.test)} cold_bundles={split.cold_bundles.size}"
    )
    return 0


def _train_once(
    data: corpus.DatasetBundle, split: corpus.ScenarioSplit, config: trainer.TrainConfig
) -> tuple[model.ModelParams, trainer.TrainHistory]:
    return trainer.train(data, split, config)


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    data = corpus.load_dataset(args.dataset_dir)
    split = _load_split(args, data)
    out_dir = Path(args.out_dir)
    _write_run_record(
        out_dir, "train",
        {
            "dataset_dir": str(args.dataset_dir), "split_dir": str(args.split_dir),
            "scenario": args.scenario, "seed": config.seed, "config": config.to_dict(),
        },
    )
    params, history = _train_once(data, split, config)
    model.save_checkpoint(params, out_dir / "best.ckpt")
    history.to_csv(out_dir / "history.csv")
    best = history.best_epoch
    if history.records:
        rec = history.records[best - 1]
        print(f"best epoch {best}: val_recall{config.eval_k}={rec.val_recall:.4f} val_ndcg{config.eval_k}={rec.val_ndcg:.4f}")
    else:
        print("no epochs run; initialized parameters saved")
    return 0


def _evaluate_checkpoint(
    data: corpus.DatasetBundle,
    split: corpus.ScenarioSplit,
    params: model.ModelParams,
    config: trainer.TrainConfig,
    partition: str,
) -> metrics.EvalReport:
    popularity = corpus.popularity_counts(split.train)
    pooling = model.build_pooling(data.bi)
    ub_graph = objective.build_normalized(split.train)
    ui_graph = objective.build_normalized(data.ui)
    ve = model.compute_views(params, ub_graph, ui_graph, pooling, config.K)
    psi = model.inference_psi(config.variant, config.epsilon)
    curriculum = model.CurriculumState(
        t=config.epochs, T=max(config.epochs, 1), epsilon=config.epsilon, psi=psi
    )
    return metrics.evaluate(
        ve, popularity, curriculum, split,
        k=config.eval_k, partition=partition, policy=config.candidate_policy,
        gamma_override=config.effective_gamma_override(),
    )


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    data = corpus.load_dataset(args.dataset_dir)
    split = _load_split(args, data)
    params = model.load_checkpoint(args.checkpoint)
    out_dir = Path(args.out_dir)
    _write_run_record(
        out_dir, "eval",
        {
            "dataset_dir": str(args.dataset_dir), "split_dir": str(args.split_dir),
            "scenario": args.scenario, "checkpoint": str(args.checkpoint),
            "partition": args.partition, "seed": config.seed, "config": config.to_dict(),
        },
    )
    report = _evaluate_checkpoint(data, split, params, config, args.partition)
    report.to_json(out_dir / "report.json")
    psi = model.inference_psi(config.variant, config.epsilon)
    (out_dir / "report.csv").write_text(
        trainer.HISTORY_HEADER + "\n" + report.history_csv_row(epoch=0, psi=psi) + "\n"
    )
    print(
        f"{report.scenario}/{report.partition}: recall@{report.k}={report.recall:.4f} "
        f"ndcg@{report.k}={report.ndcg:.4f} over {report.users_evaluated} users"
    )
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    _write_run_record(out_dir, "gradcheck", {"seed": args.seed, "step": args.step, "tolerance": args.tolerance})
    report = objective.run_gradcheck(args.seed, args.step, out_dir / "gradcheck.json")
    print(f"gradcheck max relative error: {report['max_rel_err']:.3e}")
    if report["max_rel_err"] >= args.tolerance:
        raise NumericalError(
            f"gradient check failed: {report['max_rel_err']:.3e} >= tolerance {args.tolerance:.1e}"
        )
    return 0


def cmd_sweep_epsilon(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    if args.grid:
        grid = tuple(float(x) for x in args.grid.split(","))
    else:
        grid = DEFAULT_EPSILON_GRID
    if not grid:
        raise ConfigError("epsilon grid must be non-empty")
    data = corpus.load_dataset(args.dataset_dir)
    split = _load_split(args, data)
    out_dir = Path(args.out_dir)
    _write_run_record(
        out_dir, "sweep-epsilon",
        {
            "dataset_dir": str(args.dataset_dir), "split_dir": str(args.split_dir),
            "scenario": args.scenario, "grid": list(grid), "seed": config.seed,
            "config": config.to_dict(),
        },
    )
    rows = ["epsilon,recall,ndcg"]
    for eps in grid:
        cfg = replace(config, epsilon=eps)
        params, _ = _train_once(data, split, cfg)
        report = _evaluate_checkpoint(data, split, params, cfg, "test")
        rows.append(f"{eps!r},{report.recall!r},{report.ndcg!r}")
        print(f"epsilon={eps:g}: recall@{cfg.eval_k}={report.recall:.4f} ndcg@{cfg.eval_k}={report.ndcg:.4f}")
    (out_dir / "sweep.csv").write_text("\n".join(rows) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coheat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic skewed dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--bundles", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--zipf", type=float, default=1.2)
    p.add_argument("--interactions", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="produce a scenario split from a dataset directory")
    p.add_argument("--dataset-dir", type=Path, required=True)
    p.add_argument("--scenario", choices=("warm", "cold", "all"), required=True)
    p.add_argument("--ratios", type=str, default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train on a prepared split")
    p.add_argument("--dataset-dir", type=Path, required=True)
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--scenario", choices=("warm", "cold", "all"), required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split partition")
    p.add_argument("--dataset-dir", type=Path, required=True)
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--scenario", choices=("warm", "cold", "all"), required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--partition", choices=("val", "test"), default="test")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on the built-in instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-epsilon", help="train/eval across a max-temperature grid")
    p.add_argument("--dataset-dir", type=Path, required=True)
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--scenario", choices=("warm", "cold", "all"), required=True)
    p.add_argument("--grid", type=str, default=None, help="comma-separated epsilon values")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_epsilon)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage/help itself
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    raise SystemExit(main(sys.argv[1:]))

"""Command-line entry points: generate / search / train / predict / compare.

Every command takes explicit seeds (no wall-clock defaults) and writes a
manifest recording its exact argument vector. Deterministic artifacts
(.csv / .jsonl) never contain wall-clock measurements; timing lives in JSON
sidecars so repeated runs with the same arguments are byte-identical.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    CsvError,
    DEFAULT_HOURS,
    DEFAULT_WINDOW,
    EmptyInputError,
    KINDS,
    build_bundle,
    denormalize,
    generate_synthetic_tasks,
    load_csv,
    pairs_to_arrays,
    synthetic_task_params,
    write_csv,
)
from .learners import (
    CheckpointError,
    LearnerSpec,
    NumericError,
    OPTIMIZERS,
    forward,
    load_params,
    save_params,
)
from .meta import (
    EvalSettings,
    MetaConfig,
    PipelineConfig,
    evaluate_params,
    total_gradient_steps,
    train_pipeline,
    train_vanilla,
)
from .search import build_search_space, search
from .stats import compare_samples

LR_MIN, LR_MAX = 1e-4, 0.5


class UsageError(ValueError):
    pass


def _apply_config_file(args, argv: list[str]) -> None:
    """Overlay values from a JSON config document onto parsed arguments.

    Explicit command-line flags win over the file; unknown keys are usage
    errors so typos never pass silently.
    """
    if not getattr(args, "config", None):
        return
    try:
        overrides = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
    if not isinstance(overrides, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    for key, value in overrides.items():
        if not hasattr(args, key) or key in ("config", "func", "command"):
            raise UsageError(f"{args.config}: unknown configuration key {key!r}")
        if f"--{key.replace('_', '-')}" in argv:
            continue
        setattr(args, key, value)


def _write_manifest(out_dir: Path, command: str, argv: list[str], extra: dict | None = None) -> None:
    payload = {"artifact_version": __version__, "command": command, "argv": list(argv)}
    if extra:
        payload.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_series_dir(data_dir: Path, require_train: bool = True):
    target_path = data_dir / "target.csv"
    if not target_path.exists():
        raise CsvError(f"{target_path}: missing target CSV")
    targets = load_csv(target_path)
    if len(targets) != 1:
        raise CsvError(f"{target_path}: expected exactly one task, found {len(targets)}")
    train_series = []
    for path in sorted(data_dir.glob("train_*.csv")):
        train_series.extend(load_csv(path))
    if require_train and not train_series:
        raise CsvError(f"{data_dir}: no train_*.csv files found")
    return train_series, targets[0]


def _pipeline_config(args) -> PipelineConfig:
    for name in ("inner_lr", "outer_lr", "finetune_lr"):
        value = getattr(args, name)
        if not LR_MIN <= value <= LR_MAX:
            raise UsageError(f"--{name.replace('_', '-')} must lie in [{LR_MIN}, {LR_MAX}], got {value}")
    if args.family != "linear" and not 128 <= args.width <= 1024:
        raise UsageError(f"--width must lie in [128, 1024], got {args.width}")
    return PipelineConfig(
        family=args.family,
        width=1 if args.family == "linear" else args.width,
        inner_lr=args.inner_lr,
        outer_lr=args.outer_lr,
        finetune_lr=args.finetune_lr,
        optimizer=args.optimizer,
    )


def _settings(args) -> EvalSettings:
    return EvalSettings(
        meta_iterations=args.meta_iterations,
        tasks_per_iter=None,
        shots=args.shots,
        finetune_steps=args.finetune_steps,
        inner_steps=args.inner_steps,
    )


def _write_scores(out_dir: Path, rows: list[tuple[int, float]]) -> None:
    lines = ["seed,test_mse"] + [f"{seed},{mse!r}" for seed, mse in rows]
    (out_dir / "scores.csv").write_text("\n".join(lines) + "\n")


def _read_scores(result_dir: Path) -> dict[int, float]:
    path = Path(result_dir) / "scores.csv"
    if not path.exists():
        raise CsvError(f"{path}: missing scores.csv")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "seed,test_mse":
        raise CsvError(f"{path}: expected header 'seed,test_mse'")
    out = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        seed_text, mse_text = line.split(",")
        out[int(seed_text)] = float(mse_text)
    return out


def cmd_generate(args, argv) -> int:
    out = _out_dir(args)
    series = generate_synthetic_tasks(args.kind, args.tasks + 1, args.hours, args.seed)
    train_series, target = series[: args.tasks], series[args.tasks]
    target = dataclasses.replace(target, task_id=f"{args.kind}-target")
    for i, s in enumerate(train_series):
        write_csv([s], out / f"train_{i:02d}.csv")
    write_csv([target], out / "target.csv")
    params = {
        s.task_id: synthetic_task_params(args.kind, i, args.seed)
        for i, s in enumerate(train_series + [target])
    }
    _write_manifest(
        out,
        "generate",
        argv,
        {"kind": args.kind, "seed": args.seed, "hours": args.hours, "tasks": args.tasks, "generator_params": params},
    )
    return 0


def cmd_search(args, argv) -> int:
    seeds = args.seed if isinstance(args.seed, list) else [args.seed]
    if args.budget < 1:
        raise UsageError(f"--budget must be >= 1, got {args.budget}")
    out = _out_dir(args)
    space = build_search_space(
        args.family,
        grid_resolution=args.grid_resolution,
        kappa=args.kappa,
        c_uct=args.c_uct,
        include_shots_level=args.search_shots,
    )
    train_series, target = _load_series_dir(Path(args.data))
    scores = []
    for seed in seeds:
        bundle = build_bundle(train_series, target, window=args.window, seed=seed)
        start = time.perf_counter()
        best, trajectory = search(space, bundle, args.budget, seed, settings=_settings(args))
        total_ms = (time.perf_counter() - start) * 1000.0
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        (seed_dir / "trajectory.jsonl").write_text(trajectory.to_jsonl(include_timing=False))
        best_curve = trajectory.best_so_far()
        plot_lines = ["iteration,best_so_far_mse"] + [
            f"{i},{v!r}" for i, v in enumerate(best_curve)
        ]
        (seed_dir / "plot.csv").write_text("\n".join(plot_lines) + "\n")
        per_iter = [r.wall_time_ms for r in trajectory.records]
        (seed_dir / "timings.json").write_text(
            json.dumps(
                {
                    "per_iteration_ms": per_iter,
                    "cumulative_ms": list(np.cumsum(per_iter)),
                    "total_ms": total_ms,
                },
            )
            + "\n"
        )
        best_record = trajectory.best_record()
        summary = {
            "seed": seed,
            "budget": args.budget,
            "best_config": best.to_dict() if best else None,
            "best_test_mse": best_record.test_mse if best_record else None,
            "best_val_mse": best_record.val_mse if best_record else None,
            "failed_evaluations": sum(1 for r in trajectory.records if r.status == "failed"),
            "total_wall_time_ms": total_ms,
        }
        (seed_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        scores.append((seed, best_record.test_mse if best_record else float("inf")))
    _write_scores(out, scores)
    _write_manifest(out, "search", argv, {"family": args.family, "budget": args.budget, "seeds": seeds})
    return 0


def cmd_train(args, argv) -> int:
    config = _pipeline_config(args)
    settings = _settings(args)
    out = _out_dir(args)
    train_series, target = _load_series_dir(Path(args.data), require_train=not args.vanilla)
    seeds = args.seed if isinstance(args.seed, list) else [args.seed]
    scores = []
    for seed in seeds:
        bundle = build_bundle(train_series, target, window=args.window, seed=seed)
        spec = LearnerSpec(family=config.family, input_dim=bundle.window, width=config.width)
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        extra = {"target_norm": list(bundle.target_norm or ()), "window": bundle.window}
        if args.vanilla:
            steps = args.train_steps or total_gradient_steps(
                _meta_cfg(config, settings), max(1, len(bundle.train_tasks))
            )
            theta = train_vanilla(
                spec, bundle.validation, config.finetune_lr, config.optimizer, steps, seed
            )
            if not np.all(np.isfinite(theta)):
                raise NumericError("vanilla training diverged to non-finite parameters")
            val_mse = evaluate_params(spec, theta, bundle.validation)
            test_mse = evaluate_params(spec, theta, bundle.test)
            save_params(seed_dir / "model.params", spec, theta, extra)
            result = {"vanilla": True, "train_steps": steps, "train_curve": []}
        else:
            meta_result, test_mse = train_pipeline(config, bundle, seed, settings)
            val_mse = meta_result.val_mse
            save_params(seed_dir / "model.params", spec, meta_result.theta_final, extra)
            save_params(seed_dir / "meta_init.params", spec, meta_result.theta_meta, extra)
            result = {
                "vanilla": False,
                "train_steps": total_gradient_steps(_meta_cfg(config, settings), len(bundle.train_tasks)),
                "train_curve": [[it, value] for it, value in meta_result.train_curve],
            }
        result.update(
            {"seed": seed, "val_mse": val_mse, "test_mse": test_mse, "config": config.to_dict()}
        )
        (seed_dir / "result.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
        scores.append((seed, test_mse))
    _write_scores(out, scores)
    _write_manifest(out, "train", argv, {"vanilla": args.vanilla, "seeds": seeds})
    return 0


def _meta_cfg(config: PipelineConfig, settings: EvalSettings) -> MetaConfig:
    return MetaConfig(
        inner_lr=config.inner_lr,
        outer_lr=config.outer_lr,
        finetune_lr=config.finetune_lr,
        optimizer=config.optimizer,
        tasks_per_iter=settings.tasks_per_iter,
        shots=settings.shots,
        meta_iterations=settings.meta_iterations,
        finetune_steps=settings.finetune_steps,
        inner_steps=settings.inner_steps,
    )


def cmd_predict(args, argv) -> int:
    checkpoint = Path(args.checkpoint)
    if checkpoint.is_dir():
        checkpoint = checkpoint / "model.params"
    spec, theta, extra = load_params(checkpoint)
    window = extra.get("window", spec.input_dim)
    if window != spec.input_dim:
        raise CheckpointError(f"{checkpoint}: window {window} does not match input_dim {spec.input_dim}")
    _, target = _load_series_dir(Path(args.data), require_train=False)
    bundle = build_bundle([], target, window=spec.input_dim, test_horizon=args.horizon, seed=0)
    X, y_true = pairs_to_arrays(bundle.test)
    if args.recursive:
        y_pred = []
        lags = X[0].copy()
        for _ in range(len(bundle.test)):
            step_pred = float(forward(spec, theta, lags[None, :])[0])
            y_pred.append(step_pred)
            lags = np.concatenate([lags[1:], [step_pred]])
        y_pred = np.array(y_pred)
    else:
        y_pred = forward(spec, theta, X)
    norm = extra.get("target_norm") or None
    if norm:
        y_true = denormalize(y_true, tuple(norm))
        y_pred = denormalize(y_pred, tuple(norm))
    out = _out_dir(args)
    lines = ["step,y_true,y_pred"] + [
        f"{i},{float(t)!r},{float(p)!r}" for i, (t, p) in enumerate(zip(y_true, y_pred))
    ]
    (out / "forecast.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, "predict", argv, {"horizon": len(y_pred), "recursive": args.recursive})
    return 0


def cmd_compare(args, argv) -> int:
    if len(args.results) < 2:
        raise UsageError("compare needs at least two result directories")
    scores = {d: _read_scores(Path(d)) for d in args.results}
    seed_sets = {d: tuple(sorted(s)) for d, s in scores.items()}
    reference = seed_sets[args.results[0]]
    for d, seeds in seed_sets.items():
        if seeds != reference:
            raise CsvError(
                f"seed sets differ: {args.results[0]} has {list(reference)}, {d} has {list(seeds)}"
            )
    pairs = []
    for i, dir_a in enumerate(args.results):
        for dir_b in args.results[i + 1 :]:
            errors_a = [scores[dir_a][s] for s in reference]
            errors_b = [scores[dir_b][s] for s in reference]
            row = {"dir_a": str(dir_a), "dir_b": str(dir_b), "n_seeds": len(reference)}
            row.update(compare_samples(errors_a, errors_b))
            pairs.append(row)
    categories = [row["category"] for row in pairs]
    percentages = {
        name: 100.0 * categories.count(name) / len(categories)
        for name in ("large", "medium", "small", "equal", "below_half")
    }
    out = _out_dir(args)
    report = {"pairs": pairs, "category_percentages": percentages}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_manifest(out, "compare", argv, {"results": [str(d) for d in args.results]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flag(p):
        p.add_argument("--config", default=None, help="JSON file supplying defaults for any option")

    gen = sub.add_parser("generate", help="write a synthetic multi-task bundle as CSVs")
    add_config_flag(gen)
    gen.add_argument("--kind", choices=KINDS, default="synthetic")
    gen.add_argument("--tasks", type=int, default=4, help="number of training tasks")
    gen.add_argument("--hours", type=int, default=DEFAULT_HOURS)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    srch = sub.add_parser("search", help="MCTS over pipeline configurations")
    srch.add_argument("--data", required=True, help="directory produced by generate")
    srch.add_argument("--family", choices=("linear", "mlp", "recurrent"), required=True)
    srch.add_argument("--budget", type=int, default=100)
    srch.add_argument("--seed", type=int, nargs="+", default=None)
    srch.add_argument("--out", required=True)
    srch.add_argument("--grid-resolution", type=int, default=8)
    srch.add_argument("--kappa", type=float, default=0.5)
    srch.add_argument("--c-uct", type=float, default=1.0)
    srch.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    srch.add_argument("--meta-iterations", type=int, default=50)
    srch.add_argument("--shots", type=int, default=10)
    srch.add_argument("--finetune-steps", type=int, default=1)
    srch.add_argument("--inner-steps", type=int, default=1)
    srch.add_argument("--search-shots", action="store_true", help="add shots as a sixth decision level")
    add_config_flag(srch)
    srch.set_defaults(func=cmd_search)

    trn = sub.add_parser("train", help="train one fixed pipeline (or a vanilla baseline)")
    trn.add_argument("--data", required=True)
    trn.add_argument("--family", choices=("linear", "mlp", "recurrent"), required=True)
    trn.add_argument("--width", type=int, default=512)
    trn.add_argument("--inner-lr", type=float, default=0.01)
    trn.add_argument("--outer-lr", type=float, default=0.001)
    trn.add_argument("--finetune-lr", type=float, default=0.05)
    trn.add_argument("--optimizer", choices=OPTIMIZERS, default="sgd")
    trn.add_argument("--seed", type=int, nargs="+", default=None)
    trn.add_argument("--out", required=True)
    trn.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    trn.add_argument("--meta-iterations", type=int, default=50)
    trn.add_argument("--shots", type=int, default=10)
    trn.add_argument("--finetune-steps", type=int, default=1)
    trn.add_argument("--inner-steps", type=int, default=1)
    trn.add_argument("--vanilla", action="store_true", help="skip meta-training; fit the validation slice only")
    trn.add_argument("--train-steps", type=int, default=None, help="vanilla step budget (default: match the meta run)")
    add_config_flag(trn)
    trn.set_defaults(func=cmd_train)

    prd = sub.add_parser("predict", help="emit one-step-ahead forecasts from a checkpoint")
    prd.add_argument("--checkpoint", required=True, help=".params file or a train seed directory")
    prd.add_argument("--data", required=True)
    prd.add_argument("--out", required=True)
    prd.add_argument("--horizon", type=int, default=24)
    prd.add_argument("--recursive", action="store_true", help="feed predictions back instead of true lags")
    add_config_flag(prd)
    prd.set_defaults(func=cmd_predict)

    cmp_ = sub.add_parser("compare", help="Wilcoxon + A12 report over result directories")
    cmp_.add_argument("results", nargs="+", help="two or more train/search output directories")
    cmp_.add_argument("--out", required=True)
    add_config_flag(cmp_)
    cmp_.set_defaults(func=cmd_compare)

    return parser


def _require_seed(args) -> None:
    seed = getattr(args, "seed", "not-applicable")
    if seed is None or seed == []:
        raise UsageError("--seed is required (on the command line or in --config)")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_config_file(args, argv)
        _require_seed(args)
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (CsvError, EmptyInputError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

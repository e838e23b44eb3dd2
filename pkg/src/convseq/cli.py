"""Command-line entry point: train / evaluate / bench / ablate / sweep / inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import BenchError, measure_scaling, slopes_by_encoder, write_samples_csv, \
    write_samples_dat
from .checkpoint import CheckpointError, load_arrays
from .config import RunConfig, build_run_config, load_config_source, parse_value, \
    write_resolved_config
from .data import DataError, load_dataset
from .metrics import EvaluationError, evaluate, evaluate_groups, format_report, \
    write_metrics_csv, write_ranks_jsonl
from .model import META_PREFIX, Model
from .optim import GradientError
from .tensor import ConfigurationError
from .trainer import fit, write_training_log

ABLATION_ORDER = ("no_intervals", "no_residuals", "single_conv", "avgpool_only")

SWEEP_AXES = {
    "embedding": "embedding",
    "dropout": "dropout_rate",
    "kernel_schedule": "schedule",
    "seq_length": "sequence_length",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convseq",
        description="Attribute-aware sequential recommender with a "
                    "convolutional down-scaling encoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="preset name or key=value file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override any config key")

    dataset_flags = argparse.ArgumentParser(add_help=False)
    dataset_flags.add_argument("--dataset", help="interactions JSONL path")
    dataset_flags.add_argument("--item-attrs", help="item attribute JSONL path")
    dataset_flags.add_argument("--split", help="holdout manifest JSON path")

    sub.add_parser("train", parents=[common, dataset_flags],
                   help="fit a model and save the best checkpoint")

    p_eval = sub.add_parser("evaluate", parents=[common, dataset_flags],
                            help="rank held-out targets with a trained model")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--groups", help="top_bottom:<q> or seq_length_sweep:<Ls>")

    p_bench = sub.add_parser("bench", parents=[common],
                             help="scaling study of both encoders")
    p_bench.add_argument("--lengths", default="128,256,512,1024,2048")
    p_bench.add_argument("--batch", type=int, default=32)
    p_bench.add_argument("--width", type=int, default=64)
    p_bench.add_argument("--repetitions", type=int, default=5)

    p_ablate = sub.add_parser("ablate", parents=[common, dataset_flags],
                              help="train and compare ablation variants")
    p_ablate.add_argument("--flags", help="comma list, default all four variants")

    p_sweep = sub.add_parser("sweep", parents=[common, dataset_flags],
                             help="train and evaluate across one axis")
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", required=True,
                         help="comma list; ';'-separated JSON for kernel_schedule")

    p_inspect = sub.add_parser("inspect", parents=[common],
                               help="summarize a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True)

    return parser


def resolve_config(args) -> RunConfig:
    values = load_config_source(args.config) if args.config else {}
    for attr, key in (("dataset", "dataset"), ("item_attrs", "item_attrs"),
                      ("split", "split")):
        if getattr(args, attr, None) is not None:
            values[key] = getattr(args, attr)
    if args.seed is not None:
        values["seed"] = args.seed
    for pair in args.overrides:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {pair!r}")
        values[key.strip()] = parse_value(value.strip())
    return build_run_config(values)


def require_dataset(config: RunConfig):
    if config.dataset is None:
        raise ConfigurationError("no dataset given: pass --dataset or set "
                                 "the 'dataset' config key")
    return load_dataset(config.dataset, config.item_attrs, config.split,
                        config.frequent_count)


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(directory: Path, command: str, names: list[str]) -> None:
    payload = {"command": command, "files": sorted(names)}
    (directory / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def check_compatibility(model: Model, dataset) -> None:
    if model.table_rows != dataset.vocab.table_rows or \
            model.attr_width != dataset.attr_width:
        raise CheckpointError(
            f"checkpoint expects {model.table_rows} vocabulary rows and "
            f"{model.attr_width} attributes, dataset has "
            f"{dataset.vocab.table_rows} and {dataset.attr_width}")


def apply_context_stats(dataset, mean: np.ndarray, std: np.ndarray) -> None:
    """Restandardize context with the training-time statistics."""
    if np.array_equal(mean, dataset.ctx_mean) and np.array_equal(std, dataset.ctx_std):
        return
    for seq in dataset.sequences:
        raw = seq.ctx * dataset.ctx_std + dataset.ctx_mean
        seq.ctx = (raw - mean) / std
    dataset.ctx_mean = mean.copy()
    dataset.ctx_std = std.copy()


def cmd_train(args) -> int:
    config = resolve_config(args)
    dataset = require_dataset(config)
    result = fit(dataset, config.train_config())
    directory = out_dir(args)
    result.model.save(directory / "best.ckpt")
    write_training_log(directory / "train_log.csv", result.history)
    write_resolved_config(config, directory / "resolved.cfg")
    write_manifest(directory, "train",
                   ["best.ckpt", "train_log.csv", "resolved.cfg"])
    print(f"best epoch {result.best_epoch} "
          f"val ndcg@10 {result.best_ndcg:.4f} ({len(result.history)} epochs)")
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    model = Model.load(args.checkpoint)
    dataset = require_dataset(config)
    check_compatibility(model, dataset)
    apply_context_stats(dataset, model.context_mean, model.context_std)
    rule = args.groups or config.groups
    if rule:
        report = evaluate_groups(model, dataset, config.protocol, config.k,
                                 rule, seed=config.seed)
        results = None
    else:
        report, results = evaluate(model, dataset, config.protocol, config.k,
                                   seed=config.seed, return_ranks=True)
    directory = out_dir(args)
    write_metrics_csv(directory / "metrics.csv", report)
    names = ["metrics.csv"]
    if results is not None:
        write_ranks_jsonl(directory / "ranks.jsonl", results)
        names.append("ranks.jsonl")
    write_manifest(directory, "evaluate", names)
    print(format_report(report))
    return 0


def cmd_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",") if v]
    samples = measure_scaling(lengths, args.batch, args.width,
                              repetitions=args.repetitions,
                              seed=args.seed or 0)
    directory = out_dir(args)
    write_samples_csv(samples, directory / "scaling.csv")
    write_samples_dat(samples, directory / "scaling.dat")
    write_manifest(directory, "bench", ["scaling.csv", "scaling.dat"])
    for metric in ("wall_seconds", "peak_bytes", "mac_count"):
        for encoder, (slope, r2) in slopes_by_encoder(samples, metric).items():
            print(f"{metric:>12} {encoder:<10} slope {slope:.3f} (r2 {r2:.4f})")
    return 0


def _train_and_test(config: RunConfig, dataset):
    result = fit(dataset, config.train_config())
    report = evaluate(result.model, dataset, config.protocol, config.k,
                      seed=config.seed)
    return result, report


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    requested = ABLATION_ORDER if args.flags is None else \
        tuple(v.strip() for v in args.flags.split(",") if v.strip())
    for flag in requested:
        if flag not in ABLATION_ORDER:
            raise ConfigurationError(f"unknown ablation flag {flag!r}")
    dataset = require_dataset(config)
    rows = []
    for flag in ABLATION_ORDER:
        if flag not in requested:
            continue
        variant = replace(config, **{flag: True})
        _, report = _train_and_test(variant, dataset)
        rows.append((flag, report))
    _, base_report = _train_and_test(config, dataset)
    rows.append(("base", base_report))

    directory = out_dir(args)
    path = directory / "ablate.csv"
    with open(path, "w") as fh:
        fh.write("variant,hr_at_k,ndcg_at_k\n")
        for name, report in rows:
            fh.write(f"{name},{report.hr_at_k:.6f},{report.ndcg_at_k:.6f}\n")
    write_manifest(directory, "ablate", ["ablate.csv"])
    for name, report in rows:
        print(f"{name:<14} HR@{config.k} {report.hr_at_k:.4f} "
              f"NDCG@{config.k} {report.ndcg_at_k:.4f}")
    return 0


def parse_sweep_values(axis: str, text: str) -> list:
    if axis == "kernel_schedule":
        values = [json.loads(v) for v in text.split(";") if v.strip()]
    else:
        raw = [v.strip() for v in text.split(",") if v.strip()]
        values = [parse_value(v) for v in raw]
    if not values:
        raise ConfigurationError("--values is empty")
    return values


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    values = parse_sweep_values(args.axis, args.values)
    field = SWEEP_AXES[args.axis]
    dataset = require_dataset(config)
    rows = []
    for value in values:
        variant = replace(config, **{field: value})
        _, report = _train_and_test(variant, dataset)
        rows.append((value, report))

    directory = out_dir(args)
    path = directory / "sweep.csv"
    with open(path, "w") as fh:
        fh.write(f"{args.axis},hr_at_k,ndcg_at_k\n")
        for value, report in rows:
            if isinstance(value, list):
                # schedules serialize with commas, so the field needs quoting
                rendered = '"' + json.dumps(value, separators=(",", ":")) + '"'
            else:
                rendered = str(value)
            fh.write(f"{rendered},{report.hr_at_k:.6f},{report.ndcg_at_k:.6f}\n")
    write_manifest(directory, "sweep", ["sweep.csv"])
    for value, report in rows:
        print(f"{value!s:<24} HR@{config.k} {report.hr_at_k:.4f} "
              f"NDCG@{config.k} {report.ndcg_at_k:.4f}")
    return 0


def checkpoint_summary(arrays: dict) -> str:
    lines = []
    total = 0
    for name in sorted(arrays):
        if name.startswith(META_PREFIX):
            continue
        arr = arrays[name]
        total += arr.size
        shape = "x".join(str(d) for d in arr.shape) if arr.shape else "scalar"
        if "alpha" in name:
            lines.append(f"{name:<24} {shape:>12}  value {arr.item():.4f}")
        else:
            lines.append(f"{name:<24} {shape:>12}")
    schedule = arrays[META_PREFIX + "schedule"].astype(int).reshape(-1, 2)
    rendered = " ".join(f"({k},{s})" for k, s in schedule) or "none"
    lines.append(f"schedule: {rendered}")
    lines.append(f"total parameters: {total}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    arrays = load_arrays(args.checkpoint)
    if META_PREFIX + "schedule" not in arrays:
        raise CheckpointError("not a model checkpoint: missing meta.schedule")
    print(checkpoint_summary(arrays))
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    limits = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, EvaluationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (GradientError, BenchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

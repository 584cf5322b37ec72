"""Command-line surface: train, eval, analyze, gradcheck, ablate.

Configuration is a line-oriented key=value file; every key can also be given
as a --key flag, and flags win over the file. Exit codes: 0 success, 1 a
check or threshold failed, 2 bad input (files, config, vocab mismatch),
3 corrupted artifact.

Every run writes manifest.json into its output directory with the resolved
config, seeds, data-file hashes and package version, which is enough to
reproduce the run (bit-for-bit at 64-bit precision).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, gradcheck
from .checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, load_tsv, stats_report
from .evaluation import emit_report, evaluate
from .layers import identity_dropout_total_drop_prob
from .model import DropoutSpec, ModelConfig
from .training import TrainConfig, TrainingDiverged, train_loop, write_log_csv

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_CORRUPT = 3


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# Every config key, its parser, and its default. Flags of the same name
# override file values; unknown keys in the file are rejected.
CONFIG_KEYS = {
    "dim": (int, 200),
    "deepe_blocks": (int, 1),
    "resnet_blocks": (int, 1),
    "resnet_inner": (int, 2),
    "drop_input_fc": (float, 0.0),
    "drop_identity": (float, 0.0),
    "drop_resnet_fc": (float, 0.0),
    "lr": (float, 0.003),
    "l2": (float, 0.0),
    "batch_size": (int, 512),
    "seed": (int, 0),
    "max_epochs": (int, 1000),
    "eval_every": (int, 1),
    "label_smoothing": (float, 0.0),
    "loss": (str, "softmax"),
    "plateau_factor": (float, 0.8),
    "plateau_patience": (int, 5),
    "early_stop_patience": (int, 10),
    "feature_block_kind": (str, "deepe"),
    "gate_linear": (_parse_bool, True),
    "gate_nonlinear": (_parse_bool, True),
    "precision": (int, 32),
}


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    with handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in CONFIG_KEYS:
                raise DataError(f"{path}:{line_no}: unknown config key {key!r}")
            parser, _ = CONFIG_KEYS[key]
            try:
                values[key] = parser(raw)
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: bad value for {key}: {exc}") from exc
    return values


def resolve_config(args) -> dict:
    resolved = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    if getattr(args, "config", None):
        resolved.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        override = getattr(args, key, None)
        if override is not None:
            resolved[key] = override
    return resolved


def build_configs(resolved: dict) -> tuple[ModelConfig, TrainConfig]:
    try:
        model_config = ModelConfig(
            dim=resolved["dim"],
            n_deepe_blocks=resolved["deepe_blocks"],
            n_resnet_blocks=resolved["resnet_blocks"],
            resnet_inner_layers=resolved["resnet_inner"],
            dropout=DropoutSpec(
                p_input=resolved["drop_input_fc"],
                p_fc=resolved["drop_input_fc"],
                p_identity=resolved["drop_identity"],
                p_resnet_fc=resolved["drop_resnet_fc"],
            ),
            seed=resolved["seed"],
            feature_block_kind=resolved["feature_block_kind"],
            gate_linear=resolved["gate_linear"],
            gate_nonlinear=resolved["gate_nonlinear"],
            precision=resolved["precision"],
        )
        train_config = TrainConfig(
            lr=resolved["lr"],
            plateau_factor=resolved["plateau_factor"],
            plateau_patience=resolved["plateau_patience"],
            early_stop_patience=resolved["early_stop_patience"],
            max_epochs=resolved["max_epochs"],
            batch_size=resolved["batch_size"],
            l2=resolved["l2"],
            label_smoothing=resolved["label_smoothing"],
            seed=resolved["seed"],
            eval_every=resolved["eval_every"],
            loss=resolved["loss"],
        )
    except ValueError as exc:
        raise DataError(f"invalid configuration: {exc}") from exc
    return model_config, train_config


def _data_paths(data_dir: str) -> tuple[str, str, str]:
    paths = tuple(os.path.join(data_dir, f"{name}.txt") for name in ("train", "valid", "test"))
    for path in paths:
        if not os.path.exists(path):
            raise DataError(f"triple file not found: {path}")
    return paths


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, command: str, resolved_config: dict,
                   data_paths=(), seeds=(), extra=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "checkpoint_format_version": FORMAT_VERSION,
        "numpy_version": np.__version__,
        "resolved_config": resolved_config,
        "seeds": list(seeds),
        "data_files": {path: _sha256_file(path) for path in data_paths},
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def _echo_config(resolved: dict):
    print("== run configuration ==")
    for key in sorted(resolved):
        print(f"{key}={resolved[key]}")


def _metric_row(label: str, report) -> dict:
    o = report.overall
    return {
        "variant": label,
        "count": o.count,
        "mr": f"{o.mr:.6g}",
        "mrr": f"{o.mrr:.6g}",
        "hits1": f"{o.hits1:.6g}",
        "hits10": f"{o.hits10:.6g}",
    }


def _write_csv(path: str, rows: list, fieldnames: list):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    resolved = resolve_config(args)
    train_paths = _data_paths(args.data_dir)
    dataset = load_tsv(*train_paths)
    _echo_config(resolved)
    os.makedirs(args.out_dir, exist_ok=True)

    runs = max(1, args.runs)
    seeds = [resolved["seed"] + i for i in range(runs)]
    summary_rows = []
    for run_index, seed in enumerate(seeds):
        run_resolved = dict(resolved, seed=seed)
        model_config, train_config = build_configs(run_resolved)
        run_dir = args.out_dir if runs == 1 else os.path.join(args.out_dir, f"run_{run_index}")
        os.makedirs(run_dir, exist_ok=True)
        print(f"-- run {run_index} (seed {seed}) --")
        result = train_loop(dataset, model_config, train_config, verbose=not args.quiet)
        write_log_csv(result.log, os.path.join(run_dir, "train_log.csv"))
        ehash = dataset.entity_vocab_hash()
        rhash = dataset.relation_vocab_hash()
        save_checkpoint(os.path.join(run_dir, "best.ckpt"), result.model, ehash, rhash,
                        optimizer=result.optimizer)
        final_model = result.model
        best_state = final_model.state_dict()
        final_model.load_state_dict(result.final_state)
        save_checkpoint(os.path.join(run_dir, "final.ckpt"), final_model, ehash, rhash)
        final_model.load_state_dict(best_state)
        print(
            f"run {run_index}: best valid MRR {result.best_valid_mrr:.6g} "
            f"at epoch {result.best_epoch} ({result.epochs_run} epochs run)"
        )
        summary_rows.append({
            "run": run_index,
            "seed": seed,
            "best_valid_mrr": result.best_valid_mrr,
            "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run,
        })

    if runs > 1:
        mrrs = np.array([row["best_valid_mrr"] for row in summary_rows], dtype=np.float64)
        rows = [dict(row, best_valid_mrr=f"{row['best_valid_mrr']:.6g}") for row in summary_rows]
        rows.append({
            "run": "mean", "seed": "", "best_valid_mrr": f"{mrrs.mean():.6g}",
            "best_epoch": "", "epochs_run": "",
        })
        rows.append({
            "run": "std", "seed": "", "best_valid_mrr": f"{mrrs.std(ddof=0):.6g}",
            "best_epoch": "", "epochs_run": "",
        })
        _write_csv(os.path.join(args.out_dir, "summary.csv"), rows,
                   ["run", "seed", "best_valid_mrr", "best_epoch", "epochs_run"])
    write_manifest(args.out_dir, "train", resolved, train_paths, seeds)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_tsv(*_data_paths(args.data_dir))
    if ckpt.meta["entity_vocab_sha256"] != dataset.entity_vocab_hash() or \
            ckpt.meta["relation_vocab_sha256"] != dataset.relation_vocab_hash():
        raise DataError(
            "vocab hash mismatch: checkpoint was trained on a different entity/relation vocabulary"
        )
    model = ckpt.build_model()
    report = evaluate(model, dataset, split=args.split, tie_break=args.tie,
                      num_workers=args.num_workers)
    o = report.overall
    print(
        f"{args.split}: count={o.count} MR={o.mr:.6g} MRR={o.mrr:.6g} "
        f"Hit@1={o.hits1:.6g} Hit@10={o.hits10:.6g}"
    )
    if args.out_dir:
        emit_report(report, args.out_dir)
        write_manifest(args.out_dir, "eval", {"split": args.split, "tie": args.tie},
                       _data_paths(args.data_dir), [])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    precision = args.precision
    if precision == 32:
        print(
            "warning: float32 finite differences are rounding-noise dominated; "
            "using loose tolerance 1e-2"
        )
    errors, tol, ok = gradcheck.run_suite(precision=precision, seed=args.seed,
                                          perturb=args.perturb_backward)
    width = max(len(name) for name in errors)
    for name, err in sorted(errors.items()):
        status = "ok" if err < tol else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  [{status}]")
    print(f"tolerance {tol:g}: {'PASS' if ok else 'FAIL'}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        rows = [{"group": name, "max_rel_err": f"{err:.6g}"}
                for name, err in sorted(errors.items())]
        _write_csv(os.path.join(args.out_dir, "gradcheck.csv"), rows,
                   ["group", "max_rel_err"])
        write_manifest(args.out_dir, "gradcheck",
                       {"precision": precision, "seed": args.seed,
                        "tolerance": tol, "passed": ok}, [], [args.seed])
    if not ok:
        offenders = [name for name, err in errors.items() if err >= tol]
        print("offending parameter groups: " + ", ".join(sorted(offenders)))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_analyze(args) -> int:
    dataset = load_tsv(*_data_paths(args.data_dir))
    os.makedirs(args.out_dir, exist_ok=True)
    report_text = stats_report(dataset)
    print(report_text, end="")
    with open(os.path.join(args.out_dir, "stats.txt"), "w", encoding="utf-8") as fh:
        fh.write(report_text)

    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    n_blocks, alpha = args.blocks, args.alpha
    if ckpt is not None:
        config = ckpt.model_config
        n_blocks = config.n_deepe_blocks
        alpha = config.dropout.p_identity
    rows = [
        {"order": order, "drop_prob": f"{identity_dropout_total_drop_prob(n_blocks, alpha, order):.6g}"}
        for order in range(n_blocks + 1)
    ]
    _write_csv(os.path.join(args.out_dir, "identity_dropout_survival.csv"), rows,
               ["order", "drop_prob"])

    if ckpt is not None:
        if ckpt.meta["entity_vocab_sha256"] != dataset.entity_vocab_hash() or \
                ckpt.meta["relation_vocab_sha256"] != dataset.relation_vocab_hash():
            raise DataError("vocab hash mismatch between checkpoint and data")
        model = ckpt.build_model()
        report = evaluate(model, dataset, split=args.split, num_workers=args.num_workers)
        emit_report(report, args.out_dir)
        audit = model.parameter_count_audit()
        with open(os.path.join(args.out_dir, "parameter_audit.txt"), "w", encoding="utf-8") as fh:
            for key, value in audit.items():
                fh.write(f"{key}={value}\n")
    write_manifest(args.out_dir, "analyze",
                   {"blocks": n_blocks, "alpha": alpha, "split": args.split},
                   _data_paths(args.data_dir), [])
    return EXIT_OK


def cmd_ablate(args) -> int:
    resolved = resolve_config(args)
    data_paths = _data_paths(args.data_dir)
    dataset = load_tsv(*data_paths)
    os.makedirs(args.out_dir, exist_ok=True)

    variants = []
    if args.depths:
        try:
            depths = [int(tok) for tok in args.depths.split(",") if tok.strip()]
        except ValueError as exc:
            raise DataError(f"bad --depths list: {exc}") from exc
        kind = resolved["feature_block_kind"]
        for depth in depths:
            variants.append((f"{kind}-depth{depth}", dict(resolved, deepe_blocks=depth)))
    else:
        variants.append(("base", dict(resolved)))
        if args.no_project:
            variants.append(("no-project", dict(resolved, resnet_blocks=0)))
        if args.no_identity_dropout:
            variants.append(("no-identity-dropout", dict(resolved, drop_identity=0.0)))
        if args.gate:
            if resolved["deepe_blocks"] != 1:
                raise DataError(
                    "--gate requires a single-block model (deepe_blocks=1): "
                    "branch gating is only interpretable there"
                )
            if args.gate == "linear":
                variants.append(("gate-linear-only", dict(resolved, gate_nonlinear=False)))
            else:
                variants.append(("gate-nonlinear-only", dict(resolved, gate_linear=False)))
        if len(variants) == 1:
            raise DataError(
                "nothing to ablate: pass --no-project, --no-identity-dropout, "
                "--gate, or --depths"
            )

    cat_fields = ["cat_1-1", "cat_1-N", "cat_N-1", "cat_N-N"]
    rows = []
    for label, variant_resolved in variants:
        model_config, train_config = build_configs(variant_resolved)
        print(f"-- ablation variant {label} --")
        result = train_loop(dataset, model_config, train_config, verbose=not args.quiet)
        report = evaluate(result.model, dataset, split=args.split)
        row = _metric_row(label, report)
        for cat in ("1-1", "1-N", "N-1", "N-N"):
            block = report.by_category_merged.get(cat)
            row[f"cat_{cat}"] = "" if block is None else f"{block.mrr:.6g}"
        rows.append(row)
        print(f"{label}: MRR={row['mrr']} MR={row['mr']}")

    _write_csv(os.path.join(args.out_dir, "comparison.csv"), rows,
               ["variant", "count", "mr", "mrr", "hits1", "hits10"] + cat_fields)
    write_manifest(args.out_dir, "ablate", resolved, data_paths,
                   [resolved["seed"]], extra={"variants": [label for label, _ in variants],
                                              "split": args.split})
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file")
    for key, (parser_fn, _) in CONFIG_KEYS.items():
        parser.add_argument(f"--{key}", type=parser_fn, default=None,
                            help=f"override config key {key}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepe",
        description="Train and evaluate a residual-block knowledge-graph embedding model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and keep the best-valid checkpoint")
    _add_config_flags(p_train)
    p_train.add_argument("--data-dir", required=True,
                         help="directory with train.txt/valid.txt/test.txt")
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--runs", type=int, default=1,
                         help="repeat with seeds seed..seed+N-1 and write a mean/std summary")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint with filtered ranking")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-dir", required=True)
    p_eval.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p_eval.add_argument("--tie", choices=("average", "pessimistic", "optimistic"),
                        default="average")
    p_eval.add_argument("--num-workers", type=int, default=None)
    p_eval.add_argument("--out-dir", default=None)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference check of every backward pass")
    p_grad.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p_grad.add_argument("--seed", type=int, default=7)
    p_grad.add_argument("--out-dir", default=None,
                        help="also write gradcheck.csv and a manifest here")
    p_grad.add_argument("--perturb-backward", action="store_true", help=argparse.SUPPRESS)

    p_analyze = sub.add_parser("analyze", help="dataset stats and report breakdowns")
    p_analyze.add_argument("--data-dir", required=True)
    p_analyze.add_argument("--out-dir", required=True)
    p_analyze.add_argument("--checkpoint", default=None)
    p_analyze.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p_analyze.add_argument("--blocks", type=int, default=40,
                           help="stack depth for the identity-dropout survival table")
    p_analyze.add_argument("--alpha", type=float, default=0.01,
                           help="identity-dropout ratio for the survival table")
    p_analyze.add_argument("--num-workers", type=int, default=None)

    p_ablate = sub.add_parser("ablate", help="train ablation variants and compare")
    _add_config_flags(p_ablate)
    p_ablate.add_argument("--data-dir", required=True)
    p_ablate.add_argument("--out-dir", required=True)
    p_ablate.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p_ablate.add_argument("--no-project", action="store_true",
                          help="variant with the project network replaced by identity")
    p_ablate.add_argument("--no-identity-dropout", action="store_true")
    p_ablate.add_argument("--gate", choices=("linear", "nonlinear"), default=None,
                          help="keep only one branch of a single-block model")
    p_ablate.add_argument("--depths", default=None,
                          help="comma-separated feature-network depth sweep")
    p_ablate.add_argument("--quiet", action="store_true")
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``fibronet {synth,pretrain,train,eval,ablate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from .evaluation import (
    ABLATION_ROWS,
    ExperimentConfig,
    PretrainCache,
    artifact_root,
    emit_report,
    evaluate,
    load_results,
    resolve_dataset,
    run_ablation_matrix,
    run_experiment,
)
from .model import CheckpointMismatchError, load_checkpoint
from .schema import load_yaml
from .synth import GenConfig, Split, generate_dataset, load_dataset, split_dataset

log = logging.getLogger("fibronet")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

# errors that mean "bad input", as opposed to a failure while running
VALIDATION_ERRORS = (ValueError, KeyError, FileNotFoundError, CheckpointMismatchError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; bad flags are a validation failure here
        raise UsageError(message)


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "dataset", None):
        changes["dataset_path"] = args.dataset
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "split_seed", None) is not None:
        changes["split_seed"] = args.split_seed
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    if getattr(args, "lambda_", None) is not None:
        changes["loss_lambda"] = args.lambda_
    for flag, name in (
        ("no_indicator", "use_indicator_guidance"),
        ("no_sharing", "use_weight_sharing"),
        ("no_3stage", "use_3stage"),
        ("no_pretrain", "use_pretrain"),
    ):
        if getattr(args, flag, False):
            changes[name] = False
    if getattr(args, "baseline_kind", None) is not None:
        changes["baseline_kind"] = args.baseline_kind
    cfg = replace(cfg, **changes)
    if getattr(args, "stage_epochs", None):
        stages = tuple(int(v) for v in args.stage_epochs.split(","))
        cfg = replace(cfg, train=replace(cfg.train, stage_epochs=stages, epochs_total=sum(stages)))
    if getattr(args, "pretrain_epochs", None) is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, epochs=args.pretrain_epochs))
    return cfg


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = GenConfig.from_dict(load_yaml(args.config)) if args.config else GenConfig()
    changes = {}
    for name in ("n_patients", "seed", "noise_sigma", "label_noise", "frames_per_video"):
        value = getattr(args, name)
        if value is not None:
            changes[name] = value
    if args.image_size:
        changes["image_size"] = (args.image_size, args.image_size)
    if args.no_videos:
        changes["with_videos"] = False
    cfg = replace(cfg, **changes)
    out = Path(args.out) if args.out else artifact_root() / f"dataset_n{cfg.n_patients}_s{cfg.seed}"
    manifest = generate_dataset(cfg, out)
    print(f"{out}\t{manifest['checksum']}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    from .training import extract_pretrain_frames, pretrain_backbone

    cfg = _experiment_config(args)
    cfg.validate()
    dataset = resolve_dataset(cfg)
    split = split_dataset(dataset.records, cfg.split_ratios, cfg.split_seed)
    frames = extract_pretrain_frames(dataset.subset(split.train), dataset.video_map, dataset.schema, cfg.pretrain.rate_fps, cfg.pretrain.frame_label)
    state, history = pretrain_backbone(frames, cfg.backbone, cfg.pretrain)
    out = Path(args.out) if args.out else artifact_root() / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"spec": cfg.backbone.to_dict(), "pretrain": cfg.pretrain.to_dict(), "state_dict": state}, out / "backbone.pt")
    (out / "pretrain_history.json").write_text(json.dumps(history.epochs, indent=2) + "\n")
    print(f"{len(frames)} frames, holdout accuracy {history.final_holdout_accuracy}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    if cfg.output_dir is None:
        cfg = replace(cfg, output_dir=str(artifact_root() / f"train_s{cfg.seed}"))
    result = run_experiment(cfg)
    print(f"{result.artifact_dir}\ttest accuracy {result.metrics.accuracy:.3g}\tselected {result.selected}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint, dataset.schema, dataset.image_map)
    if args.split:
        split = Split.from_dict(load_yaml(args.split))
    else:
        split = split_dataset(dataset.records, seed=args.split_seed or 0)
    ids = [r.patient_id for r in dataset.records] if args.subset == "all" else getattr(split, args.subset)
    metrics = evaluate(model, dataset.subset(ids), dataset.schema, dataset.image_map)
    text = json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    if cfg.output_dir is None:
        cfg = replace(cfg, output_dir=str(artifact_root() / f"ablate_s{cfg.seed}"))
    rows = args.rows.split("|") if args.rows else None
    if rows:
        known = {label for label, _ in ABLATION_ROWS}
        unknown = [r for r in rows if r not in known]
        if unknown:
            raise ValueError(f"unknown ablation rows {unknown}; choose from {sorted(known)}")
    table = run_ablation_matrix(cfg, rows=rows, pretrain_cache=PretrainCache(), workers=args.workers)
    paths = emit_report(table, cfg.output_dir)
    print(paths["summary"].read_text(), end="")
    return EXIT_OK if all(r.status == "ok" for r in table.rows) else EXIT_RUNTIME


def cmd_report(args: argparse.Namespace) -> int:
    source = Path(args.results)
    if source.is_dir():
        source = source / "results.json"
    table = load_results(source)
    paths = emit_report(table, args.out or source.parent)
    print(paths["summary"].read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fibronet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--n-patients", dest="n_patients", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--label-noise", dest="label_noise", type=float)
    p.add_argument("--frames-per-video", dest="frames_per_video", type=int)
    p.add_argument("--no-videos", dest="no_videos", action="store_true")
    p.set_defaults(func=cmd_synth)

    def experiment_flags(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
        p.add_argument("--config", help="experiment YAML; flags override it")
        p.add_argument("--dataset")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, required=seed_required)
        p.add_argument("--split-seed", dest="split_seed", type=int)
        p.add_argument("--stage-epochs", dest="stage_epochs", help="e.g. 20,20,10")
        p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
        p.add_argument("--lambda", dest="lambda_", type=float)

    p = sub.add_parser("pretrain", help="video-frame pre-training of the backbone")
    experiment_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    experiment_flags(p)
    p.add_argument("--no-indicator", dest="no_indicator", action="store_true")
    p.add_argument("--no-sharing", dest="no_sharing", action="store_true")
    p.add_argument("--no-3stage", dest="no_3stage", action="store_true")
    p.add_argument("--no-pretrain", dest="no_pretrain", action="store_true")
    p.add_argument("--baseline-kind", dest="baseline_kind", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", help="split YAML written by train/ablate")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--subset", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six-row ablation matrix")
    experiment_flags(p, seed_required=True)
    p.add_argument("--rows", help="'|'-separated subset of row labels")
    p.add_argument("--workers", type=int, default=1, help="rows trained concurrently (default 1)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-emit report files from results.json")
    p.add_argument("--results", required=True, help="results.json or the directory holding it")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"fibronet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"fibronet: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"fibronet: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

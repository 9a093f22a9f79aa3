"""Metrics, experiment runs, the six-row ablation matrix and report files."""

from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Final, Mapping, Sequence

import numpy as np
import torch

from .model import (
    BackboneSpec,
    LossWeights,
    MultiStreamNet,
    SingleImageNet,
    check_compatible,
    head_key,
    save_checkpoint,
    state_snapshot,
)
from .schema import (
    N_DIAGNOSES,
    ImageIndicatorMap,
    IndicatorSchema,
    PatientRecord,
    dump_yaml,
    load_image_map,
    load_schema,
    load_video_map,
    load_yaml,
    stable_hash,
)
from .synth import Dataset, Split, load_dataset, split_dataset
from .training import (
    PretrainConfig,
    TrainConfig,
    TrainHistory,
    extract_pretrain_frames,
    pretrain_backbone,
    train_3stage,
    train_single_image,
)

log = logging.getLogger(__name__)

ARTIFACT_ROOT_ENV: Final[str] = "FIBRONET_ARTIFACT_ROOT"

ROW_BASELINE: Final[str] = "[14]"
ROW_FULL: Final[str] = "Ours"
ROW_NO_3STAGE: Final[str] = "Without 3-stage"
ROW_NO_INDICATOR: Final[str] = "Without Indicator"
ROW_NO_SHARING: Final[str] = "Without Weight Sharing"
ROW_NO_PRETRAIN: Final[str] = "Without Pre-train"

# Row order and seed offsets (row seed = base seed + offset).
ABLATION_ROWS: Final[tuple[tuple[str, int], ...]] = (
    (ROW_BASELINE, 100),
    (ROW_FULL, 0),
    (ROW_NO_3STAGE, 200),
    (ROW_NO_INDICATOR, 300),
    (ROW_NO_SHARING, 400),
    (ROW_NO_PRETRAIN, 500),
)


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    confusion: list[list[int]]
    per_class_recall: list[float | None]
    pair_accuracy: dict[str, float]
    n_patients: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: torch.nn.Module, records: Sequence[PatientRecord], schema: IndicatorSchema, image_map: ImageIndicatorMap) -> MetricsReport:
    """Deterministic evaluation: argmax of each head, no augmentation."""
    if not records:
        raise EvaluationError("empty evaluation split")
    check_compatible(model, schema, image_map)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    confusion = np.zeros((N_DIAGNOSES, N_DIAGNOSES), dtype=int)
    pair_hits: dict[str, int] = {}
    for r in records:
        out = model.predict(r)
        confusion[r.diagnosis, int(torch.as_tensor(out.diagnosis_logits).argmax())] += 1
        for pair, logits in out.indicator_logits.items():
            key = head_key(pair)
            pair_hits[key] = pair_hits.get(key, 0) + int(int(torch.as_tensor(logits).argmax()) == r.indicator_labels[pair[1]])
    if was_training:
        model.train()
    n = len(records)
    rows = confusion.sum(axis=1)
    return MetricsReport(
        accuracy=float(np.trace(confusion)) / n,
        confusion=confusion.tolist(),
        per_class_recall=[float(confusion[c, c] / rows[c]) if rows[c] else None for c in range(N_DIAGNOSES)],
        pair_accuracy={k: v / n for k, v in sorted(pair_hits.items())},
        n_patients=n,
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: str | None = None
    schema_path: str | None = None
    image_map_path: str | None = None
    video_map_path: str | None = None
    backbone: BackboneSpec = BackboneSpec()
    train: TrainConfig = TrainConfig()
    pretrain: PretrainConfig = PretrainConfig()
    loss_lambda: float = 0.1
    lambda_overrides: Mapping[str, float] = field(default_factory=dict)
    use_indicator_guidance: bool = True
    use_weight_sharing: bool = True
    use_3stage: bool = True
    use_pretrain: bool = True
    baseline_kind: int | None = None
    output_dir: str | None = None
    seed: int = 0
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.70, 0.10, 0.20)

    def validate(self) -> None:
        self.train.validate()
        self.pretrain.validate()
        if self.loss_lambda < 0 or any(v < 0 for v in self.lambda_overrides.values()):
            raise ValueError("loss weights must be non-negative")
        if self.baseline_kind is not None:
            if not 1 <= self.baseline_kind <= 10:
                raise ValueError("baseline_kind must be an image kind id 1..10")
            if not (self.use_indicator_guidance and self.use_weight_sharing and self.use_3stage and self.use_pretrain):
                raise ValueError("baseline mode and ablation switches are mutually exclusive")
        for name in ("dataset_path", "schema_path", "image_map_path", "video_map_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(f"{name} {path} does not exist")

    def to_dict(self) -> dict:
        return {
            "dataset_path": self.dataset_path,
            "schema_path": self.schema_path,
            "image_map_path": self.image_map_path,
            "video_map_path": self.video_map_path,
            "backbone": self.backbone.to_dict(),
            "train": self.train.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "loss_lambda": self.loss_lambda,
            "lambda_overrides": dict(sorted(self.lambda_overrides.items())),
            "use_indicator_guidance": self.use_indicator_guidance,
            "use_weight_sharing": self.use_weight_sharing,
            "use_3stage": self.use_3stage,
            "use_pretrain": self.use_pretrain,
            "baseline_kind": self.baseline_kind,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "split_seed": self.split_seed,
            "split_ratios": list(self.split_ratios),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        if "backbone" in d:
            d["backbone"] = BackboneSpec.from_dict(d["backbone"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "pretrain" in d:
            d["pretrain"] = PretrainConfig.from_dict(d["pretrain"])
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(load_yaml(path) or {})

    def checksum(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")  # where a run is written does not change what it computes
        return stable_hash(d)

    def effective_train(self) -> TrainConfig:
        train = replace(self.train, seed=self.seed)
        if not self.use_3stage:
            train = replace(train, stage_epochs=(0, 0, train.epochs_total))
        return train

    def loss_weights(self, pairs: Sequence[tuple[int, int]]) -> LossWeights:
        if not self.use_indicator_guidance:
            return LossWeights.uniform(pairs, 0.0)
        weights = LossWeights.uniform(pairs, self.loss_lambda)
        for key, value in self.lambda_overrides.items():
            pair = _parse_pair(key)
            if pair not in weights.lambdas:
                raise ValueError(f"lambda override for unmapped pair {key}")
            weights.lambdas[pair] = float(value)
        return weights


def _parse_pair(key: str) -> tuple[int, int]:
    # "img4_ind7" or "4,7"
    if key.startswith("img"):
        a, b = key[3:].split("_ind")
        return int(a), int(b)
    a, b = key.split(",")
    return int(a), int(b)


def artifact_root() -> Path:
    return Path(os.environ.get(ARTIFACT_ROOT_ENV, "artifacts"))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    label: str
    metrics: MetricsReport | None
    history: TrainHistory | None
    artifact_dir: str | None
    status: str
    seed: int
    config_checksum: str
    dataset_checksum: str
    pretrain_history: list[dict] | None = None
    runtime_s: float = 0.0
    selected: str | None = None


class PretrainCache:
    """Reuses one pre-trained backbone across runs that share data, split and pre-train settings."""

    def __init__(self) -> None:
        self._store: dict[str, tuple[dict[str, torch.Tensor], list[dict]]] = {}

    def get(self, dataset: Dataset, split: Split, spec: BackboneSpec, config: PretrainConfig) -> tuple[dict[str, torch.Tensor], list[dict]]:
        key = stable_hash([dataset.checksum, split.to_dict(), spec.to_dict(), config.to_dict()])
        if key not in self._store:
            frames = extract_pretrain_frames(
                dataset.subset(split.train), dataset.video_map, dataset.schema, config.rate_fps, config.frame_label
            )
            state, history = pretrain_backbone(frames, spec, config)
            self._store[key] = (state, history.epochs)
        state, epochs = self._store[key]
        return {k: v.clone() for k, v in state.items()}, epochs


def resolve_dataset(config: ExperimentConfig, dataset: Dataset | None = None) -> Dataset:
    if dataset is None:
        if config.dataset_path is None:
            raise ValueError("no dataset given")
        dataset = load_dataset(config.dataset_path)
    if config.schema_path:
        dataset = replace(dataset, schema=load_schema(config.schema_path))
    if config.image_map_path:
        dataset = replace(dataset, image_map=load_image_map(config.image_map_path))
    if config.video_map_path:
        dataset = replace(dataset, video_map=load_video_map(config.video_map_path))
    return dataset


def _write_status(out: Path | None, status: str) -> None:
    if out is not None:
        (out / "status").write_text(status + "\n")


def run_experiment(
    config: ExperimentConfig,
    dataset: Dataset | None = None,
    split: Split | None = None,
    label: str = ROW_FULL,
    pretrain_cache: PretrainCache | None = None,
) -> ExperimentResult:
    """Optional pre-training, training and test-split evaluation, with artifacts on disk."""
    started = time.process_time()
    config.validate()
    dataset = resolve_dataset(config, dataset)
    split = split or split_dataset(dataset.records, config.split_ratios, config.split_seed)
    out = Path(config.output_dir) if config.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_yaml(config.to_dict(), out / "config")
        dump_yaml(split.to_dict(), out / "split")
        _write_status(out, "running")
    result = ExperimentResult(label, None, None, str(out) if out else None, "running", config.seed, config.checksum(), dataset.checksum)
    try:
        train = dataset.subset(split.train)
        val = dataset.subset(split.val)
        test = dataset.subset(split.test)
        tcfg = config.effective_train()
        if config.baseline_kind is not None:
            model = SingleImageNet(dataset.schema, dataset.image_map, config.baseline_kind, config.backbone, seed=config.seed)
            model, history = train_single_image(model, train, val, tcfg)
        else:
            model = MultiStreamNet(dataset.schema, dataset.image_map, config.backbone, config.use_weight_sharing, seed=config.seed)
            if config.use_pretrain:
                cache = pretrain_cache or PretrainCache()
                state, result.pretrain_history = cache.get(dataset, split, config.backbone, config.pretrain)
                model.load_backbone(state)
            weights = config.loss_weights(model.pairs)
            model, history = train_3stage(model, train, val, tcfg, weights)
        before = state_snapshot(model)
        metrics = evaluate(model, test, dataset.schema, dataset.image_map)
        assert all(torch.equal(before[k], v) for k, v in state_snapshot(model).items())
        result.metrics, result.history, result.status = metrics, history, "ok"
        result.selected = history.selected
        if out is not None:
            (out / "history.table").write_text(history.to_table())
            save_checkpoint(model, out / "checkpoint.pt", {"selected": history.selected, "config_checksum": config.checksum()})
            (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
            if result.pretrain_history is not None:
                (out / "pretrain_history.json").write_text(json.dumps(result.pretrain_history, indent=2) + "\n")
            _write_status(out, "ok")
    except Exception as exc:
        result.status = f"failed: {type(exc).__name__}: {exc}"
        _write_status(out, result.status)
        raise
    finally:
        result.runtime_s = time.process_time() - started
    return result


def run_baseline_single_image(
    config: ExperimentConfig,
    dataset: Dataset | None = None,
    split: Split | None = None,
) -> ExperimentResult:
    if config.baseline_kind is None:
        config = replace(config, baseline_kind=5)  # liver parenchyma
    return run_experiment(config, dataset, split, label=ROW_BASELINE)


def row_config(base: ExperimentConfig, label: str, offset: int, out_root: Path | None) -> ExperimentConfig:
    changes: dict[str, Any] = {"seed": base.seed + offset}
    if out_root is not None:
        slug = label.lower().replace("[", "").replace("]", "").replace(" ", "_").replace("-", "")
        changes["output_dir"] = str(out_root / f"row_{slug or 'baseline'}")
    if label == ROW_BASELINE:
        changes["baseline_kind"] = base.baseline_kind or 5
    elif label == ROW_NO_3STAGE:
        changes["use_3stage"] = False
    elif label == ROW_NO_INDICATOR:
        changes["use_indicator_guidance"] = False
    elif label == ROW_NO_SHARING:
        changes["use_weight_sharing"] = False
    elif label == ROW_NO_PRETRAIN:
        changes["use_pretrain"] = False
    if label != ROW_BASELINE:
        changes["baseline_kind"] = None
    return replace(base, **changes)


@dataclass
class AblationTable:
    rows: list[ExperimentResult]
    base_seed: int
    config_checksum: str
    dataset_checksum: str
    split: Split | None

    def accuracy(self, label: str) -> float | None:
        for row in self.rows:
            if row.label == label:
                return row.metrics.accuracy if row.metrics else None
        raise KeyError(label)


def _run_row(args: tuple) -> ExperimentResult:
    cfg, label, dataset, split, cache = args
    log.info("ablation row %r (seed %d)", label, cfg.seed)
    try:
        return run_experiment(cfg, dataset, split, label=label, pretrain_cache=cache)
    except Exception as exc:  # recorded in the table; remaining rows still run
        log.exception("row %r failed", label)
        return ExperimentResult(label, None, None, cfg.output_dir, f"failed: {type(exc).__name__}: {exc}", cfg.seed, cfg.checksum(), dataset.checksum)


# set in the parent right before forking; workers read it instead of unpickling the dataset
_FORK_JOBS: list[tuple] = []


def _run_forked(index: int) -> ExperimentResult:
    torch.set_num_threads(1)
    return _run_row(_FORK_JOBS[index])


def run_ablation_matrix(
    base_config: ExperimentConfig,
    dataset: Dataset | None = None,
    rows: Sequence[str] | None = None,
    pretrain_cache: PretrainCache | None = None,
    workers: int = 1,
) -> AblationTable:
    """Run the ablation rows on one shared split; a failing row is recorded, not fatal.

    Rows are independent, so ``workers > 1`` trains them in forked processes
    (one torch thread each). The shared backbone is pre-trained once in the
    parent first. Each worker uses one torch thread, so a serial run with
    several threads may differ from it in the last bits of float reductions.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    base_config = replace(base_config, baseline_kind=None)
    base_config.validate()
    dataset = resolve_dataset(base_config, dataset)
    split = split_dataset(dataset.records, base_config.split_ratios, base_config.split_seed)
    out_root = Path(base_config.output_dir) if base_config.output_dir else None
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        dump_yaml(split.to_dict(), out_root / "split")
        dump_yaml(base_config.to_dict(), out_root / "config")
    cache = pretrain_cache or PretrainCache()
    wanted = set(rows) if rows is not None else None
    jobs = [
        (row_config(base_config, label, offset, out_root), label, dataset, split, cache)
        for label, offset in ABLATION_ROWS
        if wanted is None or label in wanted
    ]
    workers = min(workers, len(jobs))
    if workers == 1:
        results = [_run_row(job) for job in jobs]
    else:
        for cfg, *_ in jobs:
            if cfg.use_pretrain and cfg.baseline_kind is None:
                cache.get(dataset, split, cfg.backbone, cfg.pretrain)
        _FORK_JOBS[:] = jobs
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_forked, range(len(jobs))))
        finally:
            _FORK_JOBS.clear()
    return AblationTable(results, base_config.seed, base_config.checksum(), dataset.checksum, split)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _sig3(x: float | None) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "nan"
    return f"{x:.3g}"


def emit_report(results: AblationTable | Sequence[ExperimentResult], out_dir: str | Path) -> dict[str, Path]:
    """Write results.json, ablation.table (CSV) and ablation.summary; byte-stable for equal inputs."""
    table = results if isinstance(results, AblationTable) else None
    rows = list(table.rows if table else results)
    if not rows:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = {label: i for i, (label, _) in enumerate(ABLATION_ROWS)}
    rows.sort(key=lambda r: order.get(r.label, len(order)))
    config_checksum = table.config_checksum if table else rows[0].config_checksum
    dataset_checksum = table.dataset_checksum if table else rows[0].dataset_checksum

    payload = {
        "config_checksum": config_checksum,
        "dataset_checksum": dataset_checksum,
        "base_seed": table.base_seed if table else None,
        "split": table.split.to_dict() if table and table.split else None,
        "rows": [
            {
                "label": r.label,
                "status": r.status,
                "seed": r.seed,
                "accuracy": r.metrics.accuracy if r.metrics else None,
                "n_test": r.metrics.n_patients if r.metrics else None,
                "artifact_path": r.artifact_dir,
                "selected_checkpoint": r.selected,
                "metrics": r.metrics.to_dict() if r.metrics else None,
            }
            for r in rows
        ],
    }
    paths = {"results": out / "results.json", "table": out / "ablation.table", "summary": out / "ablation.summary"}
    paths["results"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row_label", "accuracy", "n_test", "artifact_path", "status"])
    for r in rows:
        writer.writerow(
            [r.label, _sig3(r.metrics.accuracy if r.metrics else None), r.metrics.n_patients if r.metrics else "", r.artifact_dir or "", r.status]
        )
    paths["table"].write_text(buf.getvalue())

    width = max(len(r.label) for r in rows)
    lines = [
        "Ablation summary (test diagnosis accuracy)",
        f"config checksum:  {config_checksum}",
        f"dataset checksum: {dataset_checksum}",
        "",
        f"{'Method':<{width}}  {'Accuracy':>8}  {'n_test':>6}  seed  status",
    ]
    for r in rows:
        acc = _sig3(r.metrics.accuracy if r.metrics else None)
        n = r.metrics.n_patients if r.metrics else "-"
        lines.append(f"{r.label:<{width}}  {acc:>8}  {n!s:>6}  {r.seed:>4}  {r.status}")
    paths["summary"].write_text("\n".join(lines) + "\n")
    return paths


def load_results(path: str | Path) -> AblationTable:
    """Rebuild a report input from a results.json written by emit_report."""
    payload = json.loads(Path(path).read_text())
    rows = [
        ExperimentResult(
            label=r["label"],
            metrics=MetricsReport(**r["metrics"]) if r["metrics"] else None,
            history=None,
            artifact_dir=r["artifact_path"],
            status=r["status"],
            seed=r["seed"],
            config_checksum=payload["config_checksum"],
            dataset_checksum=payload["dataset_checksum"],
            selected=r["selected_checkpoint"],
        )
        for r in payload["rows"]
    ]
    split = Split.from_dict(payload["split"]) if payload.get("split") else None
    return AblationTable(rows, payload["base_seed"], payload["config_checksum"], payload["dataset_checksum"], split)

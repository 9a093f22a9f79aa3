"""Video-frame pre-training, augmentation, momentum SGD and the 3-stage schedule.

All randomness comes from substreams keyed by purpose and position
((seed, tag, epoch, patient index) and so on), so a run does not depend on
the order in which work happens to be scheduled.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Final, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import (
    BackboneSpec,
    LossWeights,
    MultiStreamNet,
    SingleImageNet,
    build_backbone,
    cross_entropy,
    head_key,
    loss_breakdown,
    record_tensor,
)
from .schema import IndicatorSchema, PatientRecord, VideoIndicatorMap

log = logging.getLogger(__name__)

_STREAM_SHUFFLE: Final[int] = 0x5F1
_STREAM_AUGMENT: Final[int] = 0xA06
_STREAM_PRETRAIN: Final[int] = 0x9E7
_STREAM_HOLDOUT: Final[int] = 0x401D


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs_total: int = 50
    stage_epochs: tuple[int, int, int] = (20, 20, 10)
    crop_scale: tuple[float, float] = (0.8, 1.0)
    flip_probability: float = 0.5
    augment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if len(self.stage_epochs) != 3 or any(e < 0 for e in self.stage_epochs):
            raise ValueError("stage_epochs must be three non-negative integers")
        if sum(self.stage_epochs) != self.epochs_total:
            raise ValueError(f"stage_epochs {self.stage_epochs} must sum to epochs_total {self.epochs_total}")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must lie in [0, 1]")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale must satisfy 0 < low <= high <= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_epochs"] = list(self.stage_epochs)
        d["crop_scale"] = list(self.crop_scale)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        for key in ("stage_epochs", "crop_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    rate_fps: float = 1.0
    holdout_fraction: float = 0.1
    frame_label: str = "indicator"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("pretrain epochs must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.frame_label not in ("indicator", "diagnosis"):
            raise ValueError("frame_label must be 'indicator' or 'diagnosis'")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PretrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class StageSpec:
    stage_id: int
    trainable: frozenset[str]
    active_loss: str


STAGES: Final[dict[int, StageSpec]] = {
    1: StageSpec(1, frozenset({"backbone", "indicator_heads"}), "indicator_only"),
    2: StageSpec(2, frozenset({"backbone", "diagnosis_head"}), "diagnosis_only"),
    3: StageSpec(3, frozenset({"backbone", "indicator_heads", "diagnosis_head"}), "total"),
}


@dataclass
class EpochRecord:
    epoch: int
    stage_id: int
    train_diagnosis_loss: float
    train_indicator_loss: float
    train_weighted_indicator_loss: float
    train_total_loss: float
    val_accuracy: float
    val_indicator_accuracy: dict[str, float]
    checkpoint: str


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    selected: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(record)

    @property
    def val_accuracies(self) -> list[float]:
        return [r.val_accuracy for r in self.records]

    def to_table(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["epoch", "stage", "train_diagnosis_loss", "train_indicator_loss", "train_weighted_indicator_loss",
             "train_total_loss", "val_accuracy", "val_mean_indicator_accuracy", "checkpoint"]
        )
        for r in self.records:
            ind = r.val_indicator_accuracy
            mean_ind = sum(ind.values()) / len(ind) if ind else float("nan")
            writer.writerow(
                [r.epoch, r.stage_id, f"{r.train_diagnosis_loss:.6f}", f"{r.train_indicator_loss:.6f}",
                 f"{r.train_weighted_indicator_loss:.6f}", f"{r.train_total_loss:.6f}",
                 f"{r.val_accuracy:.6f}", f"{mean_ind:.6f}", r.checkpoint]
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"selected": self.selected, "records": [asdict(r) for r in self.records]}


def checkpoint_ref(epoch: int) -> str:
    return f"epoch_{epoch:03d}"


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([k & (2**64 - 1) for k in key]))


# ---------------------------------------------------------------------------
# Pre-training frames
# ---------------------------------------------------------------------------


@dataclass
class FrameTable:
    frames: np.ndarray  # (N, H, W) float32
    labels: np.ndarray  # (N,) class index for the frame's head
    video_kinds: np.ndarray  # (N,) video kind id, selects the head
    patient_ids: list[str]
    n_classes: dict[int, int]  # head width per video kind

    def __len__(self) -> int:
        return len(self.labels)


def extract_pretrain_frames(
    records: Sequence[PatientRecord],
    video_map: VideoIndicatorMap,
    schema: IndicatorSchema,
    rate_fps: float = 1.0,
    frame_label: str = "indicator",
) -> FrameTable:
    """Sample every clip at ``rate_fps`` and label each frame from its video kind."""
    frames, labels, kinds, pids = [], [], [], []
    kind_ids = sorted(k for k, _ in video_map.pairs)
    if frame_label == "indicator":
        n_classes = {k: schema.cardinality(video_map.indicator_for(k)) for k in kind_ids}
    else:
        n_classes = {k: len(schema.diagnosis_classes) for k in kind_ids}
    for record in records:
        if not record.videos:
            raise ValueError(f"patient {record.patient_id} has no videos")
        for kind in kind_ids:
            clip = record.videos[kind]
            if not clip.frames:
                raise ValueError(f"patient {record.patient_id} video {kind} has zero frames")
            n = int(math.floor(clip.duration_s * rate_fps + 1e-9))
            stride = clip.native_fps / rate_fps
            if frame_label == "indicator":
                label = record.indicator_labels[video_map.indicator_for(kind)]
            else:
                label = record.diagnosis
            for j in range(n):
                idx = min(int(math.floor(j * stride + 1e-9)), len(clip.frames) - 1)
                frames.append(clip.frames[idx])
                labels.append(label)
                kinds.append(kind)
                pids.append(record.patient_id)
    if not frames:
        return FrameTable(np.zeros((0, 1, 1), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64), [], n_classes)
    return FrameTable(
        frames=np.stack(frames).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        video_kinds=np.asarray(kinds, dtype=np.int64),
        patient_ids=pids,
        n_classes=n_classes,
    )


def holdout_mask(patient_ids: Sequence[str], fraction: float, seed: int) -> np.ndarray:
    """Boolean mask selecting whole patients (about ``fraction`` of them) for hold-out."""
    unique = sorted(set(patient_ids))
    n_hold = int(round(fraction * len(unique)))
    order = _rng(seed, _STREAM_HOLDOUT).permutation(len(unique))
    held = {unique[i] for i in order[:n_hold]}
    return np.array([p in held for p in patient_ids], dtype=bool)


@dataclass
class PretrainHistory:
    epochs: list[dict] = field(default_factory=list)
    # final state of the temporary per-video-kind heads, kept for inspection only
    head_state: dict[str, torch.Tensor] | None = None

    @property
    def final_holdout_accuracy(self) -> float | None:
        return self.epochs[-1]["holdout_accuracy"] if self.epochs else None


def batch_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-row cross entropy with max subtraction."""
    m = logits.max(dim=1, keepdim=True).values.detach()
    lse = m.squeeze(1) + torch.log(torch.exp(logits - m).sum(dim=1))
    return lse - logits.gather(1, labels[:, None]).squeeze(1)


def pretrain_backbone(
    frames: FrameTable,
    spec: BackboneSpec,
    config: PretrainConfig = PretrainConfig(),
) -> tuple[dict[str, torch.Tensor], PretrainHistory]:
    """Train a backbone plus temporary per-video-kind heads on video frames.

    Returns the backbone state (heads discarded) and per-epoch accuracy.
    """
    config.validate()
    if len(frames) == 0:
        raise ValueError("empty frame table")
    gen = torch.Generator().manual_seed(config.seed)
    backbone = build_backbone(spec, gen)
    heads = nn.ModuleDict({str(k): nn.Linear(spec.feature_dim, c) for k, c in sorted(frames.n_classes.items())})
    for h in heads.values():
        bound = 1.0 / math.sqrt(h.in_features)
        with torch.no_grad():
            h.weight.uniform_(-bound, bound, generator=gen)
            h.bias.zero_()
    history = PretrainHistory()
    if config.epochs == 0:
        return {k: v.detach().clone() for k, v in backbone.state_dict().items()}, history

    held = holdout_mask(frames.patient_ids, config.holdout_fraction, config.seed) if config.holdout_fraction > 0 else np.zeros(len(frames), bool)
    train_idx = np.flatnonzero(~held)
    hold_idx = np.flatnonzero(held)
    x_all = torch.from_numpy(frames.frames)[:, None]
    y_all = torch.from_numpy(frames.labels)
    k_all = torch.from_numpy(frames.video_kinds)
    kinds = sorted(frames.n_classes)

    params = {f"backbone.{n}": p for n, p in backbone.named_parameters()}
    params.update({f"heads.{n}": p for n, p in heads.named_parameters()})
    velocity: dict[str, torch.Tensor] = {}

    def logits_and_loss(idx: np.ndarray):
        feats = backbone(x_all[idx])
        y = y_all[idx]
        k = k_all[idx]
        losses, correct = [], 0
        for kind in kinds:
            sel = (k == kind).nonzero(as_tuple=True)[0]
            if len(sel) == 0:
                continue
            logits = heads[str(kind)](feats[sel])
            losses.append(batch_cross_entropy(logits, y[sel]).sum())
            correct += int((logits.argmax(1) == y[sel]).sum())
        return sum(losses) / len(idx), correct

    for epoch in range(1, config.epochs + 1):
        order = _rng(config.seed, _STREAM_PRETRAIN, epoch).permutation(train_idx)
        total_loss, total_correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            for p in params.values():
                p.grad = None
            loss, correct = logits_and_loss(batch)
            loss.backward()
            sgd_update(
                params,
                {n: p.grad for n, p in params.items()},
                velocity,
                config.learning_rate,
                config.momentum,
                config.weight_decay,
            )
            total_loss += loss.item() * len(batch)
            total_correct += correct
        hold_acc = None
        if len(hold_idx):
            with torch.no_grad():
                hits = sum(logits_and_loss(hold_idx[s : s + 256])[1] for s in range(0, len(hold_idx), 256))
            hold_acc = hits / len(hold_idx)
        history.epochs.append(
            {
                "epoch": epoch,
                "train_loss": total_loss / len(order),
                "train_accuracy": total_correct / len(order),
                "holdout_accuracy": hold_acc,
            }
        )
        log.info("pretrain epoch %d: loss %.4f holdout acc %s", epoch, total_loss / len(order), hold_acc)
    history.head_state = {k: v.detach().clone() for k, v in heads.state_dict().items()}
    return {k: v.detach().clone() for k, v in backbone.state_dict().items()}, history


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _draw_crop(
    rng: np.random.Generator, h: int, w: int, scale: tuple[float, float], ratio: tuple[float, float]
) -> tuple[int, int, int, int] | None:
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        # the realized area must respect the lower scale bound after rounding
        if 0 < cw <= w and 0 < ch <= h and cw * ch >= math.floor(scale[0] * area):
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return None


def augment_batch(
    images: torch.Tensor,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.8, 1.0),
    flip_probability: float = 0.5,
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> torch.Tensor:
    """``augment`` applied independently to each image of an (N, C, H, W) batch."""
    n, _, h, w = images.shape
    thetas, cropped, flipped = [], [], []
    for i in range(n):
        crop = _draw_crop(rng, h, w, scale, ratio)
        if crop is not None and (crop[2], crop[3]) != (h, w):
            top, left, ch, cw = crop
            thetas.append([[cw / w, 0.0, (2 * left + cw) / w - 1], [0.0, ch / h, (2 * top + ch) / h - 1]])
            cropped.append(i)
        if rng.random() < flip_probability:
            flipped.append(i)
    if not cropped and not flipped:
        return images
    out = images.clone()
    if cropped:
        # bilinear resize of each crop back to (h, w), pixel centres aligned
        theta = torch.tensor(thetas, dtype=images.dtype)
        grid = F.affine_grid(theta, [len(cropped), images.shape[1], h, w], align_corners=False)
        sampled = F.grid_sample(images[cropped], grid, mode="bilinear", padding_mode="border", align_corners=False)
        out[cropped] = sampled.clamp(0.0, 1.0)
    if flipped:
        out[flipped] = torch.flip(out[flipped], dims=(-1,))
    return out


def augment(
    image: torch.Tensor | np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.8, 1.0),
    flip_probability: float = 0.5,
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> torch.Tensor | np.ndarray:
    """Random resized crop (bilinear back to input size) then random horizontal flip.

    The crop covers an area fraction drawn from ``scale`` with aspect ratio in
    ``ratio``. Accepts an (H, W) or (1, H, W) image and returns the same type
    and shape.
    """
    as_numpy = isinstance(image, np.ndarray)
    x = torch.from_numpy(image) if as_numpy else image
    shape = x.shape
    out = augment_batch(x.reshape(1, 1, *shape[-2:]), rng, scale, flip_probability, ratio).reshape(shape)
    return out.numpy() if as_numpy else out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@torch.no_grad()
def sgd_update(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    velocity: dict[str, torch.Tensor],
    learning_rate: float,
    momentum: float,
    weight_decay: float,
    trainable: Iterable[str] | None = None,
) -> None:
    """In-place momentum SGD with L2 weight decay folded into the gradient.

    velocity <- momentum * velocity + (grad + weight_decay * param)
    param    <- param - learning_rate * velocity

    Names outside ``trainable`` are skipped entirely: neither the parameter nor
    its velocity moves.
    """
    allowed = None if trainable is None else set(trainable)
    names = [n for n in params if allowed is None or n in allowed]
    if not names:
        return
    ps = [params[n] for n in names]
    gs = [grads[n] if grads.get(n) is not None else torch.zeros_like(params[n]) for n in names]
    norms = torch._foreach_norm(gs)
    if not bool(torch.isfinite(torch.stack(norms)).all()):
        bad = [n for n, v in zip(names, norms) if not torch.isfinite(v)]
        raise NonFiniteGradientError(f"non-finite gradient for {', '.join(bad)}")
    vs = [velocity[n] if n in velocity else velocity.setdefault(n, torch.zeros_like(params[n])) for n in names]
    torch._foreach_mul_(vs, momentum)
    torch._foreach_add_(vs, gs)
    if weight_decay:
        torch._foreach_add_(vs, ps, alpha=weight_decay)
    torch._foreach_add_(ps, vs, alpha=-learning_rate)


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------


@dataclass
class _BestTracker:
    accuracy: float = -1.0
    ref: str | None = None
    state: dict[str, torch.Tensor] | None = None

    def offer(self, accuracy: float, ref: str, model: nn.Module) -> None:
        if accuracy > self.accuracy:
            self.accuracy = accuracy
            self.ref = ref
            self.state = {k: v.detach().clone() for k, v in model.state_dict().items()}


@torch.no_grad()
def validation_metrics(model: nn.Module, records: Sequence[PatientRecord]) -> tuple[float, dict[str, float]]:
    if not records:
        return float("nan"), {}
    was_training = model.training
    model.eval()
    hits = 0
    pair_hits: dict[str, int] = {}
    for r in records:
        out = model.predict(r)
        hits += int(out.diagnosis_logits.argmax()) == r.diagnosis
        for pair, logits in out.indicator_logits.items():
            key = head_key(pair)
            pair_hits[key] = pair_hits.get(key, 0) + (int(logits.argmax()) == r.indicator_labels[pair[1]])
    model.train(was_training)
    n = len(records)
    return hits / n, {k: v / n for k, v in sorted(pair_hits.items())}


def _augmented(x: torch.Tensor, config: TrainConfig, epoch: int, index: int) -> torch.Tensor:
    if not config.augment:
        return x
    rng = _rng(config.seed, _STREAM_AUGMENT, epoch, index)
    return augment_batch(x, rng, config.crop_scale, config.flip_probability)


LossFn = Callable[[nn.Module, PatientRecord, torch.Tensor], tuple[torch.Tensor, dict[str, float]]]


def _fit(
    model: nn.Module,
    train: Sequence[PatientRecord],
    val: Sequence[PatientRecord],
    epochs: int,
    stage_id: int,
    trainable_groups: Iterable[str],
    loss_fn: LossFn,
    inputs: Callable[[PatientRecord], torch.Tensor],
    config: TrainConfig,
    history: TrainHistory,
    tracker: _BestTracker | None,
) -> None:
    groups = model.param_groups()
    trainable = {n for g in trainable_groups for n in groups[g]}
    params = dict(model.named_parameters())
    for name, p in params.items():
        p.requires_grad_(name in trainable)
    velocity: dict[str, torch.Tensor] = {}  # reset at every stage boundary
    cached = [inputs(r) for r in train]
    model.train()
    try:
        for _ in range(epochs):
            epoch = (history.records[-1].epoch if history.records else 0) + 1
            order = _rng(config.seed, _STREAM_SHUFFLE, epoch).permutation(len(train))
            sums = {"diagnosis": 0.0, "indicator": 0.0, "weighted_indicator": 0.0, "total": 0.0}
            for i in order:
                x = _augmented(cached[i], config, epoch, int(i))
                for p in params.values():
                    p.grad = None
                loss, parts = loss_fn(model, train[i], x)
                if loss.requires_grad:
                    loss.backward()
                sgd_update(
                    params,
                    {n: params[n].grad for n in trainable},
                    velocity,
                    config.learning_rate,
                    config.momentum,
                    config.weight_decay,
                    trainable,
                )
                for k in sums:
                    sums[k] += parts.get(k, 0.0)
            n = max(len(train), 1)
            val_acc, val_ind = validation_metrics(model, val)
            ref = checkpoint_ref(epoch)
            history.append(
                EpochRecord(
                    epoch=epoch,
                    stage_id=stage_id,
                    train_diagnosis_loss=sums["diagnosis"] / n,
                    train_indicator_loss=sums["indicator"] / n,
                    train_weighted_indicator_loss=sums["weighted_indicator"] / n,
                    train_total_loss=sums["total"] / n,
                    val_accuracy=val_acc,
                    val_indicator_accuracy=val_ind,
                    checkpoint=ref,
                )
            )
            log.info("epoch %d stage %d: total %.4f val acc %.3f", epoch, stage_id, sums["total"] / n, val_acc)
            if tracker is not None:
                tracker.offer(val_acc, ref, model)
    finally:
        for p in params.values():
            p.requires_grad_(True)
        model.eval()


def stage_loss(stage: StageSpec, weights: LossWeights) -> LossFn:
    # all-zero weights make stage 1 a pure weight-decay step, so skip the dead backward pass
    skip_grad = stage.active_loss == "indicator_only" and weights.all_zero

    def fn(model: nn.Module, record: PatientRecord, x: torch.Tensor):
        with torch.set_grad_enabled(not skip_grad):
            out = model(x)
            b = loss_breakdown(out, record, weights)
            weighted = b.indicator_term(weights)
        if stage.active_loss == "indicator_only":
            active = weighted
        elif stage.active_loss == "diagnosis_only":
            active = b.diagnosis_loss
        else:
            active = b.total
        parts = {
            "diagnosis": b.diagnosis_loss.item(),
            "indicator": sum(v.item() for v in b.indicator_losses.values()),
            "weighted_indicator": weighted.item(),
            "total": b.total.item(),
        }
        return active, parts

    return fn


def run_stage(
    model: MultiStreamNet,
    train: Sequence[PatientRecord],
    val: Sequence[PatientRecord],
    stage: StageSpec,
    epochs: int,
    config: TrainConfig,
    weights: LossWeights,
    history: TrainHistory | None = None,
    tracker: _BestTracker | None = None,
) -> TrainHistory:
    """Train ``epochs`` epochs of one stage; parameters outside ``stage.trainable`` are untouched.

    Appends to ``history`` (a fresh one if None) and returns it.
    """
    history = TrainHistory() if history is None else history
    if epochs <= 0:
        return history
    _fit(model, train, val, epochs, stage.stage_id, stage.trainable, stage_loss(stage, weights),
         lambda r: record_tensor(r), config, history, tracker)
    return history


def select_best_checkpoint(history: TrainHistory | Sequence[float]) -> str:
    """Checkpoint with maximal validation accuracy; earliest epoch wins ties."""
    if isinstance(history, TrainHistory):
        records = [(r.val_accuracy, r.epoch, r.checkpoint) for r in history.records]
    else:
        records = [(acc, i + 1, checkpoint_ref(i + 1)) for i, acc in enumerate(history)]
    if not records:
        raise ValueError("empty history")
    best = records[0]
    for rec in records[1:]:
        if rec[0] > best[0]:
            best = rec
    return best[2]


def train_3stage(
    model: MultiStreamNet,
    train: Sequence[PatientRecord],
    val: Sequence[PatientRecord],
    config: TrainConfig,
    weights: LossWeights,
) -> tuple[MultiStreamNet, TrainHistory]:
    """Stages 1 -> 2 -> 3, then restore the best validation checkpoint."""
    config.validate()
    history = TrainHistory()
    tracker = _BestTracker()
    for stage_id, epochs in zip((1, 2, 3), config.stage_epochs):
        run_stage(model, train, val, STAGES[stage_id], epochs, config, weights, history, tracker)
    if tracker.state is not None:
        model.load_state_dict(tracker.state)
        history.selected = tracker.ref
        assert tracker.ref == select_best_checkpoint(history)
    return model, history


def _single_image_loss(model: nn.Module, record: PatientRecord, x: torch.Tensor):
    out = model(x)
    loss = cross_entropy(out.diagnosis_logits, record.diagnosis)
    value = loss.item()
    return loss, {"diagnosis": value, "total": value}


def train_single_image(
    model: SingleImageNet,
    train: Sequence[PatientRecord],
    val: Sequence[PatientRecord],
    config: TrainConfig,
) -> tuple[SingleImageNet, TrainHistory]:
    """Diagnosis-only training of the single-image baseline for ``epochs_total`` epochs."""
    config.validate()
    history = TrainHistory()
    tracker = _BestTracker()

    def inputs(r: PatientRecord) -> torch.Tensor:
        return torch.from_numpy(np.asarray(r.images[model.kind], dtype=np.float32))[None, None]

    _fit(model, train, val, config.epochs_total, 0, ("backbone", "diagnosis_head"), _single_image_loss,
         inputs, config, history, tracker)
    if tracker.state is not None:
        model.load_state_dict(tracker.state)
        history.selected = tracker.ref
    return model, history

"""Weight-shared multi-stream network with per-(image, indicator) heads.

Ten indicator images go through one backbone (or ten, when sharing is
ablated). Each image feature feeds the heads of the indicators mapped to its
kind; the ten features concatenated in kind-id order feed the diagnosis head.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Final, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import (
    N_DIAGNOSES,
    N_IMAGE_KINDS,
    ImageIndicatorMap,
    IndicatorSchema,
    PatientRecord,
    map_checksum,
    schema_checksum,
)

CHECKPOINT_VERSION: Final[int] = 1

# (in_channels, out_channels) of the three tiny-backbone blocks; each block is
# a 3x3 convolution with stride 2 (the 2x downsampling) followed by GELU.
# GELU rather than ReLU keeps the loss smooth, so central differences at
# epsilon=1e-3 do not straddle activation kinks.
TINY_BLOCKS: Final[tuple[tuple[int, int], ...]] = ((1, 16), (16, 32), (32, 64))

VGG16_CONFIG: Final = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")

Pair = tuple[int, int]


class CheckpointMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    variant: str = "tiny"
    input_size: tuple[int, int] = (64, 64)
    feature_dim: int = 128

    def __post_init__(self) -> None:
        if self.variant not in ("tiny", "vgg16_truncated"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.variant == "vgg16_truncated" and self.feature_dim != 4096:
            raise ValueError("vgg16_truncated produces 4096-D features")
        h, w = self.input_size
        if self.variant == "tiny" and (h % 8 or w % 8):
            raise ValueError("tiny backbone needs input sides divisible by 8")

    @classmethod
    def vgg16(cls, input_size: tuple[int, int] = (224, 224)) -> "BackboneSpec":
        return cls("vgg16_truncated", input_size, 4096)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "input_size": list(self.input_size), "feature_dim": self.feature_dim}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneSpec":
        return cls(d["variant"], tuple(d["input_size"]), int(d["feature_dim"]))


def _init_dense(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


def _init_conv(layer: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


def init_module(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            _init_conv(m, gen)
        elif isinstance(m, nn.Linear):
            _init_dense(m, gen)


class TinyBackbone(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        layers: list[nn.Module] = []
        for c_in, c_out in TINY_BLOCKS:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.GELU()]
        self.features = nn.Sequential(*layers)
        h, w = spec.input_size
        self.project = nn.Linear(TINY_BLOCKS[-1][1] * (h // 8) * (w // 8), spec.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.features(x).flatten(1))


class VGG16Truncated(nn.Module):
    """VGG-16 with the last two fully connected layers removed (4096-D output)."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for v in VGG16_CONFIG:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(c_in, v, 3, padding=1), nn.ReLU()]
                c_in = v
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d((7, 7))
        self.fc6 = nn.Linear(512 * 7 * 7, 4096)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return F.relu(self.fc6(self.pool(self.features(x)).flatten(1)))


def build_backbone(spec: BackboneSpec, gen: torch.Generator) -> nn.Module:
    net = TinyBackbone(spec) if spec.variant == "tiny" else VGG16Truncated(spec)
    init_module(net, gen)
    return net


def head_key(pair: Pair) -> str:
    return f"img{pair[0]}_ind{pair[1]}"


@dataclass
class ForwardOutput:
    features: dict[int, torch.Tensor]
    indicator_logits: dict[Pair, torch.Tensor]
    diagnosis_logits: torch.Tensor


@dataclass
class LossBreakdown:
    diagnosis_loss: torch.Tensor
    indicator_losses: dict[Pair, torch.Tensor]
    total: torch.Tensor

    def indicator_term(self, weights: "LossWeights") -> torch.Tensor:
        return sum((weights.lambdas[p] * loss for p, loss in self.indicator_losses.items()), torch.zeros(()))

    def as_floats(self) -> dict:
        return {
            "diagnosis_loss": self.diagnosis_loss.item(),
            "indicator_losses": {head_key(p): v.item() for p, v in self.indicator_losses.items()},
            "total": self.total.item(),
        }


@dataclass
class LossWeights:
    lambdas: dict[Pair, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.lambdas.values()):
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def uniform(cls, pairs: Iterable[Pair], value: float = 0.1) -> "LossWeights":
        return cls({tuple(p): float(value) for p in pairs})

    def ordered(self, pairs: Sequence[Pair]) -> list[float]:
        return [self.lambdas[p] for p in pairs]

    @property
    def all_zero(self) -> bool:
        return all(v == 0 for v in self.lambdas.values())


class MultiStreamNet(nn.Module):
    def __init__(
        self,
        schema: IndicatorSchema,
        image_map: ImageIndicatorMap,
        spec: BackboneSpec = BackboneSpec(),
        share_weights: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.spec = spec
        self.share_weights = share_weights
        self.pairs: list[Pair] = image_map.sorted_pairs()
        self.cardinalities = schema.cardinalities()
        self.schema_checksum = schema_checksum(schema)
        self.map_checksum = map_checksum(image_map)
        n_stores = 1 if share_weights else N_IMAGE_KINDS
        self.backbones = nn.ModuleList(build_backbone(spec, gen) for _ in range(n_stores))
        self.indicator_heads = nn.ModuleDict()
        for pair in self.pairs:
            head = nn.Linear(spec.feature_dim, self.cardinalities[pair[1]])
            _init_dense(head, gen)
            self.indicator_heads[head_key(pair)] = head
        self.diagnosis_head = nn.Linear(N_IMAGE_KINDS * spec.feature_dim, N_DIAGNOSES)
        _init_dense(self.diagnosis_head, gen)

    def stream_backbone(self, kind: int) -> nn.Module:
        return self.backbones[0] if self.share_weights else self.backbones[kind - 1]

    def load_backbone(self, state: Mapping[str, torch.Tensor]) -> None:
        """Copy one backbone state into every store."""
        for bb in self.backbones:
            bb.load_state_dict(state)

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"backbone": [], "indicator_heads": [], "diagnosis_head": []}
        for name, _ in self.named_parameters():
            groups[name.split(".")[0] if not name.startswith("backbones") else "backbone"].append(name)
        return groups

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        """(10, 1, H, W) images in kind-id order -> (10, D) features."""
        if images.shape[0] != N_IMAGE_KINDS:
            raise ValueError(f"expected {N_IMAGE_KINDS} images, got {images.shape[0]}")
        if tuple(images.shape[-2:]) != tuple(self.spec.input_size):
            raise ValueError(f"image size {tuple(images.shape[-2:])} != backbone input {self.spec.input_size}")
        if self.share_weights:
            return self.backbones[0](images)
        return torch.cat([bb(images[k : k + 1]) for k, bb in enumerate(self.backbones)])

    def predict_indicators(self, features: torch.Tensor) -> dict[Pair, torch.Tensor]:
        return {pair: self.indicator_heads[head_key(pair)](features[pair[0] - 1]) for pair in self.pairs}

    def predict_diagnosis(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[0] != N_IMAGE_KINDS:
            raise ValueError("diagnosis needs all 10 image features")
        return self.diagnosis_head(features.reshape(-1))

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        feats = self.extract_features(images)
        return ForwardOutput(
            features={k + 1: feats[k] for k in range(N_IMAGE_KINDS)},
            indicator_logits=self.predict_indicators(feats),
            diagnosis_logits=self.predict_diagnosis(feats),
        )

    @torch.no_grad()
    def predict(self, record: PatientRecord) -> ForwardOutput:
        return self(record_tensor(record, dtype=self.dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.diagnosis_head.weight.dtype


class SingleImageNet(nn.Module):
    """Baseline: one backbone and a 4-way head reading a single image kind."""

    def __init__(self, schema: IndicatorSchema, image_map: ImageIndicatorMap, kind: int = 5, spec: BackboneSpec = BackboneSpec(), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.spec = spec
        self.kind = kind
        self.pairs: list[Pair] = []
        self.schema_checksum = schema_checksum(schema)
        self.map_checksum = map_checksum(image_map)
        self.backbone = build_backbone(spec, gen)
        self.diagnosis_head = nn.Linear(spec.feature_dim, N_DIAGNOSES)
        _init_dense(self.diagnosis_head, gen)

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"backbone": [], "indicator_heads": [], "diagnosis_head": []}
        for name, _ in self.named_parameters():
            groups["backbone" if name.startswith("backbone") else "diagnosis_head"].append(name)
        return groups

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        feat = self.backbone(image)[0]
        return ForwardOutput({self.kind: feat}, {}, self.diagnosis_head(feat))

    @torch.no_grad()
    def predict(self, record: PatientRecord) -> ForwardOutput:
        img = torch.from_numpy(np.asarray(record.images[self.kind], dtype=np.float32)).to(self.dtype)
        return self(img[None, None])

    @property
    def dtype(self) -> torch.dtype:
        return self.diagnosis_head.weight.dtype


def record_tensor(record: PatientRecord, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    missing = [k for k in range(1, N_IMAGE_KINDS + 1) if k not in record.images]
    if missing:
        raise ValueError(f"image kinds {missing} missing")
    stack = np.stack([np.asarray(record.images[k], dtype=np.float32) for k in range(1, N_IMAGE_KINDS + 1)])
    return torch.from_numpy(stack)[:, None].to(dtype)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: torch.Tensor, label: int) -> torch.Tensor:
    """-log softmax(logits)[label] with max subtraction."""
    n = logits.shape[-1]
    if not 0 <= int(label) < n:
        raise ValueError(f"label {label} out of range for {n} logits")
    m = logits.max().detach()
    return m + torch.log(torch.exp(logits - m).sum()) - logits[int(label)]


def total_loss(diagnosis_loss, indicator_losses: Sequence, weights: LossWeights | Sequence[float]):
    """Diagnosis loss plus the lambda-weighted indicator losses.

    ``weights`` is either a ``LossWeights`` (its values taken in insertion
    order) or a plain sequence of lambdas aligned with ``indicator_losses``.
    """
    lambdas = list(weights.lambdas.values()) if isinstance(weights, LossWeights) else list(weights)
    if len(lambdas) != len(indicator_losses):
        raise ValueError(f"{len(indicator_losses)} indicator losses but {len(lambdas)} lambdas")
    total = diagnosis_loss
    for lam, loss in zip(lambdas, indicator_losses):
        total = total + lam * loss
    return total


def loss_breakdown(output: ForwardOutput, record: PatientRecord, weights: LossWeights) -> LossBreakdown:
    diag = cross_entropy(output.diagnosis_logits, record.diagnosis)
    ind = {pair: cross_entropy(logits, record.indicator_labels[pair[1]]) for pair, logits in output.indicator_logits.items()}
    pairs = list(ind)
    total = total_loss(diag, [ind[p] for p in pairs], [weights.lambdas[p] for p in pairs])
    return LossBreakdown(diag, ind, total)


def forward_patient(
    record: PatientRecord,
    model: MultiStreamNet,
    weights: LossWeights,
    images: torch.Tensor | None = None,
) -> tuple[ForwardOutput, LossBreakdown]:
    if images is None:
        images = record_tensor(record, dtype=model.dtype)
    output = model(images)
    return output, loss_breakdown(output, record, weights)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

GradFn = Callable[[nn.Module, PatientRecord, LossWeights], dict[str, torch.Tensor]]


def analytic_gradient(model: nn.Module, record: PatientRecord, weights: LossWeights) -> dict[str, torch.Tensor]:
    model.zero_grad(set_to_none=True)
    _, breakdown = forward_patient(record, model, weights)
    breakdown.total.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


def _sample_coordinates(params: dict[str, torch.Tensor], n_samples: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    # at least two entries from every tensor, the rest uniform over all scalars
    coords = []
    for name, p in params.items():
        for idx in rng.choice(p.numel(), size=min(2, p.numel()), replace=False):
            coords.append((name, int(idx)))
    names = list(params)
    sizes = np.array([params[n].numel() for n in names], dtype=float)
    while len(coords) < n_samples:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        coords.append((name, int(rng.integers(params[name].numel()))))
    return coords


def gradient_check(
    model: nn.Module,
    record: PatientRecord,
    weights: LossWeights,
    epsilon: float = 1e-3,
    n_samples: int = 200,
    seed: int = 0,
    grad_fn: GradFn = analytic_gradient,
) -> float:
    """Max relative error between ``grad_fn`` and central finite differences.

    Runs on a float64 copy of ``model``; the original is untouched.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    analytic = grad_fn(m, record, weights)
    params = dict(m.named_parameters())
    rng = np.random.default_rng(seed)

    def loss_value() -> float:
        with torch.no_grad():
            value = float(forward_patient(record, m, weights)[1].total)
        if not math.isfinite(value):
            raise FloatingPointError("non-finite loss during gradient check")
        return value

    worst = 0.0
    for name, idx in _sample_coordinates(params, n_samples, rng):
        flat = params[name].data.view(-1)
        original = flat[idx].item()
        flat[idx] = original + epsilon
        plus = loss_value()
        flat[idx] = original - epsilon
        minus = loss_value()
        flat[idx] = original
        numeric = (plus - minus) / (2 * epsilon)
        a = float(analytic[name].view(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: nn.Module, path: str | Path, extra: Mapping | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_type": type(model).__name__,
        "backbone_spec": model.spec.to_dict(),
        "share_weights": getattr(model, "share_weights", True),
        "single_image_kind": getattr(model, "kind", None),
        "schema_checksum": model.schema_checksum,
        "map_checksum": model.map_checksum,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": dict(extra or {}),
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path, schema: IndicatorSchema, image_map: ImageIndicatorMap) -> nn.Module:
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload["schema_checksum"] != schema_checksum(schema):
        raise CheckpointMismatchError("checkpoint was trained against a different indicator schema")
    if payload["map_checksum"] != map_checksum(image_map):
        raise CheckpointMismatchError("checkpoint was trained against a different image-indicator map")
    spec = BackboneSpec.from_dict(payload["backbone_spec"])
    if payload["model_type"] == "SingleImageNet":
        model: nn.Module = SingleImageNet(schema, image_map, payload["single_image_kind"], spec)
    else:
        model = MultiStreamNet(schema, image_map, spec, payload["share_weights"])
    model.load_state_dict(payload["state_dict"])
    return model


def check_compatible(model: nn.Module, schema: IndicatorSchema, image_map: ImageIndicatorMap) -> None:
    if getattr(model, "schema_checksum", None) != schema_checksum(schema):
        raise CheckpointMismatchError("model schema checksum does not match the evaluation schema")
    if getattr(model, "map_checksum", None) != map_checksum(image_map):
        raise CheckpointMismatchError("model map checksum does not match the evaluation map")


def state_snapshot(model: nn.Module, names: Iterable[str] | None = None) -> dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    keys = list(params) if names is None else list(names)
    return {k: params[k].detach().clone() for k in keys}


def bit_equal(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)

"""Dataset schema: indicators, image/video kinds, their mappings, and patient records.

Every type here is immutable. Validation never raises; it returns a
``ValidationReport`` whose violations name the offending field and rule.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final, Mapping

import numpy as np
import yaml

FORMAT_VERSION: Final[int] = 1
N_INDICATORS: Final[int] = 13
N_IMAGE_KINDS: Final[int] = 10
N_VIDEO_KINDS: Final[int] = 8
N_DIAGNOSES: Final[int] = 4
VIDEO_DURATION_S: Final[float] = 5.0


@dataclass(frozen=True)
class IndicatorDef:
    id: int
    name: str
    class_names: tuple[str, ...]
    declared_counts: tuple[int, ...] | None = None

    @property
    def cardinality(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class IndicatorSchema:
    indicators: tuple[IndicatorDef, ...]
    diagnosis_classes: tuple[str, ...]
    diagnosis_declared_counts: tuple[int, ...] | None = None

    def indicator(self, indicator_id: int) -> IndicatorDef:
        for ind in self.indicators:
            if ind.id == indicator_id:
                return ind
        raise KeyError(f"unknown indicator {indicator_id}")

    def cardinality(self, indicator_id: int) -> int:
        return self.indicator(indicator_id).cardinality

    @property
    def indicator_ids(self) -> tuple[int, ...]:
        return tuple(sorted(ind.id for ind in self.indicators))

    def cardinalities(self) -> dict[int, int]:
        return {ind.id: ind.cardinality for ind in self.indicators}


@dataclass(frozen=True)
class ImageKind:
    id: int
    name: str


@dataclass(frozen=True)
class VideoKind:
    id: int
    name: str


@dataclass(frozen=True)
class ImageIndicatorMap:
    """Many-to-many (image_kind_id, indicator_id) pairs.

    Stored as an ordered tuple rather than a set so that duplicates survive
    long enough to be reported by ``validate_mapping``.
    """

    pairs: tuple[tuple[int, int], ...]
    image_kinds: tuple[ImageKind, ...] = ()

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(set(self.pairs))

    def indicators_for(self, image_kind_id: int) -> list[int]:
        return sorted({ind for kind, ind in self.pairs if kind == image_kind_id})

    def images_for(self, indicator_id: int) -> list[int]:
        return sorted({kind for kind, ind in self.pairs if ind == indicator_id})

    def kind_name(self, image_kind_id: int) -> str:
        for kind in self.image_kinds:
            if kind.id == image_kind_id:
                return kind.name
        return f"image_{image_kind_id}"


@dataclass(frozen=True)
class VideoIndicatorMap:
    pairs: tuple[tuple[int, int], ...]
    video_kinds: tuple[VideoKind, ...] = ()

    def indicator_for(self, video_kind_id: int) -> int:
        found = [ind for kind, ind in self.pairs if kind == video_kind_id]
        if len(found) != 1:
            raise KeyError(f"video kind {video_kind_id} maps to {len(found)} indicators")
        return found[0]

    def kind_name(self, video_kind_id: int) -> str:
        for kind in self.video_kinds:
            if kind.id == video_kind_id:
                return kind.name
        return f"video_{video_kind_id}"


@dataclass(frozen=True)
class VideoClip:
    frames: tuple[np.ndarray, ...]
    duration_s: float = VIDEO_DURATION_S
    native_fps: float = 1.0


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    images: Mapping[int, np.ndarray]
    indicator_labels: Mapping[int, int]
    diagnosis: int
    videos: Mapping[int, VideoClip] | None = None


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(self.violations)


# ---------------------------------------------------------------------------
# Defaults: the 13 indicators and their classes
# ---------------------------------------------------------------------------

_DEFAULT_INDICATORS: Final = (
    (1, "left_hepatic_angle", ("acute", "blunt"), (149, 80)),
    (2, "liver_size", ("normal", "zoom_out"), (180, 49)),
    (3, "right_liver_slant", ("less_than_130mm", "larger_than_130mm"), (124, 105)),
    (4, "liver_parenchyma_echo", ("coarseness", "asymmetry", "patch"), (138, 12, 58)),
    (5, "spleen_size", ("mild_swelling", "moderate_swelling", "severe_swelling"), (174, 22, 19)),
    (6, "liver_capsule_form", ("smooth", "wavy", "jagged"), (122, 63, 44)),
    (7, "portal_vein_diameter", ("less_than_12mm", "larger_than_12mm"), (146, 83)),
    (8, "portal_vein_flow_direction", ("into_the_liver", "out_the_liver"), (224, 5)),
    (9, "hepatic_vein_morphology", ("stiffness", "slim"), (185, 44)),
    (10, "spleen_thickness", ("less_than_40mm", "larger_than_40mm"), (160, 55)),
    (11, "spleen_length", ("less_than_120mm", "larger_than_120mm"), (167, 48)),
    (12, "gallbladder_wall_thickness", ("less_than_3mm", "larger_than_3mm"), (214, 8)),
    (13, "gallbladder_wall_morphology", ("smooth", "rough"), (49, 173)),
)

DIAGNOSIS_CLASSES: Final = ("normal", "coarseness_of_liver_parenchyma_echo", "liver_fibrosis", "liver_cirrhosis")
DIAGNOSIS_DECLARED_COUNTS: Final = (38, 73, 58, 60)

_DEFAULT_IMAGE_KINDS: Final = (
    "left_hepatic_angle",
    "right_liver",
    "hepatic_vein",
    "portal_vein",
    "liver_parenchyma",
    "liver_capsule",
    "spleen_long",
    "spleen_thick",
    "gallbladder",
    "liver_spleen_boundary",
)

DEFAULT_IMAGE_PAIRS: Final = (
    (1, 1), (2, 2), (2, 3), (3, 9), (4, 7), (4, 8), (5, 4),
    (6, 6), (7, 5), (7, 11), (8, 10), (9, 12), (9, 13), (10, 4),
)

DEFAULT_VIDEO_PAIRS: Final = ((1, 1), (2, 2), (3, 9), (4, 6), (5, 4), (6, 7), (7, 5), (8, 12))

_DEFAULT_VIDEO_KINDS: Final = (
    "left_hepatic_angle",
    "right_liver",
    "hepatic_vein",
    "liver_capsule",
    "liver_parenchyma",
    "portal_vein",
    "spleen",
    "gallbladder",
)


def default_schema() -> IndicatorSchema:
    return IndicatorSchema(
        indicators=tuple(IndicatorDef(i, name, classes, counts) for i, name, classes, counts in _DEFAULT_INDICATORS),
        diagnosis_classes=DIAGNOSIS_CLASSES,
        diagnosis_declared_counts=DIAGNOSIS_DECLARED_COUNTS,
    )


def default_image_map() -> ImageIndicatorMap:
    kinds = tuple(ImageKind(i + 1, name) for i, name in enumerate(_DEFAULT_IMAGE_KINDS))
    return ImageIndicatorMap(pairs=DEFAULT_IMAGE_PAIRS, image_kinds=kinds)


def default_video_map() -> VideoIndicatorMap:
    kinds = tuple(VideoKind(i + 1, name) for i, name in enumerate(_DEFAULT_VIDEO_KINDS))
    return VideoIndicatorMap(pairs=DEFAULT_VIDEO_PAIRS, video_kinds=kinds)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_schema(schema: IndicatorSchema) -> ValidationReport:
    report = ValidationReport()
    ids = [ind.id for ind in schema.indicators]
    if sorted(ids) != list(range(1, N_INDICATORS + 1)):
        report.violations.append(f"indicators: indicator ids must be exactly 1..{N_INDICATORS}, each once (got {sorted(ids)})")
    for ind in schema.indicators:
        if ind.cardinality < 2:
            report.violations.append(f"indicator {ind.id}.class_names: cardinality must be >= 2")
        if len(set(ind.class_names)) != len(ind.class_names):
            report.violations.append(f"indicator {ind.id}.class_names: duplicate class names")
        if ind.declared_counts is not None:
            if len(ind.declared_counts) != ind.cardinality:
                report.violations.append(
                    f"indicator {ind.id}.declared_counts: length {len(ind.declared_counts)} != cardinality {ind.cardinality}"
                )
            if any(c < 0 for c in ind.declared_counts):
                report.violations.append(f"indicator {ind.id}.declared_counts: counts must be non-negative")
    if len(schema.diagnosis_classes) != N_DIAGNOSES:
        report.violations.append(f"diagnosis_classes: must be exactly {N_DIAGNOSES} classes")
    counts = schema.diagnosis_declared_counts
    if counts is not None and len(counts) != len(schema.diagnosis_classes):
        report.violations.append("diagnosis_declared_counts: length must match diagnosis_classes")
    return report


def validate_mapping(mapping: ImageIndicatorMap, schema: IndicatorSchema) -> ValidationReport:
    report = ValidationReport()
    seen: set[tuple[int, int]] = set()
    for pair in mapping.pairs:
        if pair in seen:
            report.violations.append(f"pairs: duplicate pair {pair}")
        seen.add(pair)
    valid_indicators = set(schema.indicator_ids)
    for kind, ind in seen:
        if not 1 <= kind <= N_IMAGE_KINDS:
            report.violations.append(f"pairs: image kind {kind} out of range 1..{N_IMAGE_KINDS}")
        if ind not in valid_indicators:
            report.violations.append(f"pairs: indicator {ind} not in schema")
    mapped_indicators = {ind for _, ind in seen}
    for ind in schema.indicator_ids:
        if ind not in mapped_indicators:
            report.violations.append(f"pairs: indicator {ind} unmapped")
    mapped_kinds = {kind for kind, _ in seen}
    for kind in range(1, N_IMAGE_KINDS + 1):
        if kind not in mapped_kinds:
            report.violations.append(f"pairs: image kind {kind} unmapped")
    return report


def validate_video_map(mapping: VideoIndicatorMap, schema: IndicatorSchema) -> ValidationReport:
    report = ValidationReport()
    kinds = [kind for kind, _ in mapping.pairs]
    if sorted(set(kinds)) != list(range(1, N_VIDEO_KINDS + 1)):
        report.violations.append(f"pairs: video ids must be exactly 1..{N_VIDEO_KINDS}")
    for kind in set(kinds):
        if kinds.count(kind) != 1:
            report.violations.append(f"pairs: video kind {kind} must map to exactly one indicator")
    valid_indicators = set(schema.indicator_ids)
    for kind, ind in mapping.pairs:
        if ind not in valid_indicators:
            report.violations.append(f"pairs: video kind {kind} maps to unknown indicator {ind}")
    return report


def _check_raster(image: Any, where: str, report: ValidationReport, shape: tuple[int, int] | None) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2:
        report.violations.append(f"{where}: image must be a 2-D grayscale raster")
        return
    if shape is not None and arr.shape != tuple(shape):
        report.violations.append(f"{where}: shape {arr.shape} != {tuple(shape)}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        report.violations.append(f"{where}: values must lie in [0, 1]")


def validate_record(
    record: PatientRecord,
    schema: IndicatorSchema,
    mapping: ImageIndicatorMap,
    image_size: tuple[int, int] | None = None,
) -> ValidationReport:
    report = ValidationReport()
    for kind in range(1, N_IMAGE_KINDS + 1):
        if kind not in record.images:
            report.violations.append(f"images: image kind {kind} missing")
        else:
            _check_raster(record.images[kind], f"images[{kind}]", report, image_size)
    extra = set(record.images) - set(range(1, N_IMAGE_KINDS + 1))
    if extra:
        report.violations.append(f"images: unknown image kinds {sorted(extra)}")
    cards = schema.cardinalities()
    for ind, card in sorted(cards.items()):
        if ind not in record.indicator_labels:
            report.violations.append(f"indicator_labels: indicator {ind} missing")
            continue
        label = record.indicator_labels[ind]
        if not 0 <= int(label) < card:
            report.violations.append(f"indicator_labels[{ind}]: label {label} outside 0..{card - 1}")
    if not 0 <= int(record.diagnosis) < len(schema.diagnosis_classes):
        report.violations.append(f"diagnosis: {record.diagnosis} outside 0..{len(schema.diagnosis_classes) - 1}")
    if record.videos is not None:
        for kind in range(1, N_VIDEO_KINDS + 1):
            if kind not in record.videos:
                report.violations.append(f"videos: video kind {kind} missing")
                continue
            clip = record.videos[kind]
            if not clip.frames:
                report.violations.append(f"videos[{kind}]: no frames")
            if clip.duration_s <= 0 or clip.native_fps <= 0:
                report.violations.append(f"videos[{kind}]: duration and fps must be positive")
            for j, frame in enumerate(clip.frames):
                _check_raster(frame, f"videos[{kind}].frames[{j}]", report, image_size)
    return report


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def schema_to_dict(schema: IndicatorSchema) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "indicators": [
            {
                "id": ind.id,
                "name": ind.name,
                "class_names": list(ind.class_names),
                "declared_counts": None if ind.declared_counts is None else list(ind.declared_counts),
            }
            for ind in schema.indicators
        ],
        "diagnosis_classes": list(schema.diagnosis_classes),
        "diagnosis_declared_counts": (
            None if schema.diagnosis_declared_counts is None else list(schema.diagnosis_declared_counts)
        ),
    }


def schema_from_dict(data: Mapping[str, Any]) -> IndicatorSchema:
    _check_version(data, "schema")
    indicators = tuple(
        IndicatorDef(
            id=int(d["id"]),
            name=str(d["name"]),
            class_names=tuple(d["class_names"]),
            declared_counts=None if d.get("declared_counts") is None else tuple(int(c) for c in d["declared_counts"]),
        )
        for d in data["indicators"]
    )
    counts = data.get("diagnosis_declared_counts")
    return IndicatorSchema(
        indicators=indicators,
        diagnosis_classes=tuple(data["diagnosis_classes"]),
        diagnosis_declared_counts=None if counts is None else tuple(int(c) for c in counts),
    )


def image_map_to_dict(mapping: ImageIndicatorMap) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "image_kinds": [{"id": k.id, "name": k.name} for k in mapping.image_kinds],
        "pairs": [list(p) for p in mapping.pairs],
    }


def image_map_from_dict(data: Mapping[str, Any]) -> ImageIndicatorMap:
    _check_version(data, "image_map")
    return ImageIndicatorMap(
        pairs=tuple((int(a), int(b)) for a, b in data["pairs"]),
        image_kinds=tuple(ImageKind(int(k["id"]), str(k["name"])) for k in data.get("image_kinds", [])),
    )


def video_map_to_dict(mapping: VideoIndicatorMap) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "video_kinds": [{"id": k.id, "name": k.name} for k in mapping.video_kinds],
        "pairs": [list(p) for p in mapping.pairs],
    }


def video_map_from_dict(data: Mapping[str, Any]) -> VideoIndicatorMap:
    _check_version(data, "video_map")
    return VideoIndicatorMap(
        pairs=tuple((int(a), int(b)) for a, b in data["pairs"]),
        video_kinds=tuple(VideoKind(int(k["id"]), str(k["name"])) for k in data.get("video_kinds", [])),
    )


def _check_version(data: Mapping[str, Any], what: str) -> None:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{what}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")


def dump_yaml(data: Any, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def load_yaml(path: str | Path) -> Any:
    return yaml.safe_load(Path(path).read_text())


def save_schema(schema: IndicatorSchema, path: str | Path) -> None:
    dump_yaml(schema_to_dict(schema), path)


def load_schema(path: str | Path) -> IndicatorSchema:
    return schema_from_dict(load_yaml(path))


def save_image_map(mapping: ImageIndicatorMap, path: str | Path) -> None:
    dump_yaml(image_map_to_dict(mapping), path)


def load_image_map(path: str | Path) -> ImageIndicatorMap:
    return image_map_from_dict(load_yaml(path))


def save_video_map(mapping: VideoIndicatorMap, path: str | Path) -> None:
    dump_yaml(video_map_to_dict(mapping), path)


def load_video_map(path: str | Path) -> VideoIndicatorMap:
    return video_map_from_dict(load_yaml(path))


def stable_hash(data: Any) -> str:
    payload = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def schema_checksum(schema: IndicatorSchema) -> str:
    return stable_hash(schema_to_dict(schema))


def map_checksum(mapping: ImageIndicatorMap) -> str:
    # Order of pairs is irrelevant to the model; hash the canonical sorted set.
    return stable_hash(sorted([list(p) for p in set(mapping.pairs)]))

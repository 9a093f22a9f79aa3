"""Synthetic patient generator standing in for the private clinical cohort.

A per-patient latent severity ``s`` in [0, 1] drives every indicator through
an ordinal logistic link, so indicators correlate the way disease stages do.
The diagnosis is a deterministic bucketing of the indicator labels
(``oracle_diagnosis``), and every indicator label is painted into the images
of the kinds it is mapped to, so the whole label chain is recoverable from
pixels.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Final, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .schema import (
    DIAGNOSIS_DECLARED_COUNTS,
    FORMAT_VERSION,
    N_DIAGNOSES,
    N_IMAGE_KINDS,
    N_VIDEO_KINDS,
    VIDEO_DURATION_S,
    ImageIndicatorMap,
    IndicatorSchema,
    PatientRecord,
    VideoClip,
    VideoIndicatorMap,
    default_image_map,
    default_schema,
    default_video_map,
    dump_yaml,
    image_map_to_dict,
    load_image_map,
    load_schema,
    load_video_map,
    load_yaml,
    save_image_map,
    save_schema,
    save_video_map,
    schema_to_dict,
    stable_hash,
    validate_mapping,
    validate_schema,
    validate_video_map,
    video_map_to_dict,
)

# Width of the ordinal logistic link, in severity units. Small enough that an
# all-healthy patient (s=0) is class 0 with probability >= 0.9 on every
# indicator of the default schema.
LINK_TEMPERATURE: Final[float] = 0.08

# Checked-in output of scripts/calibrate_oracle.py.
DEFAULT_ORACLE_THRESHOLDS: Final[tuple[float, float, float]] = (0.25, 2.25, 6.75)

RASTER_MAGIC: Final[bytes] = b"FNRS"
RASTER_VERSION: Final[int] = 1

# Substream tags; keep stable, they are part of the reproducibility contract.
_STREAM_ASSIGN: Final[int] = 0xA551
_STREAM_PATIENT: Final[int] = 0x9A7


class IncompleteRecordError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_patients: int = 229
    seed: int = 42
    image_size: tuple[int, int] = (64, 64)
    noise_sigma: float = 0.10
    label_noise: float = 0.0
    frames_per_video: int = 5
    class_balance_target: tuple[float, ...] | None = tuple(c / sum(DIAGNOSIS_DECLARED_COUNTS) for c in DIAGNOSIS_DECLARED_COUNTS)
    with_videos: bool = True
    # per-image anatomical variation: organ shift and size, scaled by anatomy_jitter, and
    # label-free decoy structures, scaled by decoy_level; 0 turns either off
    anatomy_jitter: float = 0.5
    decoy_level: float = 1.0
    # cue strength of still images relative to video frames
    still_cue_gain: float = 0.85

    def validate(self) -> None:
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError("image_size must be at least 16x16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be a probability")
        if self.frames_per_video <= 0:
            raise ValueError("frames_per_video must be positive")
        if self.anatomy_jitter < 0 or self.decoy_level < 0:
            raise ValueError("anatomy_jitter and decoy_level must be non-negative")
        if not 0.0 < self.still_cue_gain <= 1.0:
            raise ValueError("still_cue_gain must lie in (0, 1]")
        target = self.class_balance_target
        if target is not None:
            if len(target) != N_DIAGNOSES or any(p < 0 for p in target):
                raise ValueError(f"class_balance_target must hold {N_DIAGNOSES} non-negative proportions")
            if abs(sum(target) - 1.0) > 1e-9:
                raise ValueError("class_balance_target must sum to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["class_balance_target"] = None if self.class_balance_target is None else list(self.class_balance_target)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if d.get("class_balance_target") is not None:
            d["class_balance_target"] = tuple(d["class_balance_target"])
        return cls(**d)


@dataclass(frozen=True)
class OracleRule:
    weights: Mapping[int, float]
    thresholds: tuple[float, float, float]

    @classmethod
    def default(cls, schema: IndicatorSchema | None = None) -> "OracleRule":
        schema = schema or default_schema()
        return cls(weights={i: 1.0 for i in schema.indicator_ids}, thresholds=DEFAULT_ORACLE_THRESHOLDS)


def validate_rule(rule: OracleRule, schema: IndicatorSchema) -> list[str]:
    problems = []
    t = rule.thresholds
    if len(t) != 3 or not t[0] < t[1] < t[2]:
        problems.append("thresholds must be 3 strictly increasing values")
    if any(w < 0 for w in rule.weights.values()):
        problems.append("weights must be non-negative")
    if set(rule.weights) != set(schema.indicator_ids):
        problems.append("weights must cover every indicator")
        return problems
    lo = oracle_score({i: 0 for i in schema.indicator_ids}, rule, schema)
    hi = oracle_score({ind.id: ind.cardinality - 1 for ind in schema.indicators}, rule, schema)
    if len(t) == 3 and not lo < t[0]:
        problems.append("all-normal score must fall below thresholds[0]")
    if len(t) == 3 and not hi > t[2]:
        problems.append("all-abnormal score must fall above thresholds[2]")
    return problems


# ---------------------------------------------------------------------------
# Indicator sampling
# ---------------------------------------------------------------------------


def _link_marginal(t: float, tau: float) -> float:
    # integral over s in [0, 1] of sigmoid((s - t) / tau)
    return tau * (np.logaddexp(0.0, (1.0 - t) / tau) - np.logaddexp(0.0, -t / tau))


@functools.lru_cache(maxsize=None)
def _link_thresholds(proportions: tuple[float, ...], tau: float) -> tuple[float, ...]:
    """Cut points t_1..t_{C-1} such that the marginal P(class >= k) matches ``proportions``."""
    cuts = []
    for k in range(1, len(proportions)):
        q = min(max(sum(proportions[k:]), 1e-6), 1 - 1e-6)
        cuts.append(brentq(lambda t: _link_marginal(t, tau) - q, -5.0, 6.0))
    return tuple(cuts)


def indicator_proportions(schema: IndicatorSchema, indicator_id: int) -> tuple[float, ...]:
    ind = schema.indicator(indicator_id)
    if ind.declared_counts is None or sum(ind.declared_counts) == 0:
        return tuple([1.0 / ind.cardinality] * ind.cardinality)
    total = float(sum(ind.declared_counts))
    return tuple(c / total for c in ind.declared_counts)


def class_probabilities(schema: IndicatorSchema, indicator_id: int, severity: float, tau: float = LINK_TEMPERATURE) -> np.ndarray:
    """P(class = k | severity) under the calibrated ordinal link."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    cuts = _link_thresholds(indicator_proportions(schema, indicator_id), tau)
    at_least = np.concatenate([[1.0], expit((severity - np.asarray(cuts)) / tau), [0.0]])
    probs = at_least[:-1] - at_least[1:]
    return np.clip(probs, 0.0, 1.0)


def sample_indicators(
    rng: np.random.Generator,
    schema: IndicatorSchema,
    severity: float,
    label_noise: float = 0.0,
) -> dict[int, int]:
    labels = {}
    for ind in schema.indicators:
        p = class_probabilities(schema, ind.id, severity)
        labels[ind.id] = int(rng.choice(ind.cardinality, p=p / p.sum()))
    if label_noise > 0:
        labels = apply_label_noise(rng, schema, labels, label_noise)
    return labels


def apply_label_noise(rng: np.random.Generator, schema: IndicatorSchema, labels: Mapping[int, int], label_noise: float) -> dict[int, int]:
    out = dict(labels)
    for ind in schema.indicators:
        if rng.random() < label_noise:
            out[ind.id] = int(rng.integers(ind.cardinality))
    return out


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


def oracle_score(labels: Mapping[int, int], rule: OracleRule, schema: IndicatorSchema | None = None) -> float:
    schema = schema or default_schema()
    score = 0.0
    for ind in schema.indicators:
        if ind.id not in labels:
            raise IncompleteRecordError(f"indicator {ind.id} missing from labels")
        score += rule.weights[ind.id] * (labels[ind.id] / (ind.cardinality - 1))
    return score


def bucket(score: float, thresholds: Sequence[float]) -> int:
    return int(sum(score >= t for t in thresholds))


def oracle_diagnosis(labels: Mapping[int, int], rule: OracleRule, schema: IndicatorSchema | None = None) -> int:
    return bucket(oracle_score(labels, rule, schema), rule.thresholds)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KindLayout:
    """Geometry of one image kind: an organ ellipse plus an optional wall/vessel band."""

    center: tuple[float, float]
    radii: tuple[float, float]
    organ_level: float
    band_v: float = 0.80
    band_level: float = 0.80
    lobes: int = 7


@dataclass(frozen=True)
class RenderSpec:
    """Which visual degree of freedom encodes one (image kind, indicator) pair.

    ``dof`` is one of ``brightness`` (organ mean level), ``grain`` (texture
    frequency), ``waviness`` (boundary modulation amplitude) or ``stripe``
    (band thickness in pixels at 64 px). ``low``/``high`` are the parameter
    values at class 0 and at the top class.
    """

    dof: str
    low: float
    high: float


LAYOUTS: Final[dict[int, KindLayout]] = {
    1: KindLayout((0.50, 0.50), (0.36, 0.26), 0.42, lobes=5),
    2: KindLayout((0.50, 0.36), (0.38, 0.22), 0.40),
    3: KindLayout((0.50, 0.50), (0.40, 0.32), 0.45, band_v=0.50, band_level=0.05),
    4: KindLayout((0.50, 0.36), (0.36, 0.22), 0.38, band_level=0.70),
    5: KindLayout((0.50, 0.50), (0.42, 0.38), 0.45),
    6: KindLayout((0.50, 0.55), (0.40, 0.30), 0.44, lobes=9),
    7: KindLayout((0.50, 0.36), (0.36, 0.20), 0.50),
    8: KindLayout((0.50, 0.50), (0.40, 0.30), 0.48, band_v=0.50, band_level=0.85),
    9: KindLayout((0.50, 0.40), (0.30, 0.20), 0.28, lobes=8),
    10: KindLayout((0.50, 0.50), (0.40, 0.36), 0.40),
}

RENDER_TABLE: Final[dict[tuple[int, int], RenderSpec]] = {
    (1, 1): RenderSpec("waviness", 0.0, 0.14),
    (2, 2): RenderSpec("brightness", 0.0, 0.12),
    (2, 3): RenderSpec("stripe", 2.0, 5.0),
    (3, 9): RenderSpec("stripe", 3.0, 6.0),
    (4, 7): RenderSpec("stripe", 2.0, 5.0),
    (4, 8): RenderSpec("brightness", 0.0, 0.12),
    (5, 4): RenderSpec("grain", 5.0, 10.0),
    (6, 6): RenderSpec("waviness", 0.0, 0.18),
    (7, 5): RenderSpec("brightness", 0.0, 0.16),
    (7, 11): RenderSpec("stripe", 2.0, 5.0),
    (8, 10): RenderSpec("stripe", 3.0, 6.0),
    (9, 12): RenderSpec("stripe", 2.0, 5.0),
    (9, 13): RenderSpec("waviness", 0.0, 0.14),
    (10, 4): RenderSpec("grain", 5.0, 10.0),
}

_BACKGROUND: Final[float] = 0.08
_GRAIN_AMPLITUDE: Final[float] = 0.10
_SPECKLE_AMPLITUDE: Final[float] = 0.04
_EDGE: Final[float] = 0.03


@functools.lru_cache(maxsize=None)
def _speckle_terms(kind: int) -> np.ndarray:
    # fixed per kind so that templates (and golden rasters) are stable
    rng = np.random.default_rng(1000 + kind)
    freqs = rng.uniform(2.0, 9.0, size=(12, 2)) * rng.choice([-1.0, 1.0], size=(12, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(12, 1))
    return np.concatenate([freqs, phases], axis=1)


def _level(label: int, cardinality: int) -> float:
    return label / (cardinality - 1)


def render_template(
    kind: int,
    levels: Mapping[int, float],
    size: tuple[int, int] = (64, 64),
    offset: tuple[float, float] = (0.0, 0.0),
    pad: int = 0,
    gain: float = 1.0,
    anatomy: "Anatomy | None" = None,
) -> np.ndarray:
    """Noise-free image of ``kind`` with indicator levels in [0, 1].

    ``offset`` translates the scene by (dx, dy) pixels. ``pad`` extends the
    canvas by that many pixels on every side without changing the scene scale.
    ``gain`` shrinks every cue toward its class-0 value. ``anatomy`` adds the
    patient-specific pose and decoys; None is the canonical scene.
    """
    anatomy = anatomy or Anatomy()
    h, w = size
    layout = LAYOUTS[kind]
    ys, xs = np.mgrid[-pad : h + pad, -pad : w + pad]
    u = (xs + 0.5 - offset[0] - anatomy.offset[0]) / w
    v = (ys + 0.5 - offset[1] - anatomy.offset[1]) / h
    scale = anatomy.scale

    params = {spec.dof: spec.low + (spec.high - spec.low) * gain * levels[ind] for (k, ind), spec in RENDER_TABLE.items() if k == kind}

    du = (u - layout.center[0]) / (layout.radii[0] * scale)
    dv = (v - layout.center[1]) / (layout.radii[1] * scale)
    rho = np.sqrt(du**2 + dv**2)
    theta = np.arctan2(dv, du)
    boundary = 1.0 + params.get("waviness", 0.0) * np.sin(layout.lobes * theta)
    if anatomy.ripple:
        boundary = boundary + anatomy.ripple * np.sin((layout.lobes + _DECOY_LOBE_SHIFT) * theta + 0.7)
    organ = expit((boundary - rho) / _EDGE)

    terms = _speckle_terms(kind)
    speckle = np.zeros_like(u)
    for fu, fv, ph in terms:
        speckle += np.sin(2 * np.pi * (fu * u + fv * v) + ph)
    speckle *= _SPECKLE_AMPLITUDE / math.sqrt(len(terms) / 2)

    intensity = layout.organ_level + params.get("brightness", 0.0) + speckle
    if "grain" in params:
        f = params["grain"]
        intensity = intensity + _GRAIN_AMPLITUDE * np.sin(2 * np.pi * f * u) * np.sin(2 * np.pi * f * v)
    if anatomy.blob:
        bu = (u - layout.center[0] - 0.4 * layout.radii[0]) / 0.12
        bv = (v - layout.center[1] + 0.2 * layout.radii[1]) / 0.12
        intensity = intensity + anatomy.blob * expit((1.0 - np.sqrt(bu**2 + bv**2)) / 0.1)
    img = _BACKGROUND * (1 - organ) + intensity * organ

    def paint_band(img: np.ndarray, thickness: float, center_v: float, half_width: float) -> np.ndarray:
        half = thickness * (h / 64.0) / 2.0
        dist_px = np.abs(v - center_v) * h
        band = expit((half - dist_px) / 0.5) * expit((half_width - np.abs(u - 0.5)) / _EDGE)
        return img * (1 - band) + layout.band_level * band

    if "stripe" in params:
        img = paint_band(img, params["stripe"], layout.band_v, 0.42)
    if anatomy.band:
        img = paint_band(img, anatomy.band, 0.10 if layout.band_v > 0.3 else 0.90, 0.25)
    return np.clip(img, 0.0, 1.0)


def _levels_for(kind: int, labels: Mapping[int, int], schema: IndicatorSchema, image_map: ImageIndicatorMap) -> dict[int, float]:
    mapped = image_map.indicators_for(kind)
    extra = set(labels) - set(mapped)
    if extra:
        raise ValueError(f"indicators {sorted(extra)} are not mapped to image kind {kind}")
    missing = set(mapped) - set(labels)
    if missing:
        raise ValueError(f"labels missing for indicators {sorted(missing)} mapped to image kind {kind}")
    for ind in mapped:
        if (kind, ind) not in RENDER_TABLE:
            raise ValueError(f"no rendering entry for pair ({kind}, {ind})")
    return {ind: _level(labels[ind], schema.cardinality(ind)) for ind in mapped}


@functools.lru_cache(maxsize=4096)
def _cached_template(kind: int, levels: tuple[tuple[int, float], ...], size: tuple[int, int], gain: float) -> np.ndarray:
    img = render_template(kind, dict(levels), size, gain=gain)
    img.setflags(write=False)
    return img


@dataclass(frozen=True)
class Anatomy:
    """Patient-specific variation that carries no label information.

    ``offset``/``scale`` move and resize the organ. The decoys mimic cue
    types: ``ripple`` a boundary modulation at a different lobe count,
    ``blob`` a brightness patch inside the organ, ``band`` a second stripe of
    ``band`` pixels away from the cue band (0 = absent).
    """

    offset: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    ripple: float = 0.0
    blob: float = 0.0
    band: float = 0.0


_MAX_ANATOMY_SHIFT: Final[float] = 3.0  # pixels at 64 px
_MAX_ANATOMY_SCALE: Final[float] = 0.08
_DECOY_RIPPLE: Final[float] = 0.08
_DECOY_BLOB: Final[float] = 0.10
_DECOY_BAND: Final[tuple[float, float]] = (2.0, 5.0)
_DECOY_LOBE_SHIFT: Final[int] = 4


def draw_anatomy(rng: np.random.Generator, config: GenConfig) -> Anatomy:
    j, d = config.anatomy_jitter, config.decoy_level
    if j == 0 and d == 0:
        return Anatomy()
    w = config.image_size[1]
    dx, dy = rng.uniform(-1.0, 1.0, size=2) * _MAX_ANATOMY_SHIFT * j * (w / 64.0)
    scale = 1.0 + _MAX_ANATOMY_SCALE * j * rng.uniform(-1.0, 1.0)
    ripple, blob, band = rng.uniform(0.0, 1.0, size=3)
    lo, hi = _DECOY_BAND
    return Anatomy(
        offset=(float(dx), float(dy)),
        scale=float(scale),
        ripple=float(_DECOY_RIPPLE * d * ripple),
        blob=float(_DECOY_BLOB * d * (2 * blob - 1)),
        band=float(lo + (hi - lo) * band) if d > 0 else 0.0,
    )


def _finish(template: np.ndarray, rng: np.random.Generator, noise_sigma: float) -> np.ndarray:
    if noise_sigma > 0:
        template = template + rng.normal(0.0, noise_sigma, size=template.shape)
    return np.clip(template, 0.0, 1.0).astype(np.float32)


def render_image(
    kind: int,
    labels: Mapping[int, int],
    rng: np.random.Generator,
    config: GenConfig,
    schema: IndicatorSchema | None = None,
    image_map: ImageIndicatorMap | None = None,
) -> np.ndarray:
    """Render one indicator image. ``labels`` must be exactly the indicators mapped to ``kind``."""
    schema = schema or default_schema()
    image_map = image_map or default_image_map()
    levels = _levels_for(kind, labels, schema, image_map)
    if config.anatomy_jitter == 0 and config.decoy_level == 0:
        template = _cached_template(kind, tuple(sorted(levels.items())), tuple(config.image_size), config.still_cue_gain)
    else:
        template = render_template(kind, levels, tuple(config.image_size), gain=config.still_cue_gain, anatomy=draw_anatomy(rng, config))
    return _finish(template, rng, config.noise_sigma)


def video_source_kind(video_kind: int, video_map: VideoIndicatorMap, image_map: ImageIndicatorMap) -> int:
    """Image kind whose scene a video clip shows: the lowest kind carrying the clip's indicator."""
    indicator = video_map.indicator_for(video_kind)
    kinds = image_map.images_for(indicator)
    if not kinds:
        raise ValueError(f"indicator {indicator} of video kind {video_kind} has no image kind")
    return kinds[0]


def render_video(
    kind: int,
    labels: Mapping[int, int],
    rng: np.random.Generator,
    config: GenConfig,
    schema: IndicatorSchema | None = None,
    image_map: ImageIndicatorMap | None = None,
    video_map: VideoIndicatorMap | None = None,
    max_shift: int = 3,
) -> VideoClip:
    """Render a 5-second clip as ``frames_per_video`` jittered frames of the source image kind.

    Clips show the cues at full strength; stills are attenuated by ``still_cue_gain``.
    """
    schema = schema or default_schema()
    image_map = image_map or default_image_map()
    video_map = video_map or default_video_map()
    source = video_source_kind(kind, video_map, image_map)
    mapped = image_map.indicators_for(source)
    levels = _levels_for(source, {i: labels[i] for i in mapped if i in labels}, schema, image_map)
    h, w = config.image_size
    # one anatomy per clip; integer frame shifts are windows into one padded render
    canvas = render_template(source, levels, (h, w), pad=max_shift, anatomy=draw_anatomy(rng, config))
    frames = []
    for _ in range(config.frames_per_video):
        dx, dy = (int(d) for d in rng.integers(-max_shift, max_shift + 1, size=2))
        template = canvas[max_shift - dy : max_shift - dy + h, max_shift - dx : max_shift - dx + w]
        frames.append(_finish(template, rng, config.noise_sigma))
    fps = config.frames_per_video / VIDEO_DURATION_S
    return VideoClip(frames=tuple(frames), duration_s=VIDEO_DURATION_S, native_fps=fps)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def target_counts(n: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` patients over ``proportions``."""
    raw = [n * p for p in proportions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), _STREAM_PATIENT, index]))


def generate_patient(
    index: int,
    target: int | None,
    config: GenConfig,
    schema: IndicatorSchema,
    image_map: ImageIndicatorMap,
    video_map: VideoIndicatorMap,
    rule: OracleRule,
    max_tries: int = 100_000,
) -> tuple[PatientRecord, float]:
    """Generate one patient from its own substream; rejection-samples severity until the
    oracle diagnosis equals ``target`` (any diagnosis if ``target`` is None)."""
    rng = _patient_rng(config.seed, index)
    for _ in range(max_tries):
        severity = float(rng.uniform())
        true_labels = sample_indicators(rng, schema, severity)
        diagnosis = oracle_diagnosis(true_labels, rule, schema)
        if target is None or diagnosis == target:
            break
    else:
        raise RuntimeError(f"could not reach diagnosis {target} after {max_tries} draws")

    images = {}
    for kind in range(1, N_IMAGE_KINDS + 1):
        sub = {i: true_labels[i] for i in image_map.indicators_for(kind)}
        images[kind] = render_image(kind, sub, rng, config, schema, image_map)
    videos = None
    if config.with_videos:
        videos = {
            kind: render_video(kind, true_labels, rng, config, schema, image_map, video_map)
            for kind in range(1, N_VIDEO_KINDS + 1)
        }
    stored = apply_label_noise(rng, schema, true_labels, config.label_noise) if config.label_noise > 0 else true_labels
    record = PatientRecord(
        patient_id=f"P{index:04d}",
        images=images,
        indicator_labels=stored,
        diagnosis=diagnosis,
        videos=videos,
    )
    return record, severity


def assign_targets(config: GenConfig) -> list[int | None]:
    if config.class_balance_target is None:
        return [None] * config.n_patients
    counts = target_counts(config.n_patients, config.class_balance_target)
    targets = np.repeat(np.arange(N_DIAGNOSES), counts)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**64 - 1), _STREAM_ASSIGN]))
    return [int(t) for t in rng.permutation(targets)]


def _check_inputs(config: GenConfig, schema: IndicatorSchema, image_map: ImageIndicatorMap, video_map: VideoIndicatorMap, rule: OracleRule) -> None:
    config.validate()
    for report in (validate_schema(schema), validate_mapping(image_map, schema), validate_video_map(video_map, schema)):
        if not report.ok:
            raise ValueError(str(report))
    problems = validate_rule(rule, schema)
    if problems:
        raise ValueError("; ".join(problems))


def generate_records(
    config: GenConfig,
    schema: IndicatorSchema | None = None,
    image_map: ImageIndicatorMap | None = None,
    video_map: VideoIndicatorMap | None = None,
    rule: OracleRule | None = None,
) -> list[PatientRecord]:
    schema = schema or default_schema()
    image_map = image_map or default_image_map()
    video_map = video_map or default_video_map()
    rule = rule or OracleRule.default(schema)
    _check_inputs(config, schema, image_map, video_map, rule)
    targets = assign_targets(config)
    return [generate_patient(i, t, config, schema, image_map, video_map, rule)[0] for i, t in enumerate(targets)]


@dataclass
class Dataset:
    records: list[PatientRecord]
    schema: IndicatorSchema = field(default_factory=default_schema)
    image_map: ImageIndicatorMap = field(default_factory=default_image_map)
    video_map: VideoIndicatorMap = field(default_factory=default_video_map)
    manifest: dict = field(default_factory=dict)

    def by_id(self) -> dict[str, PatientRecord]:
        return {r.patient_id: r for r in self.records}

    def subset(self, patient_ids: Sequence[str]) -> list[PatientRecord]:
        index = self.by_id()
        return [index[p] for p in patient_ids]

    @functools.cached_property
    def checksum(self) -> str:
        return self.manifest.get("checksum") or records_checksum(self.records, self.schema)


# -- raster + table I/O -------------------------------------------------------


def encode_raster(image: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(image, dtype="<f4")
    h, w = arr.shape
    return RASTER_MAGIC + struct.pack("<HII", RASTER_VERSION, w, h) + arr.tobytes()


def decode_raster(data: bytes) -> np.ndarray:
    if data[:4] != RASTER_MAGIC:
        raise ValueError("not a raster file")
    version, w, h = struct.unpack("<HII", data[4:14])
    if version != RASTER_VERSION:
        raise ValueError(f"unsupported raster version {version}")
    return np.frombuffer(data[14:], dtype="<f4").reshape(h, w).astype(np.float32)


def write_raster(path: Path, image: np.ndarray) -> None:
    path.write_bytes(encode_raster(image))


def read_raster(path: Path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes())


def labels_table(records: Sequence[PatientRecord], schema: IndicatorSchema) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    ids = schema.indicator_ids
    writer.writerow(["patient_id", *[f"indicator_{i}" for i in ids], "diagnosis"])
    for r in sorted(records, key=lambda r: r.patient_id):
        # an empty cell marks an unlabeled indicator
        writer.writerow([r.patient_id, *[r.indicator_labels.get(i, "") for i in ids], r.diagnosis])
    return buf.getvalue()


def parse_labels_table(text: str) -> dict[str, tuple[dict[int, int], int]]:
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    ind_cols = [(j, int(name.split("_")[1])) for j, name in enumerate(header) if name.startswith("indicator_")]
    diag_col = header.index("diagnosis")
    out = {}
    for row in rows[1:]:
        out[row[0]] = ({ind: int(row[j]) for j, ind in ind_cols if row[j] != ""}, int(row[diag_col]))
    return out


def _record_files(record: PatientRecord) -> list[tuple[str, bytes]]:
    files = [(f"images/{record.patient_id}/{kind:02d}.raster", encode_raster(img)) for kind, img in sorted(record.images.items())]
    for kind, clip in sorted((record.videos or {}).items()):
        for j, frame in enumerate(clip.frames):
            files.append((f"videos/{record.patient_id}/{kind:02d}/{j:03d}.raster", encode_raster(frame)))
    return files


def records_checksum(records: Sequence[PatientRecord], schema: IndicatorSchema) -> str:
    """SHA-256 over (relative path, bytes) of every data file, in path order."""
    files = [("labels.table", labels_table(records, schema).encode())]
    for r in records:
        files.extend(_record_files(r))
    digest = hashlib.sha256()
    for name, data in sorted(files):
        digest.update(name.encode() + b"\0" + hashlib.sha256(data).digest())
    return digest.hexdigest()


def build_manifest(config: GenConfig, records: Sequence[PatientRecord], schema: IndicatorSchema, image_map, video_map, rule: OracleRule) -> dict:
    diag_counts = [0] * N_DIAGNOSES
    for r in records:
        diag_counts[r.diagnosis] += 1
    ind_counts = {}
    for ind in schema.indicators:
        counts = [0] * ind.cardinality
        for r in records:
            counts[r.indicator_labels[ind.id]] += 1
        ind_counts[ind.id] = counts
    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "oracle_rule": {"weights": {int(k): float(v) for k, v in rule.weights.items()}, "thresholds": list(rule.thresholds)},
        "render_table_checksum": render_table_checksum(),
        "schema_checksum": stable_hash(schema_to_dict(schema)),
        "image_map_checksum": stable_hash(image_map_to_dict(image_map)),
        "video_map_checksum": stable_hash(video_map_to_dict(video_map)),
        "n_patients": len(records),
        "diagnosis_counts": diag_counts,
        "indicator_counts": ind_counts,
        "frames_per_video": config.frames_per_video if config.with_videos else 0,
        "checksum": records_checksum(records, schema),
    }


def render_table_checksum() -> str:
    return stable_hash(
        {
            "layouts": {k: asdict(v) for k, v in LAYOUTS.items()},
            "render": {f"{k}-{i}": asdict(s) for (k, i), s in RENDER_TABLE.items()},
            "background": _BACKGROUND,
            "grain_amplitude": _GRAIN_AMPLITUDE,
            "speckle_amplitude": _SPECKLE_AMPLITUDE,
            "edge": _EDGE,
            "max_anatomy_shift": _MAX_ANATOMY_SHIFT,
            "max_anatomy_scale": _MAX_ANATOMY_SCALE,
            "decoys": [_DECOY_RIPPLE, _DECOY_BLOB, list(_DECOY_BAND), _DECOY_LOBE_SHIFT],
            "link_temperature": LINK_TEMPERATURE,
        }
    )


def generate_dataset(
    config: GenConfig,
    out_dir: str | Path,
    schema: IndicatorSchema | None = None,
    image_map: ImageIndicatorMap | None = None,
    video_map: VideoIndicatorMap | None = None,
    rule: OracleRule | None = None,
) -> dict:
    """Generate and write a dataset directory; returns the manifest."""
    schema = schema or default_schema()
    image_map = image_map or default_image_map()
    video_map = video_map or default_video_map()
    rule = rule or OracleRule.default(schema)
    records = generate_records(config, schema, image_map, video_map, rule)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for record in records:
        for name, data in _record_files(record):
            path = out / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
    (out / "labels.table").write_text(labels_table(records, schema))
    save_schema(schema, out / "schema")
    save_image_map(image_map, out / "image_map")
    save_video_map(video_map, out / "video_map")
    manifest = build_manifest(config, records, schema, image_map, video_map, rule)
    dump_yaml(manifest, out / "manifest")
    return manifest


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = load_yaml(root / "manifest")
    schema = load_schema(root / "schema")
    image_map = load_image_map(root / "image_map")
    video_map = load_video_map(root / "video_map")
    table = parse_labels_table((root / "labels.table").read_text())
    n_frames = manifest.get("frames_per_video", 0)
    records = []
    for pid in sorted(table):
        labels, diagnosis = table[pid]
        images = {kind: read_raster(root / f"images/{pid}/{kind:02d}.raster") for kind in range(1, N_IMAGE_KINDS + 1)}
        videos = None
        if n_frames:
            videos = {}
            for kind in range(1, N_VIDEO_KINDS + 1):
                frames = tuple(read_raster(root / f"videos/{pid}/{kind:02d}/{j:03d}.raster") for j in range(n_frames))
                videos[kind] = VideoClip(frames=frames, duration_s=VIDEO_DURATION_S, native_fps=n_frames / VIDEO_DURATION_S)
        records.append(PatientRecord(pid, images, labels, diagnosis, videos))
    return Dataset(records=records, schema=schema, image_map=image_map, video_map=video_map, manifest=manifest)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Split":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


def split_dataset(
    diagnoses: Mapping[str, int] | Sequence[PatientRecord] | Dataset,
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20),
    seed: int = 0,
) -> Split:
    """Stratified train/val/test split by diagnosis class."""
    if isinstance(diagnoses, Dataset):
        diagnoses = diagnoses.records
    if not isinstance(diagnoses, Mapping):
        diagnoses = {r.patient_id: r.diagnosis for r in diagnoses}
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("each split must be non-empty (ratios must be positive)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")

    by_class: dict[int, list[str]] = {}
    for pid, d in sorted(diagnoses.items()):
        by_class.setdefault(int(d), []).append(pid)
    train, val, test = [], [], []
    for cls in sorted(by_class):
        ids = by_class[cls]
        if len(ids) < 3:
            raise ValueError(f"diagnosis class {cls} has {len(ids)} patients, fewer than the 3 splits")
        rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), cls]))
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_val = max(1, int(round(ratios[1] * len(ids))))
        n_test = max(1, int(round(ratios[2] * len(ids))))
        if n_val + n_test >= len(ids):
            raise ValueError(f"diagnosis class {cls} too small for the requested ratios")
        val += ids[:n_val]
        test += ids[n_val : n_val + n_test]
        train += ids[n_val + n_test :]
    return Split(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))

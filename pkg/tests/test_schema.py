import dataclasses

import numpy as np
import pytest

from fibronet.schema import (
    DEFAULT_IMAGE_PAIRS,
    FORMAT_VERSION,
    IndicatorDef,
    ImageIndicatorMap,
    PatientRecord,
    VideoIndicatorMap,
    default_image_map,
    default_schema,
    default_video_map,
    image_map_from_dict,
    image_map_to_dict,
    load_image_map,
    load_schema,
    load_video_map,
    load_yaml,
    map_checksum,
    save_image_map,
    save_schema,
    save_video_map,
    schema_checksum,
    schema_from_dict,
    schema_to_dict,
    validate_mapping,
    validate_record,
    validate_schema,
    validate_video_map,
)

EXPECTED_CARDINALITIES = {1: 2, 2: 2, 3: 2, 4: 3, 5: 3, 6: 3, 7: 2, 8: 2, 9: 2, 10: 2, 11: 2, 12: 2, 13: 2}


def blank_record(**changes) -> PatientRecord:
    images = {k: np.zeros((64, 64), np.float32) for k in range(1, 11)}
    labels = {i: 0 for i in range(1, 14)}
    record = PatientRecord("p0000", images, labels, 0)
    return dataclasses.replace(record, **changes)


def test_default_schema_is_valid():
    report = validate_schema(default_schema())
    assert report.ok, report.violations


def test_default_cardinalities_match_table_structure():
    assert default_schema().cardinalities() == EXPECTED_CARDINALITIES


def test_default_diagnosis_classes():
    schema = default_schema()
    assert len(schema.diagnosis_classes) == 4
    assert schema.diagnosis_declared_counts == (38, 73, 58, 60)


def test_twelve_indicators_rejected():
    schema = default_schema()
    short = dataclasses.replace(schema, indicators=schema.indicators[:12])
    report = validate_schema(short)
    assert not report.ok
    assert any("indicator ids must be exactly 1..13" in v for v in report.violations)


def test_declared_counts_length_mismatch_rejected():
    schema = default_schema()
    bad = IndicatorDef(4, "liver_parenchyma_echo", ("a", "b"), (1, 2, 3))
    inds = tuple(bad if ind.id == 4 else ind for ind in schema.indicators)
    report = validate_schema(dataclasses.replace(schema, indicators=inds))
    assert any(v.startswith("indicator 4.declared_counts") for v in report.violations)


def test_duplicate_class_names_and_low_cardinality_rejected():
    schema = default_schema()
    inds = list(schema.indicators)
    inds[0] = IndicatorDef(1, "x", ("a", "a"))
    inds[1] = IndicatorDef(2, "y", ("only",))
    report = validate_schema(dataclasses.replace(schema, indicators=tuple(inds)))
    assert any("duplicate class names" in v for v in report.violations)
    assert any("cardinality must be >= 2" in v for v in report.violations)


def test_wrong_number_of_diagnoses_rejected():
    schema = dataclasses.replace(default_schema(), diagnosis_classes=("a", "b", "c"), diagnosis_declared_counts=None)
    assert any(v.startswith("diagnosis_classes") for v in validate_schema(schema).violations)


def test_default_mapping_is_valid():
    schema = default_schema()
    mapping = default_image_map()
    assert validate_mapping(mapping, schema).ok
    assert len(set(mapping.pairs)) == 14
    # checked by enumeration rather than through the validator
    assert {i for _, i in DEFAULT_IMAGE_PAIRS} == set(range(1, 14))
    assert {k for k, _ in DEFAULT_IMAGE_PAIRS} == set(range(1, 11))


def test_mapping_missing_indicator_13():
    pairs = tuple(p for p in DEFAULT_IMAGE_PAIRS if p[1] != 13)
    report = validate_mapping(ImageIndicatorMap(pairs), default_schema())
    assert any("indicator 13 unmapped" in v for v in report.violations)


def test_mapping_duplicate_pair():
    pairs = DEFAULT_IMAGE_PAIRS + ((1, 1),)
    report = validate_mapping(ImageIndicatorMap(pairs), default_schema())
    assert any("duplicate pair" in v for v in report.violations)


def test_mapping_unmapped_image_kind():
    pairs = tuple(p for p in DEFAULT_IMAGE_PAIRS if p[0] != 8) + ((1, 10),)
    report = validate_mapping(ImageIndicatorMap(pairs), default_schema())
    assert report.violations == ["pairs: image kind 8 unmapped"]


def test_default_video_map():
    vm = default_video_map()
    assert validate_video_map(vm, default_schema()).ok
    assert vm.indicator_for(4) == 6  # the one fixed anchor pairing


def test_video_map_with_two_indicators_per_kind_rejected():
    vm = VideoIndicatorMap(default_video_map().pairs + ((1, 3),))
    report = validate_video_map(vm, default_schema())
    assert any("exactly one indicator" in v for v in report.violations)


def test_record_ok():
    assert validate_record(blank_record(), default_schema(), default_image_map(), (64, 64)).ok


def test_record_label_out_of_range():
    labels = {i: 0 for i in range(1, 14)} | {4: 3}
    report = validate_record(blank_record(indicator_labels=labels), default_schema(), default_image_map())
    assert report.violations == ["indicator_labels[4]: label 3 outside 0..2"]


def test_record_with_nine_images():
    images = {k: np.zeros((64, 64), np.float32) for k in range(1, 10)}
    report = validate_record(blank_record(images=images), default_schema(), default_image_map())
    assert "images: image kind 10 missing" in report.violations


def test_record_pixel_range_and_shape():
    images = {k: np.zeros((64, 64), np.float32) for k in range(1, 11)}
    images[3] = np.full((64, 64), 1.5, np.float32)
    images[4] = np.zeros((32, 32), np.float32)
    report = validate_record(blank_record(images=images), default_schema(), default_image_map(), (64, 64))
    assert any(v.startswith("images[3]") and "[0, 1]" in v for v in report.violations)
    assert any(v.startswith("images[4]") and "shape" in v for v in report.violations)


def test_record_diagnosis_range_and_missing_label():
    labels = {i: 0 for i in range(1, 13)}
    report = validate_record(blank_record(indicator_labels=labels, diagnosis=4), default_schema(), default_image_map())
    assert "indicator_labels: indicator 13 missing" in report.violations
    assert any(v.startswith("diagnosis") for v in report.violations)


def test_validation_is_pure():
    record = blank_record(diagnosis=7)
    a = validate_record(record, default_schema(), default_image_map())
    b = validate_record(record, default_schema(), default_image_map())
    assert a.violations == b.violations


def test_schema_round_trip(tmp_path):
    schema = default_schema()
    assert schema_from_dict(schema_to_dict(schema)) == schema
    save_schema(schema, tmp_path / "schema")
    assert load_yaml(tmp_path / "schema")["format_version"] == FORMAT_VERSION
    assert load_schema(tmp_path / "schema") == schema


def test_map_round_trips(tmp_path):
    save_image_map(default_image_map(), tmp_path / "image_map")
    save_video_map(default_video_map(), tmp_path / "video_map")
    assert load_image_map(tmp_path / "image_map") == default_image_map()
    assert load_video_map(tmp_path / "video_map") == default_video_map()


def test_unsupported_format_version():
    data = image_map_to_dict(default_image_map()) | {"format_version": 2}
    with pytest.raises(ValueError, match="format_version"):
        image_map_from_dict(data)


def test_checksums():
    assert schema_checksum(default_schema()) == schema_checksum(default_schema())
    shuffled = ImageIndicatorMap(tuple(reversed(DEFAULT_IMAGE_PAIRS)))
    assert map_checksum(shuffled) == map_checksum(default_image_map())
    fewer = ImageIndicatorMap(DEFAULT_IMAGE_PAIRS[:-1])
    assert map_checksum(fewer) != map_checksum(default_image_map())

from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from fibronet import training
from fibronet.model import BackboneSpec, LossWeights, MultiStreamNet, build_backbone, state_snapshot
from fibronet.schema import default_image_map, default_schema, default_video_map
from fibronet.synth import GenConfig, generate_records
from fibronet.training import (
    STAGES,
    NonFiniteGradientError,
    PretrainConfig,
    TrainConfig,
    TrainHistory,
    augment,
    augment_batch,
    extract_pretrain_frames,
    holdout_mask,
    pretrain_backbone,
    run_stage,
    select_best_checkpoint,
    sgd_update,
    train_3stage,
)

SCHEMA = default_schema()
IMAGE_MAP = default_image_map()
VIDEO_MAP = default_video_map()
SHORT = TrainConfig(epochs_total=3, stage_epochs=(1, 1, 1))


@pytest.fixture(scope="module")
def records():
    return generate_records(GenConfig(n_patients=24, seed=31))


@pytest.fixture(scope="module")
def clean_records():
    return generate_records(GenConfig(n_patients=24, seed=32, noise_sigma=0.0, with_videos=False))


def weights(value=0.1):
    return LossWeights.uniform(IMAGE_MAP.sorted_pairs(), value)


def group_snapshot(model, group):
    return state_snapshot(model, model.param_groups()[group])


# -- configuration -----------------------------------------------------------


def test_train_config_defaults():
    cfg = TrainConfig()
    cfg.validate()
    assert (cfg.learning_rate, cfg.momentum, cfg.epochs_total, cfg.stage_epochs) == (2e-3, 0.9, 50, (20, 20, 10))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "change",
    [
        {"learning_rate": 0.0},
        {"momentum": 1.0},
        {"stage_epochs": (20, 20, 11)},
        {"stage_epochs": (-1, 41, 10)},
        {"flip_probability": 1.5},
        {"crop_scale": (0.0, 1.0)},
    ],
)
def test_train_config_invalid(change):
    with pytest.raises(ValueError):
        replace(TrainConfig(), **change).validate()


def test_stage_specs():
    assert STAGES[1].trainable == {"backbone", "indicator_heads"} and STAGES[1].active_loss == "indicator_only"
    assert STAGES[2].trainable == {"backbone", "diagnosis_head"} and STAGES[2].active_loss == "diagnosis_only"
    assert STAGES[3].trainable == {"backbone", "indicator_heads", "diagnosis_head"} and STAGES[3].active_loss == "total"


# -- frames ------------------------------------------------------------------


def test_frame_counts(records):
    table = extract_pretrain_frames(records, VIDEO_MAP, SCHEMA)
    assert len(table) == 24 * 8 * 5
    assert table.frames.shape[1:] == (64, 64)
    assert len(extract_pretrain_frames(records[:1], VIDEO_MAP, SCHEMA, rate_fps=0.2)) == 8


def test_frame_labels_follow_video_indicator(records):
    table = extract_pretrain_frames(records, VIDEO_MAP, SCHEMA)
    by_id = {r.patient_id: r for r in records}
    for label, kind, pid in zip(table.labels, table.video_kinds, table.patient_ids):
        assert label == by_id[pid].indicator_labels[VIDEO_MAP.indicator_for(int(kind))]
    assert table.n_classes[5] == 3  # video 5 carries the 3-class parenchyma indicator


def test_frame_labels_diagnosis_mode(records):
    table = extract_pretrain_frames(records[:2], VIDEO_MAP, SCHEMA, frame_label="diagnosis")
    assert set(table.n_classes.values()) == {4}
    assert list(table.labels[:40]) == [records[0].diagnosis] * 40


def test_frame_stride_from_frame_zero():
    recs = generate_records(GenConfig(n_patients=1, seed=1, frames_per_video=10))
    table = extract_pretrain_frames(recs, VIDEO_MAP, SCHEMA, rate_fps=1.0)
    clip = recs[0].videos[1]
    assert len(table) == 40
    for j, idx in enumerate([0, 2, 4, 6, 8]):
        assert np.array_equal(table.frames[j], clip.frames[idx])


def test_frames_need_videos(clean_records):
    with pytest.raises(ValueError, match="no videos"):
        extract_pretrain_frames(clean_records, VIDEO_MAP, SCHEMA)


def test_holdout_is_patient_level(records):
    table = extract_pretrain_frames(records, VIDEO_MAP, SCHEMA)
    mask = holdout_mask(table.patient_ids, 0.1, 0)
    held = {p for p, m in zip(table.patient_ids, mask) if m}
    kept = {p for p, m in zip(table.patient_ids, mask) if not m}
    assert held and not (held & kept)


# -- pre-training ------------------------------------------------------------


def test_pretrain_zero_epochs_returns_init(records):
    table = extract_pretrain_frames(records[:2], VIDEO_MAP, SCHEMA)
    state, history = pretrain_backbone(table, BackboneSpec(), PretrainConfig(epochs=0, seed=4))
    init = build_backbone(BackboneSpec(), torch.Generator().manual_seed(4)).state_dict()
    assert all(torch.equal(state[k], init[k]) for k in init)
    assert history.epochs == []


def test_pretrain_empty_table(records):
    table = extract_pretrain_frames([], VIDEO_MAP, SCHEMA)
    with pytest.raises(ValueError, match="empty frame table"):
        pretrain_backbone(table, BackboneSpec(), PretrainConfig(epochs=1))


def test_pretrain_deterministic(records):
    table = extract_pretrain_frames(records[:6], VIDEO_MAP, SCHEMA)
    cfg = PretrainConfig(epochs=1, seed=2)
    a, _ = pretrain_backbone(table, BackboneSpec(), cfg)
    b, _ = pretrain_backbone(table, BackboneSpec(), cfg)
    assert all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def pretrained():
    recs = generate_records(GenConfig(n_patients=80, seed=33))
    table = extract_pretrain_frames(recs, VIDEO_MAP, SCHEMA)
    state, history = pretrain_backbone(table, BackboneSpec(), PretrainConfig())
    return recs, table, state, history


def test_pretrain_holdout_accuracy(pretrained):
    _, _, _, history = pretrained
    assert len(history.epochs) == 10
    assert history.final_holdout_accuracy >= 0.85


def test_pretrained_frames_agree_within_clips(pretrained):
    recs, table, state, history = pretrained
    backbone = build_backbone(BackboneSpec(), torch.Generator())
    backbone.load_state_dict(state)
    heads = nn.ModuleDict({str(k): nn.Linear(128, c) for k, c in sorted(table.n_classes.items())})
    heads.load_state_dict(history.head_state)
    agree = 0
    clips = 0
    with torch.no_grad():
        feats = backbone(torch.from_numpy(table.frames)[:, None])
        for start in range(0, len(table), 5):  # 5 consecutive frames per clip
            kind = int(table.video_kinds[start])
            pred = heads[str(kind)](feats[start : start + 5]).argmax(1)
            agree += bool((pred == pred[0]).all())
            clips += 1
    assert agree / clips >= 0.8


# -- augmentation ------------------------------------------------------------


def test_identity_augmentation_is_bit_exact():
    img = torch.rand(64, 64)
    for seed in range(20):
        out = augment(img, np.random.default_rng(seed), scale=(1.0, 1.0), flip_probability=0.0)
        assert torch.equal(out, img)


def test_flip_only_is_mirror_and_involution():
    img = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    once = augment(img, np.random.default_rng(1), scale=(1.0, 1.0), flip_probability=1.0)
    assert isinstance(once, np.ndarray)
    assert np.array_equal(once, img[:, ::-1])
    twice = augment(once, np.random.default_rng(2), scale=(1.0, 1.0), flip_probability=1.0)
    assert np.array_equal(twice, img)


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lo=st.floats(0.05, 1.0), flip=st.floats(0, 1))
def test_augment_keeps_shape_and_range(seed, lo, flip):
    img = torch.rand(1, 32, 48, generator=torch.Generator().manual_seed(seed % 1000))
    out = augment(img, np.random.default_rng(seed), scale=(lo, 1.0), flip_probability=flip)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_crop_changes_image():
    img = torch.rand(4, 1, 64, 64)
    out = augment_batch(img, np.random.default_rng(0), scale=(0.5, 0.6), flip_probability=0.0)
    assert not torch.equal(out, img)


# -- optimizer ---------------------------------------------------------------


def test_vanilla_step():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    g = {"w": torch.tensor([0.5, 0.25], dtype=torch.float64)}
    sgd_update(p, g, {}, 0.1, momentum=0.0, weight_decay=0.0)
    assert torch.equal(p["w"], torch.tensor([1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25], dtype=torch.float64))


def test_zero_gradient_fixed_point():
    p = {"w": torch.tensor([3.0, 4.0])}
    before = p["w"].clone()
    sgd_update(p, {"w": torch.zeros(2)}, {}, 2e-3, momentum=0.9, weight_decay=0.0)
    assert torch.equal(p["w"], before)


def test_two_momentum_steps():
    g = torch.tensor([1.0, -3.0, 0.25], dtype=torch.float64)
    p = {"w": torch.zeros(3, dtype=torch.float64)}
    velocity = {}
    for _ in range(2):
        sgd_update(p, {"w": g}, velocity, 2e-3, momentum=0.9, weight_decay=0.0)
    assert torch.allclose(p["w"], -2e-3 * 2.9 * g, rtol=0, atol=1e-9)


def test_weight_decay_enters_velocity():
    p = {"w": torch.tensor([2.0], dtype=torch.float64)}
    velocity = {}
    sgd_update(p, {"w": torch.tensor([0.0], dtype=torch.float64)}, velocity, 0.1, momentum=0.9, weight_decay=0.5)
    assert velocity["w"].item() == 1.0
    assert p["w"].item() == pytest.approx(1.9, abs=1e-15)


def test_frozen_parameters_and_velocity_untouched():
    p = {"a": torch.ones(2), "b": torch.ones(2)}
    velocity = {"b": torch.full((2,), 0.5)}
    sgd_update(p, {"a": torch.ones(2), "b": torch.ones(2)}, velocity, 0.1, 0.9, 0.0, trainable={"a"})
    assert torch.equal(p["b"], torch.ones(2))
    assert torch.equal(velocity["b"], torch.full((2,), 0.5))
    assert not torch.equal(p["a"], torch.ones(2))


def test_non_finite_gradient_aborts():
    p = {"w": torch.ones(2)}
    with pytest.raises(NonFiniteGradientError, match="w"):
        sgd_update(p, {"w": torch.tensor([1.0, float("nan")])}, {}, 0.1, 0.9, 0.0)
    assert torch.equal(p["w"], torch.ones(2))


# -- stages ------------------------------------------------------------------


def test_stage1_freezes_diagnosis_head(records):
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    before = group_snapshot(model, "diagnosis_head")
    backbone = group_snapshot(model, "backbone")
    run_stage(model, records[:8], records[8:10], STAGES[1], 2, SHORT, weights())
    after = group_snapshot(model, "diagnosis_head")
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert not all(torch.equal(backbone[k], v) for k, v in group_snapshot(model, "backbone").items())


def test_stage2_freezes_indicator_heads(records):
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    before = group_snapshot(model, "indicator_heads")
    run_stage(model, records[:8], records[8:10], STAGES[2], 2, SHORT, weights())
    after = group_snapshot(model, "indicator_heads")
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_zero_epoch_stage_is_noop(records):
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    before = state_snapshot(model)
    history = run_stage(model, records[:4], records[4:6], STAGES[3], 0, SHORT, weights())
    assert len(history) == 0
    assert all(torch.equal(before[k], v) for k, v in state_snapshot(model).items())


def test_stage1_decreases_indicator_loss(clean_records):
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=2)
    cfg = replace(SHORT, augment=False)
    history = run_stage(model, clean_records[:16], clean_records[16:], STAGES[1], 4, cfg, weights())
    losses = [r.train_indicator_loss for r in history.records]
    assert losses[-1] < losses[0]


def test_one_step_per_patient(records, monkeypatch):
    calls = []
    real = training.sgd_update
    monkeypatch.setattr(training, "sgd_update", lambda *a, **k: (calls.append(1), real(*a, **k)))
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    run_stage(model, records[:7], records[7:9], STAGES[3], 2, SHORT, weights())
    assert len(calls) == 14


def test_zero_lambda_stage1_only_decays(records):
    """All-zero weights: stage 1 sees no gradient, so parameters only shrink by weight decay."""
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    before = group_snapshot(model, "backbone")
    cfg = replace(SHORT, momentum=0.0)
    run_stage(model, records[:3], records[3:5], STAGES[1], 1, cfg, weights(0.0))
    factor = (1 - cfg.learning_rate * cfg.weight_decay) ** 3
    for k, v in group_snapshot(model, "backbone").items():
        assert torch.allclose(v, before[k] * factor, rtol=1e-6, atol=1e-9)


# -- full schedule -----------------------------------------------------------


def test_three_stage_history(records):
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    cfg = TrainConfig(epochs_total=4, stage_epochs=(1, 2, 1))
    model, history = train_3stage(model, records[:8], records[8:12], cfg, weights())
    assert [r.stage_id for r in history.records] == [1, 2, 2, 3]
    assert [r.epoch for r in history.records] == [1, 2, 3, 4]
    assert history.selected == select_best_checkpoint(history)
    assert history.to_table().splitlines()[0].startswith("epoch,stage,")


def test_single_stage_joint_training(records):
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    cfg = TrainConfig(epochs_total=2, stage_epochs=(0, 0, 2))
    _, history = train_3stage(model, records[:6], records[6:8], cfg, weights())
    assert [r.stage_id for r in history.records] == [3, 3]


def test_training_is_deterministic(records):
    cfg = TrainConfig(epochs_total=3, stage_epochs=(1, 1, 1), seed=5)
    runs = []
    for _ in range(2):
        model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
        model, history = train_3stage(model, records[:6], records[6:10], cfg, weights())
        runs.append((state_snapshot(model), history))
    assert runs[0][1].selected == runs[1][1].selected
    assert runs[0][1].val_accuracies == runs[1][1].val_accuracies
    assert all(torch.equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])


def test_best_checkpoint_is_restored(records):
    cfg = TrainConfig(epochs_total=3, stage_epochs=(1, 1, 1), seed=5)
    model = MultiStreamNet(SCHEMA, IMAGE_MAP, seed=1)
    model, history = train_3stage(model, records[:6], records[6:10], cfg, weights())
    best = max(history.val_accuracies)
    acc, _ = training.validation_metrics(model, records[6:10])
    assert acc == best


def test_select_best_checkpoint():
    assert select_best_checkpoint([0.3, 0.5, 0.4]) == "epoch_002"
    assert select_best_checkpoint([0.5, 0.5]) == "epoch_001"
    assert select_best_checkpoint([0.7]) == "epoch_001"
    with pytest.raises(ValueError):
        select_best_checkpoint(TrainHistory())

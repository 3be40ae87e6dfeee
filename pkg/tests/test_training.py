import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrstat.attention import LossWeights
from lrstat.backbone import init_model
from lrstat.autodiff import make_rng
from lrstat.degrade import DegradeConfig, VideoClip, degrade_clip
from lrstat.training import (
    CSV_HEADER,
    Metrics,
    TeacherCache,
    TrainConfig,
    clip_by_global_norm,
    evaluate,
    lr_at,
    pretrain_unsupervised,
    rolling_weights_at,
    sgd_step,
    split_validation,
    student_from_teacher,
    topn_hits,
    train_student_stat,
    train_supervised,
    weights_at,
)
from tests.conftest import tiny_model

WIDTHS = (2, 3)
W2 = LossWeights(1 / 3, 1 / 3, 1 / 3, (0.5, 0.5))


def pairs(n=6, classes=3, frames=4, seed=0):
    r = np.random.default_rng(seed)
    hr, lr = [], []
    for i in range(n):
        clip = VideoClip(r.uniform(size=(frames, 6, 8, 3)), i % classes, f"c{i}")
        hr.append(clip)
        lr.append(degrade_clip(clip, DegradeConfig(target_h=3, target_w=4, seed=seed)))
    return hr, lr


def cfg(**kw):
    base = dict(epochs=3, batch_size=2, base_lr=0.05, warmup_epochs=1, segments=2, seed=0, weights=W2)
    base.update(kw)
    return TrainConfig(**base)


# -- schedules --------------------------------------------------------------

SPATIAL = [(0.4, 0.3, 0.2, 0.1), (0.3, 0.4, 0.2, 0.1), (0.2, 0.3, 0.4, 0.1), (0.1, 0.2, 0.3, 0.4)]
TEMPORAL = [(2 / 3, 1 / 3), (1 / 3, 2 / 3)]


def test_rolling_first_cycle_literal():
    assert rolling_weights_at(0) == ((0.4, 0.3, 0.2, 0.1), (2 / 3, 1 / 3))
    assert rolling_weights_at(9) == ((0.4, 0.3, 0.2, 0.1), (2 / 3, 1 / 3))
    assert rolling_weights_at(10) == ((0.3, 0.4, 0.2, 0.1), (1 / 3, 2 / 3))
    assert rolling_weights_at(25) == ((0.2, 0.3, 0.4, 0.1), (2 / 3, 1 / 3))
    assert rolling_weights_at(39) == ((0.1, 0.2, 0.3, 0.4), (1 / 3, 2 / 3))
    assert rolling_weights_at(40) == ((0.4, 0.3, 0.2, 0.1), (2 / 3, 1 / 3))


def test_rolling_negative_epoch():
    with pytest.raises(ValueError):
        rolling_weights_at(-1)


def test_lr_schedule_literal():
    c = TrainConfig(epochs=80, base_lr=0.001)
    assert [lr_at(e, c) for e in range(5)] == pytest.approx([0.0002, 0.0004, 0.0006, 0.0008, 0.001])
    assert lr_at(5, c) == 0.001 and lr_at(24, c) == 0.001
    assert lr_at(25, c) == pytest.approx(1e-4)
    assert lr_at(45, c) == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        lr_at(80, c)


def test_weights_at_fixed_and_rolling():
    fixed = cfg()
    assert weights_at(17, fixed) == fixed.weights
    rolling = cfg(weight_mode="rolling")
    w = weights_at(17, rolling)
    assert (w.sat_block_weights, w.tat_layer_weights) == rolling_weights_at(17)
    assert (w.w_ce, w.w_sat, w.w_tat) == (1 / 3, 1 / 3, 1 / 3)


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(warmup_epochs=3, epochs=3), dict(momentum=1.0), dict(weight_mode="x"), dict(segments=1)):
        with pytest.raises(ValueError):
            cfg(**bad)


# -- optimiser --------------------------------------------------------------


def test_sgd_momentum_two_steps():
    p, g = {"w": np.array([1.0])}, {"w": np.array([0.5])}
    p, v = sgd_step(p, g, 0.1, 0.9, {})
    assert p["w"][0] == pytest.approx(0.95)
    p, v = sgd_step(p, g, 0.1, 0.9, v)
    assert v["w"][0] == pytest.approx(0.95)
    assert p["w"][0] == pytest.approx(0.95 - 0.095)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_by_global_norm(g, 1.0)
    assert math.hypot(out["a"][0], out["b"][0]) == pytest.approx(1.0)
    assert clip_by_global_norm(g, 10.0) is g


# -- metrics ----------------------------------------------------------------


def test_topn_ties_go_to_lower_index():
    logits = np.zeros((2, 4))
    assert topn_hits(logits, np.array([0, 1]), 1).tolist() == [True, False]
    assert topn_hits(logits, np.array([3, 1]), 3).tolist() == [False, True]


def test_constant_logits_on_balanced_data_hit_one_in_eight():
    labels = np.repeat(np.arange(8), 10)
    assert topn_hits(np.zeros((80, 8)), labels, 1).mean() == pytest.approx(1 / 8)


def test_prec5_is_one_with_five_classes():
    r = np.random.default_rng(0)
    assert topn_hits(r.normal(size=(50, 5)), r.integers(0, 5, 50), 5).all()


def test_perfect_classifier():
    labels = np.array([2, 0, 1])
    assert topn_hits(np.eye(3)[labels] * 5, labels, 1).all()


def test_evaluate_rejects_empty_and_unlabelled():
    m = tiny_model(widths=WIDTHS)
    with pytest.raises(ValueError):
        evaluate(m, [])
    with pytest.raises(ValueError):
        evaluate(m, [VideoClip(np.zeros((4, 4, 4, 3)))])


def test_split_validation_is_seeded_partition():
    tr, va = split_validation(10, 0.2, 3)
    assert len(va) == 2 and sorted(tr + va) == list(range(10))
    assert split_validation(10, 0.2, 3) == (tr, va)


def test_metrics_csv_roundtrip():
    hr, lr = pairs()
    _, met = train_supervised(lr, cfg(), 3, widths=WIDTHS)
    text = met.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert "wall" not in text
    assert Metrics.from_csv(text, met.regime).to_csv() == text


# -- training contracts -----------------------------------------------------


def test_memorise_single_sample():
    clip = VideoClip(np.random.default_rng(1).uniform(size=(4, 4, 4, 3)), 1, "one")
    c = cfg(epochs=150, batch_size=1, base_lr=0.05, val_fraction=0.0, select_best=False, clip_grad=False)
    _, met = train_supervised([clip], c, 3, widths=(4, 4))
    assert met.epochs[-1].loss_total < 0.01


def test_seeded_training_is_repeatable():
    _, lr = pairs()
    a = train_supervised(lr, cfg(), 3, widths=WIDTHS)
    b = train_supervised(lr, cfg(), 3, widths=WIDTHS)
    assert a[1].to_csv() == b[1].to_csv()
    assert a[0].checksum() == b[0].checksum()


def test_ce_only_weights_reproduce_baseline():
    hr, lr = pairs()
    teacher = init_model(make_rng(9), 3, 2, widths=WIDTHS)
    base_model, base = train_supervised(lr, cfg(), 3, widths=WIDTHS, regime="baseline")
    c = cfg(weights=LossWeights.supervised(2))
    stat_model, stat = train_student_stat(teacher, hr, lr, c, 3, widths=WIDTHS)
    assert stat_model.checksum() == base_model.checksum()
    assert [r.total for r in stat.steps] == [r.total for r in base.steps]
    assert stat.to_csv() == base.to_csv()


def test_logged_total_is_weighted_sum():
    hr, lr = pairs()
    teacher = init_model(make_rng(9), 3, 2, widths=WIDTHS)
    c = cfg(weights=LossWeights(1 / 7, 4 / 7, 2 / 7, (0.5, 0.5)))
    _, met = train_student_stat(teacher, hr, lr, c, 3, widths=WIDTHS)
    for s in met.steps:
        w = s.weights
        assert s.total == pytest.approx(w.w_ce * s.ce + w.w_sat * s.sat + w.w_tat * s.tat, abs=1e-12)


def test_teacher_untouched_by_student_training():
    hr, lr = pairs()
    teacher = init_model(make_rng(9), 3, 2, widths=WIDTHS)
    before = teacher.checksum()
    train_student_stat(teacher, hr, lr, cfg(), 3, widths=WIDTHS)
    assert teacher.checksum() == before


def test_unpaired_data_rejected():
    hr, lr = pairs()
    teacher = init_model(make_rng(9), 3, 2, widths=WIDTHS)
    with pytest.raises(ValueError, match="unpaired"):
        train_student_stat(teacher, hr[:-1], lr, cfg(), 3, widths=WIDTHS)
    swapped = [replace(lr[1], id="zzz")] + lr[1:]
    with pytest.raises(ValueError, match="unpaired"):
        train_student_stat(teacher, hr, swapped, cfg(), 3, widths=WIDTHS)


def test_rolling_mode_logs_schedule():
    hr, lr = pairs()
    teacher = init_model(make_rng(9), 3, 2, widths=(6, 6, 6, 6))
    # 6x8 -> 3x4 -> 3x4 ...: four blocks on tiny frames
    c = cfg(epochs=12, weight_mode="rolling", weights=LossWeights(), base_lr=0.01)
    _, met = train_student_stat(teacher, hr, lr, c, 3, widths=(6, 6, 6, 6))
    for r in met.epochs:
        assert (r.weights.sat_block_weights, r.weights.tat_layer_weights) == rolling_weights_at(r.epoch)


def test_pretrain_logs_zero_ce_and_ignores_labels():
    hr, lr = pairs()
    teacher = init_model(make_rng(9), 3, 2, widths=WIDTHS)
    before = teacher.checksum()
    student = init_model(make_rng(1), 3, 2, widths=WIDTHS)
    _, met = pretrain_unsupervised(teacher, student, hr, lr, cfg())
    assert teacher.checksum() == before
    assert all(r.weights.w_ce == 0.0 for r in met.epochs)
    assert all(math.isnan(r.loss_ce) for r in met.epochs)
    assert all(r.loss_total == pytest.approx(r.loss_sat * r.weights.w_sat + r.loss_tat * r.weights.w_tat) for r in met.epochs)


def test_pretrain_agreement_fixed_point():
    # identical inputs on both sides and a student copied from the teacher
    hr, _ = pairs()
    teacher = init_model(make_rng(9), 3, 2, widths=WIDTHS)
    student = student_from_teacher(teacher)
    _, met = pretrain_unsupervised(teacher, student, hr, hr, cfg(base_lr=1e-3))
    assert met.steps[0].total < 1e-12
    assert max(r.loss_total for r in met.epochs) < 1e-6


def test_teacher_cache_matches_direct_forward():
    from lrstat.attention import teacher_attention_vectors
    from lrstat.backbone import backbone_forward, model_forward, output_extents

    hr, lr = pairs(n=2)
    teacher = init_model(make_rng(9), 3, 2, widths=WIDTHS)
    cache = TeacherCache(teacher, hr, lr[0].resolution)
    idx = [[0, 3], [1, 2]]
    vecs = cache.block_vectors([0, 1], idx)
    frames = np.stack([hr[0].frames[[0, 3]], hr[1].frames[[1, 2]]])
    acts, _ = backbone_forward(frames, teacher.backbone)
    ext = output_extents(3, 4, 2)
    for b in range(2):
        np.testing.assert_allclose(vecs[b], teacher_attention_vectors(acts[b].value, ext[b]), rtol=1e-12)
    hidden, logits = cache.tam_layers([0, 1], idx)
    out = model_forward(frames, teacher)
    np.testing.assert_allclose(hidden, out.tam.hidden.value, rtol=1e-12)
    np.testing.assert_allclose(logits, out.tam.logits.value, rtol=1e-12)


@given(st.integers(0, 200))
def test_rolling_is_periodic(epoch):
    s, t = rolling_weights_at(epoch)
    assert (s, t) == rolling_weights_at(epoch + 40)
    assert s == tuple(SPATIAL[(epoch // 10) % 4]) and t == tuple(TEMPORAL[(epoch // 10) % 2])
    assert sum(s) == pytest.approx(1.0) and sum(t) == pytest.approx(1.0)


@given(st.integers(1, 20), st.integers(0, 10), st.integers(1, 30))
def test_lr_never_exceeds_base(warm, extra, every):
    c = TrainConfig(epochs=warm + extra + 1, warmup_epochs=warm, lr_decay_every=every, base_lr=0.01)
    lrs = [lr_at(e, c) for e in range(c.epochs)]
    assert max(lrs) <= 0.01 + 1e-18
    assert lrs[warm] == 0.01

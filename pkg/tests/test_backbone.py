import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrstat import autodiff as ad
from lrstat.backbone import (
    TEST_CENTER,
    TRAIN_RANDOM,
    backbone_forward,
    init_model,
    load_checkpoint,
    model_forward,
    output_extents,
    save_checkpoint,
    segment_bounds,
    segment_indices,
    segment_sample,
)
from lrstat.degrade import VideoClip
from tests.conftest import tiny_model


def test_output_extents_rule():
    assert output_extents(12, 16, 4) == [(6, 8), (3, 4), (3, 4), (3, 4)]
    assert output_extents(48, 64, 4) == [(24, 32), (12, 16), (6, 8), (3, 4)]
    assert output_extents(3, 3, 2) == [(3, 3), (3, 3)]


def test_block_activation_shapes_match_rule(rng):
    m = init_model(ad.make_rng(0), 4, 2, widths=(2, 3, 4, 5))
    acts, feats = backbone_forward(rng.uniform(size=(3, 12, 16, 3)), m.backbone)
    assert [a.shape for a in acts] == [(3, c, h, w) for c, (h, w) in zip((2, 3, 4, 5), output_extents(12, 16, 4))]
    assert feats.shape == (3, 5)


def test_frames_processed_independently(rng):
    m = tiny_model()
    f = rng.uniform(size=(3, 8, 8, 3))
    _, together = backbone_forward(f, m.backbone)
    for i in range(3):
        _, alone = backbone_forward(f[i : i + 1], m.backbone)
        np.testing.assert_allclose(together.value[i], alone.value[0], rtol=1e-12)


def test_block_is_conv_relu_pool(rng):
    m = tiny_model(widths=(2, 2))
    f = rng.uniform(size=(1, 4, 4, 3))
    acts, _ = backbone_forward(f, m.backbone)
    k, b = m.backbone.kernels[0].value, m.backbone.biases[0].value
    x = np.pad(f[0].transpose(2, 0, 1), ((0, 0), (1, 1), (1, 1)))
    conv = np.array([[[(x[:, i : i + 3, j : j + 3] * k[o]).sum() + b[o] for j in range(4)] for i in range(4)] for o in range(2)])
    want = np.maximum(conv, 0).reshape(2, 2, 2, 2, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(acts[0].value[0], want, rtol=1e-12)


def test_wrong_channel_count(rng):
    with pytest.raises(ad.ShapeError):
        backbone_forward(rng.uniform(size=(1, 8, 8, 1)), tiny_model().backbone)


def test_model_forward_shapes(rng):
    m = tiny_model(classes=5, k=3)
    out = model_forward(rng.uniform(size=(2, 3, 8, 8, 3)), m)
    assert out.logits.shape == (2, 5)
    assert out.tam.weights.shape == (2, 3)
    assert out.segment_features.shape == (2, 3, 3)
    with pytest.raises(ad.ShapeError):
        model_forward(rng.uniform(size=(2, 2, 8, 8, 3)), m)


def test_zero_frames_zero_biases_give_zero_features():
    m = tiny_model()
    _, feats = backbone_forward(np.zeros((2, 8, 8, 3)), m.backbone)
    assert np.all(feats.value == 0)


def test_init_model_validation():
    with pytest.raises(ValueError):
        init_model(ad.make_rng(0), 3, 2, widths=(4,))
    with pytest.raises(ValueError):
        init_model(ad.make_rng(0), 3, 1)


def test_init_is_seeded():
    assert tiny_model(seed=3).checksum() == tiny_model(seed=3).checksum()
    assert tiny_model(seed=3).checksum() != tiny_model(seed=4).checksum()


def test_segment_bounds_partition():
    assert segment_bounds(16, 4) == [(0, 4), (4, 8), (8, 12), (12, 16)]
    assert segment_bounds(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]
    with pytest.raises(ValueError):
        segment_bounds(3, 4)


def test_test_center_indices():
    assert segment_indices(16, 4, TEST_CENTER) == [2, 6, 10, 14]
    assert segment_indices(4, 4, TEST_CENTER) == [0, 1, 2, 3]


def test_train_random_needs_rng_and_unknown_mode():
    with pytest.raises(ValueError):
        segment_indices(8, 2, TRAIN_RANDOM)
    with pytest.raises(ValueError):
        segment_indices(8, 2, "middle")


def test_segment_sample_frames(rng):
    clip = VideoClip(rng.uniform(size=(8, 4, 4, 3)))
    s = segment_sample(clip, 2, TEST_CENTER)
    np.testing.assert_array_equal(s.frames, clip.frames[[2, 6]])


def test_checkpoint_roundtrip(tmp_path, rng):
    m = tiny_model()
    save_checkpoint(tmp_path / "m.ckpt", m, {"regime": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert back.checksum() == m.checksum()
    assert meta == {"regime": "x"}
    f = rng.uniform(size=(1, 2, 8, 8, 3))
    np.testing.assert_array_equal(model_forward(f, back).logits.value, model_forward(f, m).logits.value)


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", tiny_model(), {"b": 1, "a": 2})
    save_checkpoint(tmp_path / "b", tiny_model(), {"a": 2, "b": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"hello\n{}\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


@given(st.integers(4, 40), st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_train_random_index_in_its_segment(t, k, seed):
    if t < k:
        return
    idx = segment_indices(t, k, TRAIN_RANDOM, np.random.default_rng(seed))
    for i, (a, b) in zip(idx, segment_bounds(t, k)):
        assert a <= i < b


@given(st.integers(1, 60), st.integers(1, 8))
def test_segments_cover_all_frames(t, k):
    if t < k:
        return
    b = segment_bounds(t, k)
    assert b[0][0] == 0 and b[-1][1] == t
    sizes = [hi - lo for lo, hi in b]
    assert max(sizes) - min(sizes) <= 1
    assert all(b[i][1] == b[i + 1][0] for i in range(k - 1))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from irkd import tensor as T
from irkd.attention import AttentionMap, AttentionMode, export_heatmap, grad_cam, save_maps
from irkd.backbone import ForwardRecord, ModelConfig, build_model, forward_with_features
from irkd.tensor import GraphError, Tensor

from oracles import fd_channel_weights, numpy_cam


def _model64(cfg, seed):
    model = build_model(cfg, seed, dtype=np.float64)
    # non-zero biases so the head is not trivially symmetric
    rng = np.random.default_rng(seed)
    for name, p in model.parameters.items():
        if name.endswith("bias"):
            p.data[:] = rng.normal(scale=0.1, size=p.shape)
    return model


def test_single_channel_map_matches_fd_oracle(rng):
    cfg = ModelConfig(input_channels=3, block_channels=[1], num_classes=3, input_size=8)
    model = _model64(cfg, 3)
    model.parameters["fc.weight"].data[:] = np.abs(model.parameters["fc.weight"].data) + 0.1
    x = rng.uniform(size=(2, 3, 8, 8))
    rec = forward_with_features(model, x)
    amap = grad_cam(rec, AttentionMode.RELU_MINMAX, differentiable=True)
    alpha = fd_channel_weights(model, rec.features.data)
    assert (alpha > 0).all()
    expected = numpy_cam(alpha, rec.features.data, "relu_minmax")
    assert np.abs(amap.values.data - expected).max() < 1e-4


@pytest.mark.parametrize("mode", list(AttentionMode))
def test_identical_models_identical_maps(tiny_config, rng, mode):
    teacher = build_model(tiny_config, 4)
    student = teacher.clone()
    teacher.freeze()
    x = rng.uniform(size=(3, 3, 32, 32)).astype(np.float32)
    t_map = grad_cam(forward_with_features(teacher, x), mode, differentiable=False)
    s_map = grad_cam(forward_with_features(student, x), mode, differentiable=True)
    np.testing.assert_array_equal(t_map.values.data, s_map.values.data)
    np.testing.assert_array_equal(t_map.channel_weights, s_map.channel_weights)


def test_constant_features_give_zero_map():
    feats = Tensor(np.full((2, 3, 4, 4), 0.7), requires_grad=True)
    w = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    logits = T.linear(T.global_avg_pool(feats), w)
    amap = grad_cam(ForwardRecord(feats, logits, T.softmax(logits)), AttentionMode.RELU_MINMAX)
    np.testing.assert_array_equal(amap.values.data, 0.0)


def test_modes_ranges(tiny_config, rng):
    rec = forward_with_features(build_model(tiny_config, 1), rng.uniform(size=(4, 3, 32, 32)).astype(np.float32))
    raw = grad_cam(rec, "raw").values.data
    mm = grad_cam(rec, "minmax").values.data
    rmm = grad_cam(rec, "relu_minmax").values.data
    assert raw.min() < 0 < raw.max()
    for maps in (mm, rmm):
        assert maps.min() >= 0 and maps.max() <= 1
        flat = maps.reshape(*maps.shape[:2], -1)
        live = flat.max(axis=-1) > 0
        np.testing.assert_allclose(flat.max(axis=-1)[live], 1.0, atol=1e-6)
        np.testing.assert_allclose(flat.min(axis=-1), 0.0, atol=1e-6)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_relu_minmax_non_negative(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_channels=3, block_channels=[3, 4], num_classes=int(rng.integers(2, 5)), input_size=8)
    rec = forward_with_features(build_model(cfg, seed), rng.uniform(size=(2, 3, 8, 8)).astype(np.float32))
    assert (grad_cam(rec, AttentionMode.RELU_MINMAX).values.data >= 0).all()


def test_channel_weights_are_detached_and_student_map_is_live(tiny_config, rng):
    model = build_model(tiny_config, 0)
    rec = forward_with_features(model, rng.uniform(size=(2, 3, 32, 32)).astype(np.float32))
    amap = grad_cam(rec, AttentionMode.RELU_MINMAX, differentiable=True)
    assert isinstance(amap.channel_weights, np.ndarray)
    assert amap.values.requires_grad
    assert all(p.grad is None for p in model.parameters.values())
    T.backward(T.tsum(amap.values))
    assert model.parameters["conv0.weight"].grad is not None
    # the head only influences the map through the (constant) channel weights
    assert model.parameters["fc.weight"].grad is None


def test_teacher_maps_leave_teacher_untouched(tiny_config, rng):
    teacher = build_model(tiny_config, 0).freeze()
    before = teacher.param_hash()
    amap = grad_cam(forward_with_features(teacher, rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)))
    assert not amap.values.requires_grad
    assert teacher.param_hash() == before
    assert all(p.grad is None for p in teacher.parameters.values())


def test_differentiable_requires_live_graph(tiny_config, rng):
    teacher = build_model(tiny_config, 0).freeze()
    rec = forward_with_features(teacher, rng.uniform(size=(1, 3, 32, 32)).astype(np.float32))
    with pytest.raises(GraphError):
        grad_cam(rec, differentiable=True)
    detached = ForwardRecord(rec.features.detach(), rec.logits.detach(), rec.probs.detach())
    with pytest.raises(GraphError):
        grad_cam(detached)


# -- export -----------------------------------------------------------------------


def _map(values, mode=AttentionMode.RELU_MINMAX):
    values = np.asarray(values, dtype=np.float32)
    return AttentionMap(Tensor(values), mode, np.zeros((values.shape[0], values.shape[1], 1)))


def test_export_black_and_white(tmp_path):
    export_heatmap(_map(np.zeros((1, 2, 4, 4))), 0, 1, tmp_path / "black.png", size=16)
    export_heatmap(_map(np.ones((1, 2, 4, 4))), 0, 0, tmp_path / "white.png", size=16)
    black = np.asarray(Image.open(tmp_path / "black.png"))
    white = np.asarray(Image.open(tmp_path / "white.png"))
    assert black.shape == (16, 16) and black.dtype == np.uint8
    assert (black == 0).all() and (white == 255).all()


def test_export_hot_region_location(tmp_path):
    vals = np.zeros((1, 1, 8, 8))
    vals[0, 0, 1:4, 4:7] = 1.0
    export_heatmap(_map(vals), 0, 0, tmp_path / "hot.png", size=32)
    img = np.asarray(Image.open(tmp_path / "hot.png"))
    r, c = np.unravel_index(img.argmax(), img.shape)
    # map cell (i, j) covers pixels [4i, 4i+4)
    assert 4 <= r < 16 and 16 <= c < 28


def test_export_raw_mode_clamps_and_warns(tmp_path):
    vals = np.array([[[[-1.0, 0.5], [2.0, 0.0]]]])
    meta = export_heatmap(_map(vals, AttentionMode.RAW), 0, 0, tmp_path / "raw.png")
    img = Image.open(tmp_path / "raw.png")
    np.testing.assert_array_equal(np.asarray(img), [[0, 128], [255, 0]])
    assert "warning" in meta and "warning" in img.text


def test_export_index_errors(tmp_path):
    with pytest.raises(IndexError):
        export_heatmap(_map(np.zeros((1, 2, 4, 4))), 1, 0, tmp_path / "x.png")


def test_raw_map_dump(tmp_path):
    vals = np.random.default_rng(0).uniform(size=(2, 3, 4, 4)).astype(np.float32)
    save_maps(_map(vals), tmp_path / "maps.atd")
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "maps.atd").data, vals)

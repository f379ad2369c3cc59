import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from premirna import nn


def _layer(spec, in_shape, seed=0):
    layer = nn._LAYER_CLASSES[spec.kind](spec, in_shape, nn._out_shape(spec, in_shape, 0))
    layer.init(np.random.default_rng(seed))
    return layer


# ------------------------------------------------------------------ forward

def test_conv_length_and_identity_filter():
    assert nn.conv_output_length(160, 18, 4) == 36
    layer = _layer(nn.conv(1, 1, 1, "identity"), (1, 5))
    layer.params["W"][...] = 1.0
    x = np.arange(5.0).reshape(1, 1, 5)
    np.testing.assert_array_equal(layer.forward(x), x)


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(1)
    layer = _layer(nn.conv(3, 4, 2, "identity"), (2, 11))
    layer.params["b"][...] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 11))
    out = layer.forward(x)
    W, b = layer.params["W"], layer.params["b"]
    for n in range(2):
        for f in range(3):
            for t in range(out.shape[2]):
                ref = sum(W[f, c, k] * x[n, c, t * 2 + k] for c in range(2) for k in range(4)) + b[f]
                assert out[n, f, t] == pytest.approx(ref)


def test_conv_zero_input_gives_bias():
    layer = _layer(nn.conv(2, 3, 1, "identity"), (4, 8))
    layer.params["b"][...] = [0.5, -1.5]
    out = layer.forward(np.zeros((1, 4, 8)))
    np.testing.assert_array_equal(out[0, 0], 0.5)
    np.testing.assert_array_equal(out[0, 1], -1.5)


def test_pooling_examples():
    pool = _layer(nn.max_pool(2, 2), (1, 4))
    np.testing.assert_array_equal(pool.forward(np.array([[[1.0, 3, 2, 5]]])), [[[3, 5]]])
    glob = _layer(nn.global_max_pool(), (1, 3))
    np.testing.assert_array_equal(glob.forward(np.array([[[-1.0, -7, -2]]])), [[[-1]]])
    const = np.full((1, 2, 9), 4.0)
    np.testing.assert_array_equal(_layer(nn.max_pool(3, 2), (2, 9)).forward(const), 4.0)


def test_max_pool_ties_route_to_first_index():
    pool = _layer(nn.max_pool(3, 3), (1, 3))
    pool.forward(np.array([[[2.0, 2.0, 1.0]]]))
    np.testing.assert_array_equal(pool.backward(np.ones((1, 1, 1))), [[[1, 0, 0]]])


def test_dense_identity_and_relu():
    layer = _layer(nn.dense(3, "identity"), (3,))
    layer.params["W"][...] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(layer.forward(x), x)
    np.testing.assert_array_equal(nn.relu(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.NetworkSpec((4, 10), (nn.conv(5, 12),)).shapes()
    with pytest.raises(nn.ShapeError):
        nn.NetworkSpec((4, 10), (nn.max_pool(11, 1),)).shapes()
    with pytest.raises(ValueError):
        nn.LayerSpec("conv1d", filters=0, window=3)
    with pytest.raises(ValueError):
        nn.dropout(1.0)


def test_type2_shape_algebra():
    spec = nn.NetworkSpec((4, 160), (nn.conv(20, 18, 4), nn.dense(90), nn.dropout(0.3),
                                     nn.dense(2, "identity"), nn.softmax_layer()))
    assert spec.shapes() == [(20, 36), (90,), (90,), (2,), (2,)]
    net = nn.Network(spec, 0)
    assert net.layers[1].params["W"].shape == (90, 720)


# ---------------------------------------------------------- softmax and loss

@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_simplex_and_shift(xs, c):
    x = np.array(xs)
    p = nn.softmax(x)
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(nn.softmax(x + c), p, atol=1e-9)
    assert p[np.argmax(x)] == p.max()


def test_softmax_and_cross_entropy_examples():
    np.testing.assert_array_equal(nn.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_array_equal(nn.softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])
    assert nn.cross_entropy(np.array([0.0, 1.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)
    assert nn.cross_entropy(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == pytest.approx(math.log(2))
    assert math.isfinite(nn.cross_entropy(np.array([1.0, 0.0]), np.array([0.0, 1.0])))


def test_fused_gradient_is_p_minus_d():
    rng = np.random.default_rng(2)
    net = nn.Network(nn.NetworkSpec((5,), (nn.dense(3, "identity"), nn.softmax_layer())), 3)
    x = rng.normal(size=(1, 5))
    p = net.forward(x)
    grads = {name: g for _, name, g in net.backward(np.array([2]))}
    d = np.array([[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(grads["W"], (p - d).T @ x, atol=1e-14)
    np.testing.assert_allclose(grads["b"], (p - d)[0], atol=1e-14)


# ----------------------------------------------------------------- gradients

LAYER_CASES = [
    (nn.conv(3, 4, 1, "relu"), (2, 12)),
    (nn.conv(2, 5, 3, "sigmoid"), (3, 17)),
    (nn.conv(2, 3, 2, "identity"), (4, 9)),
    (nn.max_pool(3, 2), (2, 11)),
    (nn.global_max_pool(), (3, 7)),
    (nn.dense(4, "relu"), (3, 5)),
    (nn.dense(3, "sigmoid"), (6,)),
    (nn.dropout(0.4), (2, 6)),
    (nn.softmax_layer(), (5,)),
]


@pytest.mark.parametrize("spec, in_shape", LAYER_CASES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_gradients(spec, in_shape, seed):
    layer = _layer(spec, in_shape, seed)
    x = np.random.default_rng(seed + 10).normal(size=(3, *in_shape))
    assert nn.check_layer_gradients(layer, x, seed=seed, training=True) < 1e-4


@pytest.mark.parametrize("head", ["softmax", "sigmoid"])
def test_network_gradients(head):
    tail = (nn.dense(2, "identity"), nn.softmax_layer()) if head == "softmax" else (nn.dense(1, "sigmoid"),)
    spec = nn.NetworkSpec((4, 20), (nn.conv(3, 5, 1), nn.conv(3, 3, 1), nn.max_pool(3, 2),
                                    nn.dropout(0.3), nn.dense(6), *tail))
    net = nn.Network(spec, 5)
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(4, 4, 20)), rng.integers(0, 2, 4)
    assert nn.check_network_gradients(net, x, y, training=True, seed=1) < 1e-4


def test_backward_before_forward():
    net = nn.Network(nn.NetworkSpec((3,), (nn.dense(2, "identity"), nn.softmax_layer())), 0)
    with pytest.raises(RuntimeError):
        net.backward(np.array([1]))


def test_inference_dropout_gradient_equals_plain_net():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(3, 6)), np.array([0, 1, 1])
    with_drop = nn.Network(nn.NetworkSpec((6,), (nn.dense(4), nn.dropout(0.5), nn.dense(2, "identity"),
                                                 nn.softmax_layer())), 2)
    plain = nn.Network(nn.NetworkSpec((6,), (nn.dense(4), nn.dense(2, "identity"), nn.softmax_layer())), 2)
    with_drop.forward(x)
    plain.forward(x)
    g1 = [g for _, _, g in with_drop.backward(y)]
    g2 = [g for _, _, g in plain.backward(y)]
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------- dropout

def test_dropout_modes():
    x = np.ones((1, 20000))
    np.testing.assert_array_equal(nn.dropout_forward(x, 0.0, True, 1), x)
    np.testing.assert_array_equal(nn.dropout_forward(x, 0.3, False, 1), x)
    out = nn.dropout_forward(x, 0.3, True, 1)
    assert abs(np.mean(out > 0) - 0.7) < 0.05
    np.testing.assert_allclose(out[out > 0], 1 / 0.7)
    np.testing.assert_array_equal(out, nn.dropout_forward(x, 0.3, True, 1))
    with pytest.raises(ValueError):
        nn.dropout_forward(x, 1.0, True, 1)


# ----------------------------------------------------------------------- SGD

def test_sgd_examples():
    w = np.array([1.0])
    nn.sgd_update([w], [2 * w.copy()], 0.1)  # C = w^2
    assert w[0] == pytest.approx(0.8)
    v = np.array([3.0, -1.0])
    nn.sgd_update([v], [np.array([5.0, 5.0])], 0.0)
    np.testing.assert_array_equal(v, [3.0, -1.0])
    with pytest.raises(nn.TrainingDivergence):
        nn.sgd_update([v], [np.array([np.nan, 0.0])], 0.1)


def test_sgd_converges_monotonically_on_quadratic():
    A = np.diag([1.0, 4.0])
    w = np.array([3.0, -2.0])
    losses = []
    for _ in range(50):
        losses.append(0.5 * w @ A @ w)
        nn.sgd_update([w], [A @ w], 0.2)  # below 2 / max curvature
    assert np.all(np.diff(losses) <= 0) and losses[-1] < 1e-6


def test_fit_separable_toy_set():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 2))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    net = nn.Network(nn.NetworkSpec((2,), (nn.dense(2, "identity"), nn.softmax_layer())), 0)
    hist = nn.fit(net, x, y, nn.TrainConfig(learning_rate=0.5, epochs=100))
    assert hist[-1] < 0.1 * hist[0]
    again = nn.Network(nn.NetworkSpec((2,), (nn.dense(2, "identity"), nn.softmax_layer())), 0)
    assert nn.fit(again, x, y, nn.TrainConfig(learning_rate=0.5, epochs=100)) == hist


def test_fit_reports_divergence_epoch():
    x = np.full((4, 2), 1e300)
    net = nn.Network(nn.NetworkSpec((2,), (nn.dense(2, "identity"), nn.softmax_layer())), 0)
    with pytest.raises(nn.TrainingDivergence) as info:
        nn.fit(net, x, np.array([0, 1, 0, 1]), nn.TrainConfig(learning_rate=1e300, epochs=5))
    assert info.value.epoch is not None


def test_frozen_layers_do_not_move():
    rng = np.random.default_rng(0)
    net = nn.Network(nn.NetworkSpec((3,), (nn.dense(4), nn.dense(2, "identity"), nn.softmax_layer())), 0)
    net.frozen = {0}
    before = net.layers[0].params["W"].copy()
    nn.fit(net, rng.normal(size=(10, 3)), rng.integers(0, 2, 10), nn.TrainConfig(epochs=3))
    np.testing.assert_array_equal(net.layers[0].params["W"], before)


# --------------------------------------------------------------- model files

def test_model_file_roundtrip_and_corruption(tmp_path):
    arrays = [np.arange(6.0).reshape(2, 3), np.array([1.5])]
    nn.save_model(tmp_path / "m.bin", {"note": "x"}, arrays)
    header, back = nn.load_model(tmp_path / "m.bin")
    assert header["note"] == "x" and header["version"] == nn.MODEL_VERSION
    for a, b in zip(arrays, back):
        np.testing.assert_array_equal(a, b)
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-8])
    with pytest.raises(nn.ModelFileError, match="truncated"):
        nn.load_model(tmp_path / "t.bin")
    (tmp_path / "h.bin").write_bytes(data[:20])
    with pytest.raises(nn.ModelFileError):
        nn.load_model(tmp_path / "h.bin")
    bumped = data.replace(b'"version": 1', b'"version": 99')
    (tmp_path / "v.bin").write_bytes(bumped)
    with pytest.raises(nn.ModelFileError, match="version"):
        nn.load_model(tmp_path / "v.bin")

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import rbm_exact_conditionals
from premirna import nn, rbm_dbn
from premirna.rbm_dbn import DbnConfig, DbnPlan, RbmParams

# 2x2 images holding one horizontal or vertical bar, flattened row-major
BARS = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0], [0, 1, 0, 1]], dtype=float)


def random_rbm(seed, max_units=12):
    rng = np.random.default_rng(seed)
    nv = int(rng.integers(1, max_units))
    nh = int(rng.integers(1, max_units - nv + 1))
    return RbmParams(rng.normal(0, 1.5, (nv, nh)), rng.normal(0, 1, nv), rng.normal(0, 1, nh))


def bars_data(rng, n=64):
    return BARS[rng.integers(0, 4, n)]


@given(st.integers(0, 10_000))
def test_conditionals_match_exact_joint(seed):
    rbm = random_rbm(seed)
    vs, hs, p_h, p_v = rbm_exact_conditionals(rbm.W, rbm.b_v, rbm.b_h)
    np.testing.assert_allclose(rbm_dbn.rbm_hidden_probs(rbm, vs), p_h, atol=1e-10, rtol=0)
    np.testing.assert_allclose(rbm_dbn.rbm_visible_probs(rbm, hs), p_v, atol=1e-10, rtol=0)


def test_zero_parameters_give_one_half():
    rbm = RbmParams(np.zeros((5, 3)), np.zeros(5), np.zeros(3))
    np.testing.assert_array_equal(rbm_dbn.rbm_hidden_probs(rbm, np.ones((2, 5))), 0.5)


def test_hidden_probability_rises_with_bias():
    v = np.array([[1.0, 0.0]])
    probs = []
    for b in (0.0, 2.0, 5.0, 20.0, 40.0):
        rbm = RbmParams(np.array([[0.3], [-0.2]]), np.zeros(2), np.array([b]))
        probs.append(rbm_dbn.rbm_hidden_probs(rbm, v)[0, 0])
    assert np.all(np.diff(probs) >= 0) and probs[0] < probs[1] < probs[2]
    assert probs[-1] == pytest.approx(1.0)


def test_energy_matches_definition():
    rbm = random_rbm(3)
    rng = np.random.default_rng(0)
    v = rng.integers(0, 2, rbm.n_visible).astype(float)
    h = rng.integers(0, 2, rbm.n_hidden).astype(float)
    ref = -v @ rbm.b_v - h @ rbm.b_h - v @ rbm.W @ h
    assert rbm_dbn.rbm_energy(rbm, v, h)[0] == pytest.approx(ref)


def test_cd1_is_deterministic_per_seed():
    rbm = RbmParams.init(4, 3, np.random.default_rng(1))
    batch = bars_data(np.random.default_rng(2), 16)
    a, err_a = rbm_dbn.rbm_cd1_update(rbm, batch, 0.1, seed=9)
    b, err_b = rbm_dbn.rbm_cd1_update(rbm, batch, 0.1, seed=9)
    for name in ("W", "b_v", "b_h"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert err_a == err_b


def test_cd1_zero_batch_has_no_positive_phase():
    # with v0 = 0 the data term v0^T h0 vanishes; W then moves only by the
    # negative phase -eta * v1^T h1 / m, which is zero only if v1 is too
    rng = np.random.default_rng(4)
    rbm = RbmParams(rng.normal(0, 0.1, (3, 2)), np.zeros(3), np.zeros(2))
    batch = np.zeros((5, 3))
    new, _ = rbm_dbn.rbm_cd1_update(rbm, batch, 0.1, seed=0)
    h_rng = np.random.default_rng(0)
    h0 = (h_rng.random((5, 2)) < 0.5).astype(float)
    v1 = rbm_dbn.rbm_visible_probs(rbm, h0)
    h1 = rbm_dbn.rbm_hidden_probs(rbm, v1)
    np.testing.assert_allclose(new.W - rbm.W, -0.1 * v1.T @ h1 / 5, atol=1e-15)
    np.testing.assert_allclose(new.b_h - rbm.b_h, 0.1 * (0.5 - h1).mean(axis=0), atol=1e-15)


def test_cd1_rejects_bad_input():
    rbm = RbmParams.init(2, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        rbm_dbn.rbm_cd1_update(rbm, np.array([[2.0, 0.0]]), 0.1, 0)
    with pytest.raises(nn.TrainingDivergence):
        rbm_dbn.rbm_cd1_update(rbm, np.array([[1.0, 0.0]]), np.inf, 0)


def test_bars_reconstruction_improves():
    wins = 0
    for seed in range(20):
        data = bars_data(np.random.default_rng(seed))
        _, history = rbm_dbn.train_rbm(data, 4, epochs=50, eta=0.1, batch_size=8, seed=seed)
        wins += history[-1] < history[0]
    assert wins >= 19


def test_pretrain_shapes_and_representations():
    rng = np.random.default_rng(0)
    x = rng.random((40, 20))
    plan = DbnPlan((20, 100, 70, 35))
    stack = rbm_dbn.dbn_pretrain(plan, x, DbnConfig(pretrain_epochs=2))
    assert [s.W.shape for s in stack] == [(20, 100), (100, 70), (70, 35)]
    rep = x
    for rbm in stack:
        rep = rbm_dbn.rbm_hidden_probs(rbm, rep)
        assert rep.min() >= 0 and rep.max() <= 1
    with pytest.raises(ValueError):
        rbm_dbn.dbn_pretrain(plan, rng.random((4, 19)))


def test_single_layer_pretrain_is_plain_rbm_training():
    x = bars_data(np.random.default_rng(1), 32)
    config = DbnConfig(pretrain_epochs=5, pretrain_lr=0.1, batch_size=8, seed=3)
    (stack_rbm,) = rbm_dbn.dbn_pretrain(DbnPlan((4, 3)), x, config)
    direct, _ = rbm_dbn.train_rbm(x, 3, 5, 0.1, 8, seed=3000)
    np.testing.assert_array_equal(stack_rbm.W, direct.W)


def test_plan_validation():
    with pytest.raises(ValueError):
        DbnPlan((5,))
    with pytest.raises(ValueError):
        DbnPlan((5, 0))
    with pytest.raises(ValueError):
        DbnPlan((5, 3), head="tanh")


def _separable(seed, n=60):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = np.clip(rng.normal(0.25 + 0.5 * y[:, None], 0.05, (n, 6)), 0, 1)
    return x, y


def test_finetune_separable_reaches_full_training_accuracy():
    x, y = _separable(0)
    plan = DbnPlan((6, 10, 5))
    config = DbnConfig(pretrain_epochs=5, finetune_lr=0.5, finetune_epochs=200, batch_size=10)
    net, stack, history = rbm_dbn.train_dbn(plan, x, y, config)
    p = net.forward(x)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    assert np.mean(p.argmax(axis=1) == y) == 1.0
    assert history[-1] < history[0]


def test_zero_finetune_epochs_freezes_stack():
    x, y = _separable(1)
    plan = DbnPlan((6, 8, 4))
    config = DbnConfig(pretrain_epochs=3, finetune_epochs=0, head_epochs=20, finetune_lr=0.3)
    stack = rbm_dbn.dbn_pretrain(plan, x, config)
    net, _ = rbm_dbn.dbn_finetune(plan, stack, x, y, config)
    for layer, rbm in zip(net.layers, stack):
        np.testing.assert_array_equal(layer.params["W"], rbm.W.T)
        np.testing.assert_array_equal(layer.params["b"], rbm.b_h)
    fresh = rbm_dbn.unroll(plan, stack, seed=config.seed)
    assert not np.array_equal(net.layers[2].params["W"], fresh.layers[2].params["W"])


def test_sigmoid_head():
    x, y = _separable(2)
    plan = DbnPlan((6, 8), head="sigmoid")
    assert plan.output_units == 1
    net, _, _ = rbm_dbn.train_dbn(plan, x, y, DbnConfig(pretrain_epochs=3, finetune_epochs=100,
                                                         finetune_lr=0.5, batch_size=10))
    p = net.predict_proba(x)
    assert p.shape == (60,) and np.all((p >= 0) & (p <= 1))
    assert np.mean((p >= 0.5) == y) == 1.0


def test_stack_header_roundtrip():
    stack = [RbmParams.init(3, 2, np.random.default_rng(0)), RbmParams.init(2, 4, np.random.default_rng(1))]
    meta, arrays = rbm_dbn.stack_to_header(stack)
    back = rbm_dbn.stack_from_arrays(meta, arrays)
    for a, b in zip(stack, back):
        np.testing.assert_array_equal(a.W, b.W)
    with pytest.raises(ValueError):
        rbm_dbn.stack_from_arrays(meta, arrays[:-1])

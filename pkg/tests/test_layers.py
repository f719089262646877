import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stforecast import numeric as nx
from stforecast.layers import (AttentionScorer, BdLstm, FusionLayer, LocalCnn, LstmCell,
                               attention_pool, attention_score, attention_weights, bdlstm_forward,
                               fusion_forward, local_cnn_forward, lstm_step)
from stforecast.numeric import DimensionError


def rng(seed=0):
    return np.random.default_rng(seed)


def zero_all(module):
    for p in module.parameters():
        p.data[...] = 0.0


# -- local CNN ----------------------------------------------------------------

def test_cnn_zero_patch_zero_biases_gives_zero():
    cnn = LocalCnn(7, 3, 8, 5, rng())
    out = local_cnn_forward(cnn, np.zeros((7, 7, 2)))
    npt.assert_array_equal(out.data, np.zeros(5))


def test_cnn_identity_kernel_is_projection_of_tanh():
    cnn = LocalCnn(3, 1, 2, 4, rng(), kernel_size=1)
    cnn.kernels[0].data[...] = np.eye(2).reshape(1, 1, 2, 2)
    patch = rng(1).uniform(-2, 2, (3, 3, 2))
    expected = cnn.proj_weight.data @ np.tanh(patch).reshape(-1) + cnn.proj_bias.data
    npt.assert_allclose(local_cnn_forward(cnn, patch).data, expected, rtol=1e-13)


def test_cnn_output_size_and_batching():
    cnn = LocalCnn(5, 2, 4, 6, rng())
    patches = rng(1).normal(size=(3, 2, 5, 5, 2))
    out = cnn(patches)
    assert out.shape == (3, 2, 6)
    npt.assert_allclose(out.data[1, 0], cnn(patches[1, 0]).data, rtol=1e-13)


def test_cnn_rejects_wrong_patch():
    with pytest.raises(DimensionError):
        LocalCnn(5, 1, 2, 3, rng())(np.zeros((3, 3, 2)))


def test_cnn_gradient_on_7x7_patch():
    cnn = LocalCnn(7, 2, 4, 3, rng())
    patch = rng(1).uniform(-1, 1, (7, 7, 2))
    w = rng(2).uniform(-1, 1, 3)
    assert nx.grad_check(lambda: nx.tsum(cnn(patch) * w), cnn.parameters()) < 1e-4


# -- LSTM ---------------------------------------------------------------------

def test_lstm_step_invalid_returns_previous():
    cell = LstmCell(3, 4, rng())
    h, c = rng(1).normal(size=4), rng(2).normal(size=4)
    h2, c2 = lstm_step(cell, np.full(3, np.nan), h, c, valid=False)
    assert h2.data.tobytes() == h.tobytes() and c2.data.tobytes() == c.tobytes()


def test_lstm_step_all_zero_weights():
    cell = LstmCell(3, 4, rng())
    zero_all(cell)
    h, c = lstm_step(cell, rng(1).normal(size=3), np.zeros(4), np.zeros(4))
    npt.assert_array_equal(h.data, 0.0)
    npt.assert_array_equal(c.data, 0.0)


def test_lstm_saturated_forget_gate_keeps_cell():
    cell = LstmCell(3, 4, rng())
    zero_all(cell)
    cell.bias.data[4:8] = 20.0  # forget gate
    c_prev = rng(1).normal(size=4)
    _, c = lstm_step(cell, rng(2).normal(size=3), rng(3).normal(size=4), c_prev)
    npt.assert_allclose(c.data, c_prev, atol=1e-8)


def test_lstm_gate_ranges():
    cell = LstmCell(3, 5, rng())
    x = rng(1).normal(scale=3, size=(10, 3))
    hc = rng(2).normal(size=(10, 10))
    z = x @ cell.w_input.data + hc[:, :5] @ cell.w_hidden.data + cell.bias.data
    gates = 1 / (1 + np.exp(-z[:, :15]))
    assert np.all((gates > 0) & (gates < 1))
    assert np.all(np.abs(np.tanh(z[:, 15:])) < 1)
    out = cell.step(x, hc).data
    assert np.all(np.abs(out[:, :5]) < 1)


def test_lstm_cell_gradient():
    cell = LstmCell(3, 4, rng())
    x = rng(1).uniform(-1, 1, (2, 3))
    hc = rng(2).uniform(-1, 1, (2, 8))
    w = rng(3).uniform(-1, 1, (2, 8))
    assert nx.grad_check(lambda: nx.tsum(cell.step(x, hc) * w), cell.parameters()) < 1e-4


# -- BDLSTM -------------------------------------------------------------------

def tie(layer: BdLstm) -> None:
    for name in ("w_input", "w_hidden", "bias"):
        getattr(layer.backward_cell, name).data[...] = getattr(layer.forward_cell, name).data


def test_bdlstm_single_step_is_both_cells():
    layer = BdLstm(3, 4, rng())
    x = rng(1).normal(size=3)
    (out,) = bdlstm_forward(layer, [x])
    h_f, _ = lstm_step(layer.forward_cell, x, np.zeros(4), np.zeros(4))
    h_b, _ = lstm_step(layer.backward_cell, x, np.zeros(4), np.zeros(4))
    npt.assert_allclose(out.data, np.concatenate([h_f.data, h_b.data]), rtol=1e-14)


def test_bdlstm_reversal_symmetry_with_tied_cells():
    layer = BdLstm(3, 4, rng())
    tie(layer)
    xs = list(rng(1).normal(size=(6, 3)))
    fwd = [o.data for o in bdlstm_forward(layer, xs)]
    rev = [o.data for o in bdlstm_forward(layer, xs[::-1])]
    for a, b in zip(fwd, rev[::-1]):
        npt.assert_allclose(b, np.concatenate([a[4:], a[:4]]), atol=1e-12)


def test_bdlstm_skip_carries_forward_state():
    layer = BdLstm(2, 3, rng())
    xs = list(rng(1).normal(size=(3, 2)))
    out = bdlstm_forward(layer, xs, [True, False, True])
    npt.assert_array_equal(out[1].data[:3], out[0].data[:3])


@settings(max_examples=30, deadline=None)
@given(length=st.integers(2, 7), data=st.data())
def test_bdlstm_garbage_at_skipped_step_is_ignored(length, data):
    layer = BdLstm(2, 3, rng())
    tau = data.draw(st.integers(0, length - 1))
    garbage = data.draw(st.floats(-1e6, 1e6, allow_nan=False))
    xs = rng(length).normal(size=(length, 2))
    valids = np.ones(length, dtype=bool)
    valids[tau] = False
    a = bdlstm_forward(layer, list(xs), valids)
    xs[tau] = garbage
    b = bdlstm_forward(layer, list(xs), valids)
    for u, v in zip(a, b):
        assert u.data.tobytes() == v.data.tobytes()


def test_bdlstm_final_state_layout():
    layer = BdLstm(2, 3, rng())
    xs = rng(1).normal(size=(2, 4, 2))
    outputs, final = layer(xs)
    npt.assert_array_equal(final.data[:, :3], outputs.data[:, -1, :3])
    npt.assert_array_equal(final.data[:, 3:], outputs.data[:, 0, 3:])


def test_bdlstm_gradient_with_mask():
    layer = BdLstm(3, 4, rng())
    xs = rng(1).uniform(-1, 1, (2, 4, 3))
    valid = np.array([[True, False, True, True], [True, True, True, False]])
    w = rng(2).uniform(-1, 1, (2, 4, 8))
    assert nx.grad_check(lambda: nx.tsum(layer(xs, valid)[0] * w), layer.parameters()) < 1e-4


def test_bdlstm_rejects_bad_shapes():
    layer = BdLstm(3, 4, rng())
    with pytest.raises(DimensionError):
        layer(np.zeros((1, 4, 2)))
    with pytest.raises(DimensionError):
        layer(np.zeros((1, 4, 3)), np.ones((1, 3), dtype=bool))
    with pytest.raises(ValueError):
        bdlstm_forward(layer, [])


# -- attention ----------------------------------------------------------------

def test_attention_score_matches_formula():
    s = AttentionScorer(4, 3, 5, rng())
    cand, ctx = rng(1).normal(size=4), rng(2).normal(size=3)
    expected = s.v.data @ np.tanh(s.w_gamma.data @ cand + s.w_beta.data @ ctx + s.b_beta.data)
    npt.assert_allclose(attention_score(s, cand, ctx).item(), expected, rtol=1e-13)


def test_attention_score_zero_v():
    s = AttentionScorer(4, 3, 5, rng())
    s.v.data[...] = 0.0
    assert attention_score(s, rng(1).normal(size=4), rng(2).normal(size=3)).item() == 0.0


def test_attention_score_bias_only():
    s = AttentionScorer(4, 3, 5, rng())
    zero_all(s)
    s.b_beta.data[...] = rng(1).normal(size=5)
    s.v.data[0] = 1.0
    score = attention_score(s, rng(2).normal(size=4), rng(3).normal(size=3)).item()
    assert score == np.tanh(s.b_beta.data)[0]


def test_attention_batched_scores_match_single():
    s = AttentionScorer(4, 3, 5, rng())
    cand, ctx = rng(1).normal(size=(2, 6, 4)), rng(2).normal(size=(2, 3))
    batch = s(cand, ctx).data
    npt.assert_allclose(batch[1, 4], attention_score(s, cand[1, 4], ctx[1]).item(), rtol=1e-13)


def test_attention_scorer_gradient():
    s = AttentionScorer(4, 3, 5, rng())
    cand, ctx = rng(1).uniform(-1, 1, (2, 3, 4)), rng(2).uniform(-1, 1, (2, 3))
    w = rng(3).uniform(-1, 1, (2, 3))
    assert nx.grad_check(lambda: nx.tsum(s(cand, ctx) * w), s.parameters()) < 1e-4


def test_attention_weight_examples():
    npt.assert_array_equal(attention_weights([0.0, 0.0]).data, [0.5, 0.5])
    npt.assert_allclose(attention_weights([np.log(2.0), 0.0]).data, [2 / 3, 1 / 3], rtol=1e-15)
    npt.assert_allclose(attention_weights([7.5, 7.5, 7.5]).data, [1 / 3] * 3, rtol=1e-15)
    with pytest.raises(ValueError):
        attention_weights(np.array([]))


def test_attention_pool_examples():
    npt.assert_array_equal(attention_pool([[1.0, 2.0]], [1.0]).data, [1.0, 2.0])
    v = np.array([0.3, -1.2])
    npt.assert_allclose(attention_pool([v, v], [0.4, 0.6]).data, v, rtol=1e-15)
    npt.assert_allclose(attention_pool([[1.0, 0.0], [0.0, 1.0]], [0.25, 0.75]).data, [0.25, 0.75])
    with pytest.raises(ValueError):
        attention_pool([[1.0], [2.0]], [0.5, 0.6])


# -- fusion -------------------------------------------------------------------

def test_fusion_examples():
    layer = FusionLayer(4, 3, rng())
    x_c, ext = rng(1).normal(size=4), rng(2).uniform(size=3)
    layer.w_full.data[...] = 0.0
    s, e = fusion_forward(layer, x_c, ext)
    assert (s.item(), e.item()) == (0.0, 0.0)
    layer.b_full.data[...] = [0.4, -1.3]
    s, e = fusion_forward(layer, x_c, ext)
    assert (s.item(), e.item()) == (np.tanh(0.4), np.tanh(-1.3))


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(1e-3, 1e3))
def test_fusion_bounded(scale):
    layer = FusionLayer(4, 3, rng())
    out = layer(rng(1).normal(scale=scale, size=(5, 4)), rng(2).uniform(size=(5, 3))).data
    assert np.all(np.abs(out) <= 1.0)
    assert out.shape == (5, 2)


def test_fusion_gradient():
    layer = FusionLayer(4, 3, rng())
    x_c, ext = rng(1).uniform(-1, 1, (3, 4)), rng(2).uniform(size=(3, 3))
    w = rng(3).uniform(-1, 1, (3, 2))
    assert nx.grad_check(lambda: nx.tsum(layer(x_c, ext) * w), layer.parameters()) < 1e-4


def test_fusion_dimension_error():
    with pytest.raises(DimensionError):
        FusionLayer(4, 3, rng())(np.zeros(5), np.zeros(3))


def test_trainable_toggle():
    cnn = LocalCnn(3, 1, 2, 2, rng())
    cnn.set_trainable(False)
    assert not any(p.requires_grad for p in cnn.parameters())
    cnn.set_trainable(True)
    assert all(p.requires_grad for p in cnn.parameters())

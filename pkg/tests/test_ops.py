"""Forward semantics of the op layer, checked against independent references."""

import warnings

import numpy as np
import pytest
import scipy.special

from splitformer import ops
from splitformer.ops import BatchNormState
from splitformer.seeding import counter_rng
from splitformer.tensor import Tensor


def test_add_bias_broadcasts_last_axis():
    a = Tensor(np.zeros((2, 4, 3)))
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    out = ops.add(a, b)
    assert out.shape == (2, 4, 3)
    np.testing.assert_array_equal(out.data[1, 2], [1.0, 2.0, 3.0])


def test_add_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_matmul_matches_numpy():
    rng = counter_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-13)
    a3, b3 = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 5, 2))
    np.testing.assert_allclose(ops.matmul(Tensor(a3), Tensor(b3)).data, a3 @ b3, rtol=1e-13)


def test_matmul_rejects_rank_mix():
    with pytest.raises(ValueError):
        ops.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((4, 5))))


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 101)
    want = x * 0.5 * (1 + scipy.special.erf(x / np.sqrt(2)))
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, want, atol=1e-14)


def test_softmax_rows_matches_scipy():
    rng = counter_rng(5)
    x = rng.normal(size=(6, 9))
    np.testing.assert_allclose(
        ops.softmax_rows(Tensor(x)).data, scipy.special.softmax(x, axis=-1), rtol=1e-13
    )


def test_softmax_rows_masked_entries_are_exact_zeros():
    rng = counter_rng(6)
    x = rng.normal(size=(4, 7))
    mask = rng.random((4, 7)) > 0.4
    mask[:, 0] = True  # keep every row alive
    y = ops.softmax_rows(Tensor(x), mask=mask).data
    assert (y[~mask] == 0.0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=1e-12)
    # masked softmax == softmax over the kept entries alone
    for i in range(4):
        keep = mask[i]
        np.testing.assert_allclose(y[i, keep], scipy.special.softmax(x[i, keep]), rtol=1e-12)


def test_softmax_rows_all_masked_row_warns_and_zeroes():
    x = Tensor(np.ones((2, 3)))
    mask = np.array([[True, True, True], [False, False, False]])
    with pytest.warns(UserWarning, match="fully masked"):
        y = ops.softmax_rows(x, mask=mask).data
    np.testing.assert_array_equal(y[1], 0.0)
    np.testing.assert_allclose(y[0].sum(), 1.0)


def test_softmax_rows_silent_flag():
    x = Tensor(np.ones((1, 3)))
    mask = np.zeros((1, 3), dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        y = ops.softmax_rows(x, mask=mask, silent=True).data
    np.testing.assert_array_equal(y, 0.0)


def test_softmax_rows_survives_huge_scores():
    y = ops.softmax_rows(Tensor(np.array([[1e4, 1e4 - 1.0]]))).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y.sum(), 1.0)


def test_layer_norm_reference():
    rng = counter_rng(8)
    x = rng.normal(size=(5, 7)) * 3 + 1
    g = rng.normal(size=7)
    b = rng.normal(size=7)
    out = ops.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    want = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(out, want, rtol=1e-12)


def test_batch_norm_train_normalizes_batch():
    rng = counter_rng(9)
    x = rng.normal(size=(32, 5)) * 2 + 7
    state = BatchNormState.create(5)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5)), state, train=True).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-3)


def test_batch_norm_running_stats_converge():
    rng = counter_rng(10)
    state = BatchNormState.create(3)
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    for _ in range(300):
        x = rng.normal(size=(64, 3)) * 4.0 + 2.0
        ops.batch_norm(Tensor(x), g, b, state, train=True)
    np.testing.assert_allclose(state.running_mean, 2.0, atol=0.5)
    np.testing.assert_allclose(state.running_var, 16.0, rtol=0.2)
    # eval mode must use the stored stats, not the batch
    x = np.full((2, 3), 2.0)
    out = ops.batch_norm(Tensor(x), g, b, state, train=False).data
    np.testing.assert_allclose(out, 0.0, atol=0.2)


def test_batch_norm_train_needs_two_rows():
    state = BatchNormState.create(3)
    with pytest.raises(ValueError, match="at least 2"):
        ops.batch_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, train=True)


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((4, 4)))
    out = ops.dropout(x, 0.5, None, train=False)
    assert out is x


def test_dropout_train_scales_survivors():
    rng = counter_rng(12)
    x = Tensor(np.ones((200, 50)))
    out = ops.dropout(x, 0.2, rng, train=True).data
    vals = np.unique(out)
    np.testing.assert_allclose(sorted(vals), [0.0, 1.0 / 0.8], rtol=1e-12)
    assert abs((out == 0).mean() - 0.2) < 0.02
    np.testing.assert_allclose(out.mean(), 1.0, atol=0.02)


def test_window_rows_enumeration():
    # 7 rows, stride 3, width 4 -> windows at 0,3,6 with the last two padded
    x = np.arange(14, dtype=np.float64).reshape(7, 2)
    win, valid = ops.window_rows(Tensor(x), stride=3, width=4)
    assert win.shape == (3, 4, 2)
    np.testing.assert_array_equal(win.data[0], x[0:4])
    np.testing.assert_array_equal(win.data[1], x[3:7])
    np.testing.assert_array_equal(win.data[2, 0], x[6])
    np.testing.assert_array_equal(win.data[2, 1:], 0.0)
    np.testing.assert_array_equal(valid, [[1, 1, 1, 1], [1, 1, 1, 1], [1, 0, 0, 0]])


def test_window_rows_rejects_width_below_stride():
    with pytest.raises(ValueError, match="width >= stride"):
        ops.window_rows(Tensor(np.zeros((8, 2))), stride=4, width=2)


def test_embed_rows_scatters_and_zero_fills():
    vals = Tensor(np.array([[1.0, 1.0], [2.0, 2.0]]))
    out = ops.embed_rows(vals, np.array([3, 1]), total=5).data
    want = np.zeros((5, 2))
    want[3] = 1.0
    want[1] = 2.0
    np.testing.assert_array_equal(out, want)


def test_embed_rows_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        ops.embed_rows(Tensor(np.zeros((2, 3))), np.array([1, 1]), total=4)


def test_cross_entropy_matches_manual():
    probs = Tensor(np.array([[0.7, 0.3], [0.2, 0.8]]))
    labels = np.array([0, 1])
    want = -(np.log(0.7) + np.log(0.8)) / 2
    np.testing.assert_allclose(ops.cross_entropy(probs, labels).item(), want, rtol=1e-12)


def test_cross_entropy_clamps_zero_prob():
    probs = Tensor(np.array([[0.0, 1.0]]))
    labels = np.array([0])
    out = ops.cross_entropy(probs, labels).item()
    np.testing.assert_allclose(out, -np.log(1e-12))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="class range"):
        ops.cross_entropy(Tensor(np.ones((2, 2)) / 2), np.array([0, 2]))


def test_clamp_limits():
    x = Tensor(np.array([-20.0, -5.0, 0.0, 5.0, 20.0]))
    np.testing.assert_array_equal(ops.clamp(x, -10.0, 10.0).data, [-10, -5, 0, 5, 10])

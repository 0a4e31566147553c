import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oct1d import ops
from oct1d.tensor import ContractError, DegenerateLengthError, NonFiniteError, ShapeError, Tape, Tensor, backward

from oracles import direct_conv1d, direct_pool, direct_upsample, lstm_cell


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# conv1d

def test_conv_zero_input_gives_zero_output():
    rng = np.random.default_rng(0)
    y = ops.conv1d(T(np.zeros((1, 8, 1))), T(rng.standard_normal((3, 1, 4))), T(np.zeros(4)))
    assert y.shape == (1, 8, 4)
    assert np.all(y.data == 0)


def test_conv_scalar_affine():
    y = ops.conv1d(T([[[1.0], [0.0], [-1.0]]]), T([[[2.0]]]), T([3.0]))
    np.testing.assert_array_equal(y.data[0, :, 0], [5.0, 3.0, 1.0])


def test_conv_matches_direct_oracle_fixed_shape():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 16, 3)), rng.standard_normal((5, 3, 4)), rng.standard_normal(4)
    np.testing.assert_allclose(ops.conv1d(T(x), T(w), T(b)).data, direct_conv1d(x, w, b), atol=1e-12, rtol=0)


def test_conv_kernel_longer_than_input():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((1, 3, 2)), rng.standard_normal((9, 2, 2))
    y = ops.conv1d(T(x), T(w))
    assert y.shape == (1, 3, 2)
    np.testing.assert_allclose(y.data, direct_conv1d(x, w), atol=1e-12)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.conv1d(T(np.zeros((1, 4, 2))), T(np.zeros((3, 3, 1))))


@settings(max_examples=60, deadline=None)
@given(K=st.integers(1, 9), length=st.integers(1, 32))
def test_same_padding_preserves_length(K, length):
    y = ops.conv1d(T(np.ones((1, length, 1))), T(np.ones((K, 1, 2))))
    assert y.shape == (1, length, 2)
    left, right = ops.same_padding(K)
    assert left == (K - 1) // 2 and left + right == K - 1


# pooling and upsampling

def test_avg_pool_examples():
    np.testing.assert_array_equal(ops.avg_pool1d(T([[[1], [3], [5], [7]]])).data.ravel(), [2, 6])
    np.testing.assert_array_equal(ops.avg_pool1d(T([[[1], [3], [5], [7], [9]]])).data.ravel(), [2, 6])


def test_avg_pool_index_oracle():
    x = np.random.default_rng(3).standard_normal((2, 50, 8))
    np.testing.assert_array_equal(ops.avg_pool1d(T(x)).data, direct_pool(x))


def test_avg_pool_short_input_raises():
    with pytest.raises(DegenerateLengthError):
        ops.avg_pool1d(T(np.zeros((1, 1, 1))))


def test_upsample_examples():
    x = T([[[2.0], [6.0]]])
    np.testing.assert_array_equal(ops.upsample1d_nearest(x, 4).data.ravel(), [2, 2, 6, 6])
    np.testing.assert_array_equal(ops.upsample1d_nearest(x, 5).data.ravel(), [2, 2, 6, 6, 6])
    x3 = np.random.default_rng(4).standard_normal((2, 7, 3))
    np.testing.assert_array_equal(ops.upsample1d_nearest(T(x3), 15).data, direct_upsample(x3, 15))


def test_upsample_bad_target_raises():
    with pytest.raises(ShapeError):
        ops.upsample1d_nearest(T(np.zeros((1, 2, 1))), 6)


@settings(max_examples=40, deadline=None)
@given(length=st.integers(2, 64), value=st.floats(-1e3, 1e3, allow_nan=False))
def test_pool_then_upsample_is_identity_on_constants(length, value):
    x = T(np.full((1, length, 2), value))
    y = ops.upsample1d_nearest(ops.avg_pool1d(x), length)
    np.testing.assert_array_equal(y.data, x.data)


# batch norm

def test_bn_identity_on_normalized_input():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 50, 3))
    x = (x - x.mean(axis=(0, 1))) / x.std(axis=(0, 1))
    y = ops.batch_norm1d(T(x), T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.ones(3), True)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-3), rtol=1e-12)
    np.testing.assert_allclose(y.data, x, atol=5e-3 * np.abs(x).max())


def test_bn_zero_gamma_outputs_beta():
    x = np.random.default_rng(6).standard_normal((3, 9, 2))
    for training in (True, False):
        y = ops.batch_norm1d(T(x), T(np.zeros(2)), T([0.5, -2.0]), np.zeros(2), np.ones(2), training)
        np.testing.assert_array_equal(y.data, np.broadcast_to([0.5, -2.0], x.shape))


def test_bn_train_output_statistics():
    x = np.random.default_rng(7).standard_normal((8, 40, 4)) * 3 + 2
    y = ops.batch_norm1d(T(x), T(np.ones(4)), T(np.zeros(4)), np.zeros(4), np.ones(4), True, eps=0.0).data
    assert np.abs(y.mean(axis=(0, 1))).max() < 1e-9
    assert np.abs(y.var(axis=(0, 1)) - 1).max() < 1e-6


def test_bn_running_stats_update_and_inference():
    x = np.random.default_rng(8).standard_normal((2, 10, 1)) + 4
    rm, rv = np.zeros(1), np.ones(1)
    ops.batch_norm1d(T(x), T(np.ones(1)), T(np.zeros(1)), rm, rv, True)
    np.testing.assert_allclose(rm, 0.01 * x.mean())
    np.testing.assert_allclose(rv, 0.99 + 0.01 * x.var())
    y = ops.batch_norm1d(T(x), T(np.ones(1)), T(np.zeros(1)), rm, rv, False)
    np.testing.assert_allclose(y.data, (x - rm) / np.sqrt(rv + 1e-3))


# recurrent and attention

def test_lstm_zero_weights_give_zero_states():
    x = np.random.default_rng(9).standard_normal((2, 5, 3))
    y = ops.lstm(T(x), T(np.zeros((3, 8))), T(np.zeros((2, 8))), T(np.zeros(8)))
    assert np.all(y.data == 0)


def test_lstm_single_step_matches_cell():
    rng = np.random.default_rng(10)
    x, w, u, b = rng.standard_normal((4, 1, 3)), rng.standard_normal((3, 8)), rng.standard_normal((2, 8)), rng.standard_normal(8)
    h, _ = lstm_cell(x[:, 0], np.zeros((4, 2)), np.zeros((4, 2)), w, u, b)
    np.testing.assert_allclose(ops.lstm(T(x), T(w), T(u), T(b)).data[:, 0], h, atol=1e-14)


def test_lstm_sequence_matches_cell_recurrence():
    rng = np.random.default_rng(11)
    x, w, u, b = rng.standard_normal((2, 6, 3)), rng.standard_normal((3, 12)), rng.standard_normal((3, 12)), rng.standard_normal(12)
    h = c = np.zeros((2, 3))
    ref = []
    for t in range(6):
        h, c = lstm_cell(x[:, t], h, c, w, u, b)
        ref.append(h)
    np.testing.assert_allclose(ops.lstm(T(x), T(w), T(u), T(b)).data, np.stack(ref, axis=1), atol=1e-13)


def test_attention_single_step_is_identity():
    rng = np.random.default_rng(12)
    s = rng.standard_normal((3, 1, 4))
    w, b, v = rng.standard_normal((4, 2)), rng.standard_normal(2), rng.standard_normal(2)
    np.testing.assert_allclose(ops.attention_weights(s, w, b, v), 1.0)
    np.testing.assert_allclose(ops.attention_context(T(s), T(w), T(b), T(v)).data, s[:, 0], atol=1e-15)


def test_attention_equal_states():
    rng = np.random.default_rng(13)
    s = np.repeat(rng.standard_normal((2, 1, 3)), 7, axis=1)
    y = ops.attention_context(T(s), T(rng.standard_normal((3, 5))), T(rng.standard_normal(5)), T(rng.standard_normal(5)))
    np.testing.assert_allclose(y.data, s[:, 0], atol=1e-14)


def test_attention_and_softmax_rows_sum_to_one():
    rng = np.random.default_rng(14)
    a = ops.attention_weights(rng.standard_normal((5, 9, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4),
                              rng.standard_normal(4))
    assert np.abs(a.sum(axis=1) - 1).max() < 1e-12
    p = ops.softmax(rng.standard_normal((6, 5)) * 10)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12


# loss

def test_cross_entropy_uniform_logits():
    loss = ops.softmax_cross_entropy(T(np.zeros((3, 4))), [0, 1, 3])
    assert abs(float(loss.data) - np.log(4)) < 1e-12


def test_cross_entropy_margin_limit():
    losses = [float(ops.softmax_cross_entropy(T([[m, 0.0, 0.0]]), [0]).data) for m in (0, 2, 5, 10, 30)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-12


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(15)
    z = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    leaf = T(z, grad=True)
    with Tape() as tape:
        loss = ops.softmax_cross_entropy(leaf, labels)
    tape.backward(loss)
    expected = (ops.softmax(z) - np.eye(3)[labels]) / 5
    np.testing.assert_allclose(leaf.grad, expected, rtol=1e-12)
    h = 1e-5
    numeric = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        numeric[idx] = (float(ops.softmax_cross_entropy(T(zp), labels).data)
                        - float(ops.softmax_cross_entropy(T(zm), labels).data)) / (2 * h)
    assert np.max(np.abs(numeric - expected) / np.abs(expected)) < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ops.LabelRangeError):
        ops.softmax_cross_entropy(T(np.zeros((2, 3))), [0, 3])


# small ops

def test_dimension_shuffle_involution():
    x = np.random.default_rng(16).standard_normal((3, 11, 1))
    y = ops.dimension_shuffle(T(x))
    assert y.shape == (3, 1, 11)
    np.testing.assert_array_equal(ops.dimension_shuffle(y).data, x)


def test_dropout_inference_is_noop_and_train_is_inverted():
    x = T(np.ones((200, 50)))
    assert ops.dropout(x, 0.8, False, None) is x
    y = ops.dropout(x, 0.8, True, np.random.default_rng(0)).data
    vals = np.unique(y)
    assert len(vals) == 2 and vals[0] == 0.0 and np.isclose(vals[1], 1 / (1 - 0.8), rtol=1e-15)
    assert abs(y.mean() - 1.0) < 0.05


def test_global_avg_pool_and_concat():
    x = np.arange(12.0).reshape(1, 4, 3)
    np.testing.assert_array_equal(ops.global_avg_pool(T(x)).data, [[4.5, 5.5, 6.5]])
    c = ops.concat([T(np.ones((2, 3))), T(np.zeros((2, 2)))], axis=1)
    assert c.shape == (2, 5)


# tape semantics

def test_backward_of_sum_is_ones():
    x = T(np.random.default_rng(17).standard_normal((3, 4)), grad=True)
    with Tape() as tape:
        loss = ops.tensor_sum(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x], np.ones((3, 4)))


def test_backward_of_half_squared_norm_is_x():
    data = np.random.default_rng(18).standard_normal(7)
    x = T(data, grad=True)
    with Tape() as tape:
        loss = ops.mul(T(0.5), ops.tensor_sum(ops.mul(x, x)))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, data, rtol=1e-15)


def test_backward_requires_scalar():
    x = T(np.ones(3), grad=True)
    with Tape() as tape:
        y = ops.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_gradient_accumulates_over_shared_use():
    x = T(np.array([1.0, 2.0]), grad=True)
    with Tape() as tape:
        loss = ops.tensor_sum(ops.add(x, ops.add(x, x)))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_recording_outside_tape():
    x = T(np.ones(2), grad=True)
    y = ops.mul(x, x)
    assert y._node is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ops.mul(T([np.inf]), T([0.0]))

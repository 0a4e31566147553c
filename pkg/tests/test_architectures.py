import numpy as np
import pytest

from oct1d import ops
from oct1d.architectures import (
    ARCHITECTURES,
    ConfigError,
    build_fcn,
    build_lstm_fcn,
    build_model,
    build_octfcn,
    build_octresnet,
    build_resnet,
    copy_into_degenerate,
)
from oct1d.octconv import OctPair
from oct1d.tensor import Tape, Tensor


def batch(B, Q, seed=0):
    return np.random.default_rng(seed).standard_normal((B, Q, 1))


@pytest.mark.parametrize("name", ARCHITECTURES)
def test_output_is_normalized_distribution(name):
    model = build_model(name, 3, 64, seed=1)
    p = model.predict_proba(batch(4, 64))
    assert p.shape == (4, 3)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9


def test_resnet_five_classes():
    assert build_resnet(5, 128).forward(batch(2, 128)).shape == (2, 5)


def test_fcn_block_parameter_counts():
    model = build_fcn(3, 64)
    counts = [block.conv.param_count() for block in model.trunk.blocks]
    assert counts == [1152, 164096, 98432]


def test_fcn_intermediate_shapes():
    taps = {}
    build_fcn(3, 64).features(batch(2, 64), taps=taps)
    assert taps["block2"].shape == (2, 64, 256)
    assert taps["gap"].shape == (2, 128)


def test_octfcn_first_block_split():
    taps = {}
    build_octfcn(3).features(batch(2, 64), taps=taps)
    b1 = taps["block1"]
    assert isinstance(b1, OctPair)
    assert b1.high.shape == (2, 64, 64) and b1.low.shape == (2, 32, 64)
    assert taps["block3"].shape == (2, 64, 128)


def test_lstm_concat_width():
    for units in (4, 8, 13):
        model = build_lstm_fcn(3, 32, lstm_units=units, attention=True)
        assert model.head_width == 128 + units
        assert model.head.w.shape == (128 + units, 3)


@pytest.mark.parametrize("name", ["lstmfcn", "alstm-octfcn"])
def test_inference_is_deterministic(name):
    model = build_model(name, 3, 32, seed=2)
    x = batch(3, 32)
    np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)


def test_training_dropout_needs_rng_and_is_seeded():
    model = build_model("lstmfcn", 3, 32, seed=2)
    x = batch(3, 32)
    a = model.forward(x, training=True, rng=np.random.default_rng(9)).data
    b = build_model("lstmfcn", 3, 32, seed=2).forward(x, training=True, rng=np.random.default_rng(9)).data
    np.testing.assert_array_equal(a, b)


def test_same_seed_same_weights():
    a, b = build_model("octresnet", 4, 32, seed=5), build_model("octresnet", 4, 32, seed=5)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


@pytest.mark.parametrize("name", ARCHITECTURES)
def test_every_parameter_gets_a_gradient(name):
    model = build_model(name, 3, 16, seed=3)
    x, y = batch(6, 16, seed=1), np.array([0, 1, 2, 0, 1, 2])
    with Tape() as tape:
        loss = ops.softmax_cross_entropy(model.forward(x, training=True, rng=np.random.default_rng(0)), y)
    tape.backward(loss)
    dead = []
    for pname, p in model.named_parameters():
        if pname.startswith("attention.") or pname == "lstm.u":
            # one LSTM step after the shuffle: the previous hidden state is zero
            # and the softmax over a single score is constant
            assert p.grad is None or np.all(p.grad == 0)
            continue
        if p.grad is None or not np.any(p.grad != 0):
            dead.append(pname)
    assert not dead


def test_attention_gets_gradient_with_longer_sequences():
    from oct1d.layers import Attention, LSTM
    rng = np.random.default_rng(0)
    lstm, attn = LSTM(2, 4, rng), Attention(4, rng)
    with Tape() as tape:
        ctx = attn(lstm(Tensor(rng.standard_normal((3, 5, 2)))))
        loss = ops.tensor_sum(ops.mul(ctx, Tensor(rng.standard_normal(ctx.shape))))
    tape.backward(loss)
    assert all(np.any(p.grad != 0) for p in attn.parameters())


def test_zeroed_residual_branch_is_projected_identity():
    model = build_resnet(3, 32, seed=0)
    block = model.trunk.blocks[1]
    for stage in block.stages:
        stage.conv.w.data[...] = 0
        stage.conv.b.data[...] = 0
    x = Tensor(np.random.default_rng(1).standard_normal((2, 32, 64)))
    for training in (False, True):
        out = block(x, training)
        np.testing.assert_allclose(out.data, np.maximum(block.proj(x).data, 0), atol=1e-12)
    last = model.trunk.blocks[2]
    assert last.proj is None
    for stage in last.stages:
        stage.conv.w.data[...] = 0
        stage.conv.b.data[...] = 0
    h = Tensor(np.abs(np.random.default_rng(2).standard_normal((2, 32, 128))))
    np.testing.assert_allclose(last(h, False).data, h.data, atol=1e-12)


@pytest.mark.parametrize("base_builder,oct_builder", [(build_fcn, build_octfcn), (build_resnet, build_octresnet)])
@pytest.mark.parametrize("alpha", [0.0, 1.0])
def test_degenerate_alpha_matches_base(base_builder, oct_builder, alpha):
    base = base_builder(3, input_length=33, seed=11)
    deg = oct_builder(3, alpha=alpha, input_length=33, seed=12)
    copy_into_degenerate(base, deg)
    x = batch(3, 33, seed=4)
    for training in (False, True):
        np.testing.assert_allclose(deg.forward(x, training).data, base.forward(x, training).data, atol=1e-10, rtol=0)


def test_degenerate_lstm_variant_matches_base():
    base = build_model("alstmfcn", 3, 20, seed=1)
    deg = build_model("alstm-octfcn", 3, 20, alpha=1.0, seed=2)
    copy_into_degenerate(base, deg)
    x = batch(2, 20)
    np.testing.assert_allclose(deg.forward(x).data, base.forward(x).data, atol=1e-10, rtol=0)


@pytest.mark.parametrize("Q", [16, 17, 63, 64, 128])
def test_forward_all_lengths(Q):
    for name in ARCHITECTURES:
        taps = {}
        out = build_model(name, 2, Q, seed=0).forward(batch(2, Q), taps=taps)
        assert out.shape == (2, 2)
        for v in taps.values():
            if isinstance(v, OctPair) and v.low is not None:
                assert v.low.shape[1] == v.high.shape[1] // 2


def test_config_errors():
    with pytest.raises(ConfigError):
        build_model("vgg", 3, 16)
    with pytest.raises(ConfigError):
        build_fcn(1, 16)
    with pytest.raises(ConfigError):
        build_fcn(3, 16).forward(np.zeros((2, 16, 2)))
    with pytest.raises(ConfigError):
        build_model("lstmfcn", 3, 16).forward(batch(1, 20))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfconv import ops
from mfconv.architectures import NetworkSpec, build_dense_unet, build_network, build_oned_mf
from mfconv.dropblock import DropBlockSpec
from mfconv.nn import ForwardContext
from mfconv.tensor import DimensionError, Tensor, no_grad
from mfconv.training import init_weights


def make(family, seed=0, **kw):
    net = build_network(NetworkSpec(family=family, **kw))
    init_weights(net, "xavier_normal", np.random.default_rng(seed))
    return net


def shapes(pred):
    return [o.shape for o in pred.outputs]


@pytest.mark.parametrize("skip", ["add", "concat"])
@pytest.mark.parametrize("coupling", ["implicit", "explicit"])
def test_dense_output_shapes(skip, coupling):
    net = make("dense_unet", skip_mode=skip, coupling=coupling, base_filters=2)
    pred = net.forward(np.zeros((1, 3, 64, 64)), rng=np.random.default_rng(0))
    assert shapes(pred) == [(1, 1, 8, 8), (1, 1, 16, 16), (1, 1, 32, 32), (1, 1, 64, 64)]


def test_dense_default_widths_follow_layer_table():
    net = build_dense_unet(NetworkSpec(family="dense_unet"))
    assert [b.conv.out_channels for b in net.encoder] == [16, 16, 32, 32, 64, 64, 128, 128]
    assert [b.conv.out_channels for b in net.decoder] == [64, 64, 32, 32, 16, 16, 32, 32]
    assert net.final_hidden.out_channels == 16 and net.final_out.out_channels == 1
    assert all(h.hidden.conv.out_channels == 16 for h in net.lf_heads)


def test_dense_rejects_wrong_input():
    net = make("dense_unet", base_filters=2)
    with pytest.raises(DimensionError):
        net.forward(np.zeros((1, 2, 64, 64)), p=0.0)


@pytest.mark.parametrize("coupling", ["implicit", "explicit"])
def test_l2h_shapes_and_widths(coupling):
    net = make("decoder_l2h", coupling=coupling, base_filters=4)
    pred = net.forward(np.array([[0.5, 1.0], [0.7, 1.5]]), rng=np.random.default_rng(0))
    assert shapes(pred) == [(2, 1, 8, 8), (2, 1, 16, 16), (2, 1, 32, 32), (2, 1, 64, 64)]
    assert max(b.conv.out_channels for b in net.stages) == 128


def test_oned_shapes_and_param_count_independent_of_data():
    net = make("oned_mf", coupling="explicit")
    pred = net.forward(np.linspace(0, 1, 101).reshape(1, 1, -1), rng=np.random.default_rng(0))
    assert shapes(pred) == [(1, 1, 101), (1, 1, 101)]
    other = make("oned_mf", coupling="explicit", seed=3)
    assert net.num_parameters() == other.num_parameters()


def test_explicit_parameter_delta_is_feedback_channels():
    # dense: each LF feedback channel feeds one 3x3 conv with cout filters
    f = 4
    imp = build_dense_unet(NetworkSpec(family="dense_unet", base_filters=f))
    exp = build_dense_unet(NetworkSpec(family="dense_unet", base_filters=f, coupling="explicit"))
    next_out = [2 * f, f, 2 * f]  # first decoder conv after LF1, LF2, LF3
    assert exp.num_parameters() - imp.num_parameters() == sum(c * 9 for c in next_out)


def test_mix_one_gives_linear_head():
    net = make("oned_mf", coupling="explicit")
    net.mix.data[:] = 1.0
    z = Tensor(np.random.default_rng(0).normal(size=(5, 2, 1)))
    ctx = ForwardContext()
    np.testing.assert_array_equal(net.heads(z, ctx).data, net.linear(z).data)


def test_linear_head_superposition():
    net = make("oned_mf", coupling="explicit")
    rng = np.random.default_rng(1)
    z1, z2 = rng.normal(size=(4, 2, 1)), rng.normal(size=(4, 2, 1))
    a = 0.3
    lhs = net.linear(Tensor(a * z1 + (1 - a) * z2)).data
    rhs = a * net.linear(Tensor(z1)).data + (1 - a) * net.linear(Tensor(z2)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_zero_final_conv_outputs_bias():
    net = make("dense_unet", base_filters=2)
    net.final_out.weight.data[:] = 0.0
    net.final_out.bias.data[:] = 0.7
    pred = net.forward(np.random.default_rng(0).normal(size=(1, 3, 64, 64)), p=0.0)
    np.testing.assert_array_equal(pred.hf_pred.data, np.full((1, 1, 64, 64), 0.7))


def test_eval_forward_is_reproducible_and_p0_ignores_rng():
    net = make("decoder_l2h", base_filters=2)
    x = np.array([[0.6, 1.2]])
    a = net.forward(x, rng=np.random.default_rng(5))
    b = net.forward(x, rng=np.random.default_rng(5))
    assert all(np.array_equal(u.data, v.data) for u, v in zip(a.outputs, b.outputs))
    c = net.forward(x, rng=np.random.default_rng(1), p=0.0)
    d = net.forward(x, rng=np.random.default_rng(2), p=0.0)
    assert all(np.array_equal(u.data, v.data) for u, v in zip(c.outputs, d.outputs))


def test_dropblocks_active_in_eval_mode():
    net = make("decoder_l2h", base_filters=2, dropblock=DropBlockSpec(p=0.3))
    x = np.array([[0.6, 1.2]])
    a = net.forward(x, mode="eval", rng=np.random.default_rng(1)).hf_pred.data
    b = net.forward(x, mode="eval", rng=np.random.default_rng(2)).hf_pred.data
    assert not np.array_equal(a, b)


def test_active_dropblock_without_rng_is_rejected():
    net = make("decoder_l2h", base_filters=2, dropblock=DropBlockSpec(p=0.3))
    with pytest.raises(ValueError):
        net.forward(np.array([[0.6, 1.2]]))


def test_shared_upstream_parameters_affect_every_output():
    net = make("dense_unet", base_filters=2)
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 64))
    before = [o.data.copy() for o in net.forward(x, p=0.0).outputs]
    net.encoder[0].conv.weight.data[0, 0, 1, 1] += 0.5
    after = [o.data for o in net.forward(x, p=0.0).outputs]
    assert all(not np.allclose(u, v) for u, v in zip(before, after))


def test_explicit_reduces_to_implicit_when_feedback_weights_are_zero():
    f = 2
    imp = make("dense_unet", base_filters=f, skip_mode="add")
    exp = make("dense_unet", base_filters=f, skip_mode="add", coupling="explicit")
    state = imp.state_dict()
    exp_state = exp.state_dict()
    for name, arr in exp_state.items():
        src = state[name]
        if arr.shape == src.shape:
            exp_state[name] = src
        else:  # the extra input channel is the last one
            padded = np.zeros_like(arr)
            padded[:, :src.shape[1]] = src
            exp_state[name] = padded
    exp.load_state_dict(exp_state)
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 64))
    a = imp.forward(x, p=0.0).hf_pred.data
    b = exp.forward(x, p=0.0).hf_pred.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_drop_sites_validation():
    with pytest.raises(ValueError):
        NetworkSpec(family="dense_unet", drop_sites=[11])
    with pytest.raises(ValueError):
        NetworkSpec(family="decoder_l2h", block_sizes=[1, 1])
    spec = NetworkSpec(family="decoder_l2h")
    assert spec.block_sizes == [1, 1, 1, 1, 3, 3]
    assert spec.site_spec(5).block_size == 3


def test_builder_family_check():
    with pytest.raises(ValueError):
        build_oned_mf(NetworkSpec(family="dense_unet"))


@settings(max_examples=6, deadline=None)
@given(skip=st.sampled_from(["add", "concat"]), coupling=st.sampled_from(["implicit", "explicit"]),
       f=st.integers(1, 3), n=st.integers(1, 2))
def test_shape_contract_property(skip, coupling, f, n):
    dense = make("dense_unet", skip_mode=skip, coupling=coupling, base_filters=f)
    l2h = make("decoder_l2h", coupling=coupling, base_filters=f)
    with no_grad():
        a = dense.forward(np.zeros((n, 3, 64, 64)), p=0.0)
        b = l2h.forward(np.zeros((n, 2)), p=0.0)
    expected = [(n, 1, s, s) for s in (8, 16, 32, 64)]
    assert shapes(a) == expected and shapes(b) == expected


def test_checkpoint_round_trip(tmp_path):
    net = make("decoder_l2h", base_filters=2)
    net.forward(np.array([[0.5, 1.0], [0.8, 0.7]]), mode="train", p=0.0)  # move running stats
    net.save_checkpoint(tmp_path / "ck")
    loaded = type(net).load_checkpoint(tmp_path / "ck")
    for (name, a), (_, b) in zip(sorted(net.state_dict().items()), sorted(loaded.state_dict().items())):
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_toy_dense_unet_gradient():
    """Two filters per stage; spot-check parameters from every part of the graph."""
    net = make("dense_unet", base_filters=2, coupling="explicit", dropblock=DropBlockSpec(p=0.2, block_size=3))
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 64, 64))
    targets = [rng.normal(size=(2, 1, s, s)) for s in (8, 16, 32, 64)]

    def loss():
        # fresh identical masks for every evaluation; batch norm in train mode
        pred = net.forward(x, mode="train", rng=np.random.default_rng(9))
        total = None
        for out, t in zip(pred.outputs, targets):
            term = ops.mean(ops.square(ops.sub(out, t)))
            total = term if total is None else ops.add(total, term)
        return total

    params = dict(net.named_parameters())
    net.zero_grad()
    loss().backward()
    picks = ["encoder.0.conv.weight", "encoder.7.bn.gamma", "decoder.1.conv.weight",
             "lf_heads.0.out.weight", "lf_heads.2.hidden.bn.beta", "decoder.6.conv.weight", "final_out.bias"]
    for name in picks:
        p = params[name]
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            up = float(loss().data)
            flat[i] = old - 1e-5
            down = float(loss().data)
            flat[i] = old
            num = (up - down) / 2e-5
            ana = p.grad.reshape(-1)[i]
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-6), (name, i, num, ana)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdgm import autodiff as ad
from compdgm import nn
from compdgm.numerics import Rng


def test_orthogonal_scheme_products():
    spec = nn.mixing_spec(5, 150)
    store = nn.init_params(spec, Rng(0), scheme="orthogonal")
    for name, t in store.params.items():
        if name.endswith(".b"):
            assert np.all(t.data == 0)
            continue
        w = t.data  # stored as (d_in, d_out)
        small = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
        c2 = small[0, 0]
        assert np.abs(small - c2 * np.eye(small.shape[0])).max() <= 1e-9, name
    w0 = store.params["h0.w"].data
    assert w0.shape == (5, 40)


def test_biases_zero_and_bn_defaults():
    store = nn.init_params(nn.encoder_spec(10, 3), Rng(0))
    assert np.all(store.params["h0.b"].data == 0)
    assert np.all(store.params["h0.bn.gamma"].data == 1)
    assert np.all(store.params["h0.bn.beta"].data == 0)
    assert set(store.buffers) == {"h0.bn.mean", "h0.bn.var"}


def test_init_deterministic():
    a = nn.init_params(nn.decoder_spec(4, 7), Rng(3))
    b = nn.init_params(nn.decoder_spec(4, 7), Rng(3))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_init_rejects_unknown_scheme():
    with pytest.raises(ValueError):
        nn.init_params(nn.encoder_spec(3, 2), Rng(0), scheme="xavier")


def test_train_mode_batch_norm_normalizes():
    spec = nn.MlpSpec(4, (nn.Layer(6, "none", batch_norm=True),), (("out", 2, "none"),), bn_eps=1e-12)
    store = nn.init_params(spec, Rng(1))
    x = Rng(2).normal((32, 4)) * 5 + 3
    h = nn.mlp_forward(store, spec, x, "train")["_trunk"].data
    assert np.abs(h.mean(axis=0)).max() <= 1e-8
    assert np.abs(h.var(axis=0) - 1).max() <= 1e-6


def test_eval_batch_norm_hand_computation():
    spec = nn.MlpSpec(2, (nn.Layer(2, "none", batch_norm=True),), (("out", 1, "none"),), bn_eps=1e-5)
    store = nn.init_params(spec, Rng(0))
    store.params["h0.w"].data = np.eye(2)
    store.buffers["h0.bn.mean"] = np.array([1.0, -1.0])
    store.buffers["h0.bn.var"] = np.array([4.0, 0.25])
    store.params["h0.bn.gamma"].data = np.array([2.0, 1.0])
    store.params["h0.bn.beta"].data = np.array([0.5, 0.0])
    x = np.array([[3.0, 0.0]])
    h = nn.mlp_forward(store, spec, x, "eval")["_trunk"].data
    expected = [(3 - 1) / np.sqrt(4 + 1e-5) * 2 + 0.5, (0 + 1) / np.sqrt(0.25 + 1e-5)]
    np.testing.assert_allclose(h[0], expected, atol=1e-12)


def test_batch_norm_needs_two_rows():
    spec = nn.encoder_spec(3, 2, dropout=0.0)
    store = nn.init_params(spec, Rng(0))
    with pytest.raises(ValueError):
        nn.mlp_forward(store, spec, np.ones((1, 3)), "train")


def test_dropout_zero_train_equals_eval_given_statistics():
    spec = nn.MlpSpec(3, (nn.Layer(5, "relu"),), (("out", 2, "none"),))
    store = nn.init_params(spec, Rng(0))
    x = Rng(1).normal((4, 3))
    a = nn.mlp_forward(store, spec, x, "train")["out"].data
    b = nn.mlp_forward(store, spec, x, "eval")["out"].data
    np.testing.assert_array_equal(a, b)


def test_eval_dropout_is_identity_and_deterministic():
    spec = nn.encoder_spec(6, 3, dropout=0.5)
    store = nn.init_params(spec, Rng(0))
    x = Rng(1).normal((8, 6))
    a = nn.mlp_forward(store, spec, x, "eval")["mu"].data
    b = nn.mlp_forward(store, spec, x, "eval")["mu"].data
    np.testing.assert_array_equal(a, b)


def test_encoder_heads_have_latent_width():
    spec = nn.encoder_spec(150, 7)
    out = nn.mlp_forward(nn.init_params(spec, Rng(0)), spec, np.ones((3, 150)), "eval")
    assert out["mu"].shape == (3, 7) and out["logvar"].shape == (3, 7)


def test_architecture_shapes():
    arch = nn.build_architectures(5, 5, 150)
    assert arch.decoder.d_in == 10
    assert arch.decoder.heads[0][1] == 150
    assert len(arch.mixing.hidden) == 4 and all(l.width == 40 for l in arch.mixing.hidden)
    store = nn.init_params(arch.mixing, Rng(0), scheme="orthogonal")
    out = nn.mlp_forward(store, arch.mixing, Rng(1).normal((20, 10)), "eval")["out"].data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def _reference_forward(store, spec, x):
    h = x
    for i, layer in enumerate(spec.hidden):
        h = h @ store.params[f"h{i}.w"].data
        if f"h{i}.b" in store.params:
            h = h + store.params[f"h{i}.b"].data
        if layer.activation == "relu":
            h = np.maximum(h, 0)
        elif layer.activation == "leaky_relu":
            h = np.where(h > 0, h, spec.slope * h)
        elif layer.activation == "tanh":
            h = np.tanh(h)
    name = spec.heads[0][0]
    return h @ store.params[f"{name}.w"].data + store.params[f"{name}.b"].data


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.lists(st.sampled_from(["relu", "leaky_relu", "tanh"]), min_size=1, max_size=4),
       st.integers(0, 1000))
def test_plain_forward_matches_reference(d_in, acts, seed):
    spec = nn.MlpSpec(d_in, tuple(nn.Layer(5, a) for a in acts), (("out", 3, "none"),))
    store = nn.init_params(spec, Rng(seed))
    for t in store.params.values():
        t.data = t.data + Rng(seed, "bias").normal(t.data.shape)
    x = Rng(seed, "x").normal((7, d_in))
    out = nn.mlp_forward(store, spec, x, "eval")["out"].data
    assert np.abs(out - _reference_forward(store, spec, x)).max() <= 1e-12


def test_running_statistics_update():
    spec = nn.MlpSpec(2, (nn.Layer(2, "none", batch_norm=True),), (("out", 1, "none"),), bn_momentum=0.1)
    store = nn.init_params(spec, Rng(0))
    store.params["h0.w"].data = np.eye(2)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    nn.mlp_forward(store, spec, x, "train")
    np.testing.assert_allclose(store.buffers["h0.bn.mean"], 0.1 * np.array([2.0, 4.0]))
    np.testing.assert_allclose(store.buffers["h0.bn.var"], 0.9 + 0.1 * np.array([2.0, 8.0]))


def test_input_width_checked():
    spec = nn.encoder_spec(4, 2)
    with pytest.raises(ad.ShapeError):
        nn.mlp_forward(nn.init_params(spec, Rng(0)), spec, np.ones((3, 5)), "eval")

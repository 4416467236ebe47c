import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdgm import autodiff as ad
from compdgm import nn
from compdgm.numerics import Rng


def test_softplus_at_zero():
    assert ad.softplus(ad.tensor(0.0)).item() == pytest.approx(0.6931471805599453, abs=1e-15)


def test_softmax_of_equal_logits_is_uniform():
    out = ad.softmax_rows(ad.tensor([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_matmul_hand_example():
    out = ad.matmul(ad.tensor([[1.0, 2.0], [3.0, 4.0]]), ad.tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_square_gradient():
    x = ad.tensor(3.0)
    (g,) = ad.grad(x * x, [x])
    assert g == 6.0


def test_softplus_gradient_at_zero():
    x = ad.tensor(0.0)
    (g,) = ad.grad(ad.softplus(x), [x])
    assert g == pytest.approx(0.5)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_rows_positive_and_normalized(logits):
    out = ad.softmax_rows(ad.tensor([logits])).data
    assert np.all(out > 0)
    assert abs(out.sum() - 1.0) <= 1e-12


def test_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.log(ad.tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.div(ad.tensor(1.0), ad.tensor(0.0))
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


def test_loss_must_be_scalar():
    x = ad.tensor(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.grad(x * 2.0, [x])


def test_disconnected_parameter_gets_zero_gradient():
    x, y = ad.tensor(np.ones(3)), ad.tensor(np.ones((2, 2)))
    gx, gy = ad.grad(ad.sum(x * x), [x, y])
    np.testing.assert_array_equal(gy, np.zeros((2, 2)))
    np.testing.assert_array_equal(gx, 2 * np.ones(3))


def test_gradient_is_linear_in_the_loss():
    rng = np.random.default_rng(0)
    w = ad.tensor(rng.normal(size=(4, 3)))
    x = rng.normal(size=(5, 4))

    def f():
        return ad.sum(ad.softplus(ad.matmul(x, w)))

    def g():
        return ad.sum(ad.square(ad.tanh(ad.matmul(x, w))))

    (gf,), (gg,), (gs,) = ad.grad(f(), [w]), ad.grad(g(), [w]), ad.grad(f() + g(), [w])
    np.testing.assert_array_equal(gs, gf + gg)


def test_forward_is_pure():
    rng = np.random.default_rng(1)
    w = ad.tensor(rng.normal(size=(3, 3)))
    a = ad.softmax_rows(ad.matmul(rng.normal(size=(2, 3)), w)).data
    b = ad.softmax_rows(ad.matmul(a * 0 + a, w)).data
    c = ad.softmax_rows(ad.matmul(a * 0 + a, w)).data
    np.testing.assert_array_equal(b, c)


def test_fd_check_on_quadratic():
    w = ad.tensor(np.array([1.0, -2.0, 0.5]))
    rep = ad.check_gradient_fd(lambda: ad.sum(ad.square(w)) * 3.0, {"w": w}, step=1e-5, tolerance=1e-6)
    assert rep.passed


def test_fd_check_flags_kinks():
    w = ad.tensor(np.array([0.0, 1.0]))
    rep = ad.check_gradient_fd(lambda: ad.sum(ad.leaky_relu(w, 0.2)), {"w": w})
    assert rep.excluded["w"] == 1
    assert any("non-differentiable point, excluded" in n for n in rep.notes)
    assert rep.passed


def test_fd_step_validated():
    w = ad.tensor(np.ones(2))
    with pytest.raises(ValueError):
        ad.check_gradient_fd(lambda: ad.sum(w), {"w": w}, step=0.1)


@pytest.mark.parametrize(
    "op",
    [ad.exp, ad.softplus, ad.sigmoid, ad.tanh, ad.square, lambda t: ad.log(ad.exp(t) + 1.0),
     lambda t: ad.sqrt(ad.square(t) + 1.0), lambda t: ad.lgamma(ad.exp(t) + 0.5),
     lambda t: ad.leaky_relu(t, 0.2), ad.relu, lambda t: ad.softmax_rows(t),
     lambda t: ad.div(t, ad.square(t) + 2.0), lambda t: ad.mean(t, axis=0, keepdims=True) * t,
     lambda t: ad.concat([t, ad.slice_last(t, 1, 3)]), lambda t: ad.clip(t, -0.5, 0.5)],
)
def test_each_op_matches_finite_differences(op):
    rng = np.random.default_rng(2)
    t = ad.tensor(rng.normal(size=(3, 4)))
    weights = rng.normal(size=op(t).shape)
    rep = ad.check_gradient_fd(lambda: ad.sum(op(t) * weights), {"t": t})
    assert rep.passed, rep.max_rel_error


def test_batch_norm_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = ad.tensor(rng.normal(size=(6, 3)))
    gamma, beta = ad.tensor(rng.normal(size=3)), ad.tensor(rng.normal(size=3))
    weights = rng.normal(size=(6, 3))
    rep = ad.check_gradient_fd(lambda: ad.sum(ad.batch_norm_train(x, gamma, beta, 1e-5)[0] * weights),
                               {"x": x, "gamma": gamma, "beta": beta})
    assert rep.passed, rep.max_rel_error


def _random_mlp(seed: int):
    r = np.random.default_rng(seed)
    d_in = int(r.integers(2, 6))
    hidden = tuple(nn.Layer(int(r.integers(2, 7)), str(r.choice(["leaky_relu", "relu", "tanh", "softplus"])),
                            batch_norm=bool(r.integers(2))) for _ in range(int(r.integers(1, 4))))
    spec = nn.MlpSpec(d_in, hidden, (("out", int(r.integers(1, 4)), "none"),), slope=0.2)
    store = nn.init_params(spec, Rng(seed, "fd-mlp"))
    x = r.normal(size=(int(r.integers(3, 7)), d_in))
    target = r.normal(size=(x.shape[0], spec.heads[0][1]))
    return spec, store, x, target


@pytest.mark.parametrize("seed", range(100))
def test_random_mlp_gradients_match_finite_differences(seed):
    spec, store, x, target = _random_mlp(seed)

    def loss():
        out = nn.mlp_forward(store, spec, x, mode="train", rng=None, update_stats=False)["out"]
        return ad.mean(ad.square(out - target))

    rep = ad.check_gradient_fd(loss, store.params, step=1e-5, tolerance=1e-4, max_entries=20,
                               rng=np.random.default_rng(seed))
    assert rep.passed, rep.max_rel_error


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5))
def test_unbroadcast_row_bias(n, d):
    b = ad.tensor(np.zeros(d))
    x = ad.tensor(np.ones((n, d)))
    (g,) = ad.grad(ad.sum(x + b), [b])
    np.testing.assert_array_equal(g, np.full(d, float(n)))

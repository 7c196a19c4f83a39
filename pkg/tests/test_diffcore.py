import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import central_diff, mp_forward, mp_logsumexp, random_net, rel_err
from jemlab.diffcore import (
    Activation,
    Affine,
    DimensionError,
    Network,
    Tape,
    Tensor,
    UnsupportedOpError,
    forward,
    grad_input,
    grad_params,
    logsumexp,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def identity_net():
    return Network([Affine(Tensor(np.eye(2)), Tensor(np.zeros(2)))])


def test_identity_layer_forward():
    np.testing.assert_array_equal(forward(identity_net(), [1.0, 2.0]), [1.0, 2.0])


def test_zero_network_gives_zero_logits():
    net = Network.mlp([3, 5, 4], "tanh", zero=True)
    x = np.random.default_rng(0).standard_normal((7, 3))
    np.testing.assert_array_equal(forward(net, x), np.zeros((7, 4)))


def test_tanh_mlp_matches_extended_precision():
    net = Network.mlp([2, 8, 3], "tanh", rng=np.random.default_rng(0))
    x = np.array([0.5, -0.5])
    ref = [float(v) for v in mp_forward(net, x)]
    np.testing.assert_allclose(forward(net, x), ref, rtol=1e-14, atol=1e-15)


def test_batched_forward_shape_and_dimension_error():
    net = Network.mlp([3, 4, 2], rng=np.random.default_rng(1))
    assert forward(net, np.zeros((5, 3))).shape == (5, 2)
    assert forward(net, np.zeros(3)).shape == (2,)
    with pytest.raises(DimensionError):
        forward(net, np.zeros((5, 4)))
    with pytest.raises(DimensionError):
        net(np.zeros((2, 2)))


def test_forward_is_bit_reproducible():
    net = random_net(np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((6, net.input_dim))
    assert forward(net, x).tobytes() == forward(net, x).tobytes()


def test_taped_and_untaped_forward_agree():
    net = random_net(np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((4, net.input_dim))
    np.testing.assert_allclose(net(x).data, net.logits(x), rtol=1e-14, atol=1e-14)


def test_grad_of_sum_wx_is_x_per_row():
    net = Network([Affine(Tensor(np.array([[0.3, -1.2], [2.0, 0.5]])), Tensor(np.zeros(2)))])
    gw, gb = grad_params(net, np.array([1.0, 1.0]), lambda f: f.sum())
    np.testing.assert_array_equal(gw, [[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(gb, [1.0, 1.0])


def test_unused_parameter_gets_zero_gradient():
    net = Network.mlp([2, 3, 2], rng=np.random.default_rng(0))
    extra = Tensor(np.ones(4))
    with Tape() as tape:
        out = net(np.ones(2)).sum()
    grads = tape.gradient(out, net.parameters + [extra])
    np.testing.assert_array_equal(grads[-1], np.zeros(4))


def test_input_gradient_of_linear_scalar_is_weight():
    w = np.array([[0.7, -0.2, 1.5]])
    net = Network([Affine(Tensor(w), Tensor(np.array([0.1])))])
    g = grad_input(net, np.array([1.0, 2.0, 3.0]), lambda f: f.sum())
    np.testing.assert_array_equal(g, w[0])


def test_zero_net_logsumexp_has_zero_input_gradient():
    net = Network.mlp([2, 4, 3], zero=True)
    g = grad_input(net, np.array([0.3, -0.9]), lambda f: f.logsumexp(axis=-1))
    np.testing.assert_array_equal(g, np.zeros(2))


def test_input_gradient_leaves_parameters_untouched():
    net = random_net(np.random.default_rng(8))
    before = [p.data.copy() for p in net.parameters]
    grad_input(net, np.ones(net.input_dim), lambda f: f.logsumexp(axis=-1))
    for a, p in zip(before, net.parameters):
        np.testing.assert_array_equal(a, p.data)


def _scalar_losses(k):
    yield lambda f: f.logsumexp(axis=-1).sum()
    yield lambda f: f.log_softmax(axis=-1).index_select(np.zeros(f.shape[0], dtype=np.int64)).mean()
    yield lambda f: f.square().mean() + (f * 0.5).exp().sum()
    yield lambda f: (f.softplus() + 1.0).log().sum() - f.tanh().sum()


@pytest.mark.parametrize("case", range(20))
def test_gradients_match_finite_differences(case):
    rng = np.random.default_rng(100 + case)
    net = random_net(rng, activation=["tanh", "softplus"][case % 2])
    x = rng.standard_normal((3, net.input_dim))
    for loss in _scalar_losses(net.num_classes):
        gp = grad_params(net, x, loss)
        for p, g in zip(net.parameters, gp):
            def f(v, p=p):
                old = p.data
                p.data = v
                try:
                    return loss(net(x)).item()
                finally:
                    p.data = old
            assert rel_err(g, central_diff(f, p.data)) < 1e-6
        gx = grad_input(net, x, loss)
        assert rel_err(gx, central_diff(lambda v: loss(net(v)).item(), x)) < 1e-6


def test_relu_subgradient_at_zero_is_zero():
    with Tape() as tape:
        x = tape.watch(np.array([-1.0, 0.0, 2.0]))
        y = x.relu().sum()
    (g,) = tape.gradient(y, [x])
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_unsupported_operations_raise():
    t = Tensor(np.ones(3))
    with pytest.raises(UnsupportedOpError):
        np.sin(t)
    with pytest.raises(UnsupportedOpError):
        t**3
    with pytest.raises(UnsupportedOpError):
        t / t
    with pytest.raises(UnsupportedOpError):
        Activation("gelu")


def test_tape_single_use_and_scalar_target():
    with Tape() as tape:
        x = tape.watch(np.ones(2))
        v = x * 2.0
    with pytest.raises(DimensionError):
        tape.gradient(v, [x])
    with Tape() as tape:
        x = tape.watch(np.ones(2))
        s = (x * 2.0).sum()
    tape.gradient(s, [x])
    with pytest.raises(RuntimeError):
        tape.gradient(s, [x])


def test_logsumexp_examples():
    assert logsumexp(np.array([0.0, 0.0])) == pytest.approx(np.log(2.0), abs=1e-15)
    assert logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0 + np.log(2.0), rel=1e-15)
    assert logsumexp(np.array([1.0, 2.0, 3.0])) == pytest.approx(mp_logsumexp([1, 2, 3]), rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-1e3, 1e3))
def test_logsumexp_shift_identity(v, c):
    assert abs(logsumexp(v + c) - (logsumexp(v) + c)) <= 1e-12 * max(1.0, abs(c) + np.max(np.abs(v)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_logsumexp_matches_extended_precision(v):
    assert logsumexp(v) == pytest.approx(mp_logsumexp(v), rel=1e-14, abs=1e-14)


def test_descriptor_round_trip():
    net = random_net(np.random.default_rng(9))
    clone = Network.from_descriptors(net.descriptors(), [p.data.copy() for p in net.parameters])
    x = np.random.default_rng(10).standard_normal((3, net.input_dim))
    assert clone.logits(x).tobytes() == net.logits(x).tobytes()
    with pytest.raises(DimensionError):
        Network.from_descriptors(net.descriptors(), [p.data for p in net.parameters][:-1] + [np.zeros(99)])

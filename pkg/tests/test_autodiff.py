import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmresnet import autodiff as ad
from tmresnet.autodiff import Parameter, Tape, Tensor
from tmresnet.errors import EmptyBatch, InvalidLabel, NotAScalar, ShapeMismatch
from tmresnet.gradcheck import TARGETS, grad_check, make_fragment
from tmresnet.nn import BatchNorm2d, Conv2d, init_parameters


def naive_conv(x, w, stride, pad):
    """Nested-loop cross-correlation used as an oracle."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, oc, i, j] = (patch * w[oc]).sum()
    return out


# conv2d -------------------------------------------------------------------------


def test_conv_center_of_ones():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1, 1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0


def test_conv_zero_weight():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    out = ad.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), 2, 1)
    assert not out.data.any()


def test_conv_ramp_average():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    w = np.full((1, 1, 3, 3), 1 / 9)
    out = ad.conv2d(Tensor(x), Tensor(w), 1, 0).data
    np.testing.assert_allclose(out.ravel(), [5, 6, 9, 10], atol=1e-12)
    np.testing.assert_allclose(out, naive_conv(x, w, 1, 0), atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 1)])
def test_conv_matches_nested_loop(stride, pad, k):
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, k, k))
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w), stride, pad).data, naive_conv(x, w, stride, pad), atol=1e-12)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(1, 2, 4, 4\).*\(3, 3, 3, 3\)"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 3, 3, 3))), 1, 1)


# batch norm -------------------------------------------------------------------


def bn_args(c, beta=0.0):
    return Tensor(np.ones(c)), Tensor(np.full(c, beta)), np.zeros(c), np.ones(c)


def test_bn_constant_input_centres_to_zero():
    out = ad.batch_norm(Tensor(np.full((4, 2, 3, 3), 7.0)), *bn_args(2), training=True)
    assert np.all(np.isfinite(out.data)) and not out.data.any()


def test_bn_shift():
    out = ad.batch_norm(Tensor(np.full((4, 2, 3, 3), -3.0)), *bn_args(2, beta=5.0), training=True)
    np.testing.assert_allclose(out.data, 5.0)


def test_bn_two_values():
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    out = ad.batch_norm(Tensor(x), *bn_args(1), training=True).data.ravel()
    np.testing.assert_allclose(out, [-1, 1], atol=1e-4)


def test_bn_running_stats_update():
    g, b, rm, rv = bn_args(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    ad.batch_norm(Tensor(x), g, b, rm, rv, training=True)
    # mean 2, unbiased variance 2
    assert rm[0] == pytest.approx(0.9 * 0 + 0.1 * 2)
    assert rv[0] == pytest.approx(0.9 * 1 + 0.1 * 2)


def test_bn_eval_uses_running_stats():
    g, b, rm, rv = Tensor(np.ones(1)), Tensor(np.zeros(1)), np.array([2.0]), np.array([4.0])
    out = ad.batch_norm(Tensor(np.full((1, 1, 1, 1), 6.0)), g, b, rm, rv, training=False)
    assert out.data.item() == pytest.approx(4 / math.sqrt(4 + 1e-5))
    assert rm[0] == 2.0 and rv[0] == 4.0


def test_bn_empty_batch():
    with pytest.raises(EmptyBatch):
        ad.batch_norm(Tensor(np.zeros((0, 2, 3, 3))), *bn_args(2), training=True)


# elementwise, linear, loss ------------------------------------------------------


def test_relu():
    assert ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0, 0, 2]


def test_cross_entropy_uniform():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert loss.data.item() == pytest.approx(math.log(10), abs=1e-12)
    assert loss.data.item() == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_large_logits_stay_finite():
    loss = ad.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [1])
    assert loss.data.item() == pytest.approx(1000.0)


def test_cross_entropy_invalid_label():
    with pytest.raises(InvalidLabel):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(InvalidLabel):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


def test_linear_identity():
    x = np.random.default_rng(2).standard_normal((4, 5))
    out = ad.linear(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, x)


def test_avg_pool_global():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    assert ad.avg_pool_global(Tensor(x)).data.tolist() == [[1.5, 5.5]]


# backward ---------------------------------------------------------------------


def test_backward_linear_form():
    x = np.array([1.0, -2.0, 3.0])
    w = Parameter(np.array([0.5, 0.5, 0.5]))
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(w, x))
    ad.backward(tape, loss)
    assert w.grad.tolist() == x.tolist()


def test_backward_relu_subgradient():
    w = Parameter(np.array([-1.0, 2.0]))
    with Tape() as tape:
        loss = ad.sum_all(ad.relu(w))
    ad.backward(tape, loss)
    assert w.grad.tolist() == [0, 1]


def test_backward_relu_at_zero_is_zero():
    w = Parameter(np.array([0.0]))
    with Tape() as tape:
        loss = ad.sum_all(ad.relu(w))
    ad.backward(tape, loss)
    assert w.grad.tolist() == [0.0]


def test_backward_requires_scalar():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        out = ad.mul(w, 2.0)
    with pytest.raises(NotAScalar):
        ad.backward(tape, out)


def test_backward_accumulates():
    x = np.array([2.0, 3.0])
    w = Parameter(np.ones(2))
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(w, x))
        ad.backward(tape, loss)
    assert w.grad.tolist() == [4.0, 6.0]
    w.zero_grad()
    assert not w.grad.any()


def test_no_tape_records_nothing():
    w = Parameter(np.ones(2))
    out = ad.sum_all(ad.mul(w, 3.0))
    assert Tape.active() is None
    assert out.data.item() == 6.0


def test_tape_is_topologically_ordered():
    w = Parameter(np.ones((1, 1, 3, 3)))
    with Tape() as tape:
        h = ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), w, 1, 1)
        loss = ad.sum_all(ad.relu(h))
    seen = {id(w)}
    for node in tape.nodes:
        for inp in node.inputs:
            assert not inp.requires_grad or id(inp) in seen
        seen.add(id(node.output))
    assert tape.nodes[-1].output is loss


def two_layer_net(seed):
    rng = np.random.default_rng(seed)
    w1 = Parameter(rng.standard_normal((3, 2, 3, 3)), name="w1")
    w2 = Parameter(rng.standard_normal((2, 3, 3, 3)), name="w2")
    x = rng.standard_normal((2, 2, 5, 5))
    return w1, w2, x


def test_backward_linearity():
    w1, w2, x = two_layer_net(3)

    def loss_terms():
        h = ad.conv2d(ad.relu(ad.conv2d(Tensor(x), w1, 1, 1)), w2, 2, 1)
        return ad.sum_all(ad.mul(h, h)), ad.sum_all(ad.scale(h, 3.0))

    grads = []
    for pick in (0, 1, None):
        w1.zero_grad(), w2.zero_grad()
        with Tape() as tape:
            l1, l2 = loss_terms()
            loss = {0: l1, 1: l2, None: None}[pick] or ad.add(l1, l2)
        ad.backward(tape, loss)
        grads.append((w1.grad.copy(), w2.grad.copy()))
    for k in range(2):
        np.testing.assert_allclose(grads[2][k], grads[0][k] + grads[1][k], rtol=1e-12)


def test_two_layer_net_matches_finite_differences():
    w1, w2, x = two_layer_net(4)
    labels = np.array([0, 1])

    def loss_fn():
        h = ad.relu(ad.conv2d(Tensor(x), w1, 1, 1))
        h = ad.conv2d(h, w2, 1, 1)
        return ad.softmax_cross_entropy(ad.avg_pool_global(h), labels)

    with Tape() as tape:
        loss = loss_fn()
    ad.backward(tape, loss)
    eps, worst = 1e-5, 0.0
    for w in (w1, w2):
        flat = w.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().data.item()
            flat[i] = orig - eps
            fm = loss_fn().data.item()
            flat[i] = orig
            num, a = (fp - fm) / (2 * eps), w.grad.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    assert worst < 1e-4


# grad_check -------------------------------------------------------------------


@pytest.mark.parametrize("target", TARGETS)
def test_grad_check_fragments(target):
    mod, x, tol = make_fragment(target, seed=0)
    assert tol == (1e-3 if target == "bn" else 1e-4)
    report = grad_check(mod, x, tol, samples=32)
    assert report.passed, (report.worst_path, report.max_rel_error)


def test_grad_check_zero_input_conv():
    conv = Conv2d(2, 3, 3, 1).to(np.float64)
    init_parameters(conv, 0)
    x = np.zeros((2, 2, 4, 4))
    with Tape() as tape:
        loss = ad.sum_all(conv(Parameter(x)))
    ad.backward(tape, loss)
    assert not conv.weight.grad.any()
    assert grad_check(conv, x, 1e-4).passed


def test_grad_check_leaves_buffers_untouched():
    bn = BatchNorm2d(3).to(np.float64)
    before = [b.copy() for b in (bn.running_mean, bn.running_var)]
    grad_check(bn, np.random.default_rng(0).standard_normal((4, 3, 2, 2)), 1e-3, samples=4)
    assert np.array_equal(bn.running_mean, before[0]) and np.array_equal(bn.running_var, before[1])


def test_grad_check_reports_failure_at_zero_tolerance():
    mod, x, _ = make_fragment("conv")
    report = grad_check(mod, x, 0.0, samples=4)
    assert not report.passed and report.worst_path


# properties -------------------------------------------------------------------

dims = st.integers(1, 8)


@settings(max_examples=40, deadline=None)
@given(n=dims, c=dims, h=dims, w=dims, o=dims, k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]))
def test_shape_algebra(n, c, h, w, o, k, stride):
    pad = k // 2
    x = Tensor(np.zeros((n, c, h, w)))
    out = ad.conv2d(x, Tensor(np.zeros((o, c, k, k))), stride, pad)
    assert out.shape == (n, o, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    assert out.data.size == math.prod(out.shape)
    g, b, rm, rv = bn_args(c)
    assert ad.batch_norm(x, g, b, rm, rv, training=True).shape == x.shape
    assert ad.relu(x).shape == x.shape
    pooled = ad.avg_pool_global(x)
    assert pooled.shape == (n, c)
    assert ad.linear(pooled, Tensor(np.zeros((o, c))), Tensor(np.zeros(o))).shape == (n, o)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_parameter_grad_shape_matches_value(seed):
    w1, w2, x = two_layer_net(seed)
    with Tape() as tape:
        loss = ad.sum_all(ad.conv2d(ad.relu(ad.conv2d(Tensor(x), w1, 2, 1)), w2, 1, 1))
    ad.backward(tape, loss)
    assert w1.grad.shape == w1.shape and w2.grad.shape == w2.shape


def test_forward_backward_deterministic():
    results = []
    for _ in range(2):
        w1, w2, x = two_layer_net(9)
        with Tape() as tape:
            out = ad.conv2d(ad.relu(ad.conv2d(Tensor(x), w1, 1, 1)), w2, 1, 1)
            loss = ad.sum_all(ad.mul(out, out))
        ad.backward(tape, loss)
        results.append((out.data.copy(), w1.grad.copy(), w2.grad.copy()))
    for a, b in zip(*results):
        assert np.array_equal(a, b)

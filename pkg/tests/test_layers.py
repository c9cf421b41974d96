import numpy as np
import pytest

from spikepool.autodiff import GradTape, Tensor, backward
from spikepool.layers import (
    BatchNorm, ConvBN, Linear, Module, avgpool2d, batchnorm, conv2d, linear, maxpool2d, maxpool3d,
)

from oracles import maxpool2d_loops, numeric_grad, rel_err


def grads(fn, *tensors):
    with GradTape():
        backward(fn())
    return [t.grad for t in tensors]


def check_fd(fn, plain, *tensors, tol=1e-4):
    analytic = grads(fn, *tensors)
    for t, g in zip(tensors, analytic):
        assert rel_err(g, numeric_grad(plain, t.data)) < tol


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_1x1():
    x = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
    assert np.array_equal(conv2d(x, Tensor(np.ones((1, 1, 1, 1)))).data, x.data)


def test_conv_identity_3x3_kernel_is_exact(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    assert np.array_equal(conv2d(x, Tensor(w), padding=1).data, x.data)


def test_conv_counting_example():
    out = conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 4] == 4 and out[0, 2] == 6


def test_conv_output_geometry():
    out = conv2d(Tensor(np.zeros((1, 2, 7, 9))), Tensor(np.zeros((4, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 4, 4, 5)


def test_conv_errors():
    with pytest.raises(ValueError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="exceeds"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(2, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    got = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(got.shape)
    for b in range(2):
        for o in range(3):
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    ref[b, o, i, j] = np.sum(xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (1, 1, 0), (3, 2, 0)])
def test_conv_grads_fd(k, stride, pad, rng):
    for _ in range(50):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, k, k)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        up = rng.normal(size=conv2d(x, w, b, stride, pad).shape)
        check_fd(lambda: (conv2d(x, w, b, stride, pad) * up).sum(),
                 lambda: (conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data), stride, pad).data * up).sum(),
                 x, w, b)


# -- batchnorm ----------------------------------------------------------------

def _bn_params(C):
    return Tensor(np.ones(C), requires_grad=True), Tensor(np.zeros(C), requires_grad=True)


def test_bn_training_normalizes(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(8, 4, 3, 3)))
    g, b = _bn_params(4)
    out = batchnorm(x, g, b, np.zeros(4), np.ones(4), training=True, eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-6)


def test_bn_constant_input_gives_zero():
    g, b = _bn_params(2)
    out = batchnorm(Tensor(np.full((3, 2, 2), 5.0)), g, b, np.zeros(2), np.ones(2), training=True).data
    assert np.all(out == 0.0)


def test_bn_inference_affine_example():
    out = batchnorm(Tensor([[3.0]]), Tensor([2.0]), Tensor([1.0]), np.zeros(1), np.ones(1), training=False)
    assert out.item() == pytest.approx(2 * 3 / np.sqrt(1 + 1e-5) + 1, rel=1e-15)


def test_bn_inference_linearity(rng):
    C = 3
    gamma, beta = Tensor(rng.normal(size=C)), Tensor(rng.normal(size=C))
    rm, rv = rng.normal(size=C), rng.uniform(0.5, 2, size=C)
    x1, x2 = rng.normal(size=(4, C, 2)), rng.normal(size=(4, C, 2))
    bn = lambda x: batchnorm(Tensor(x), gamma, beta, rm, rv, training=False).data
    slope = (gamma.data / np.sqrt(rv + 1e-5))[None, :, None]
    np.testing.assert_allclose(bn(x1) - bn(x2), slope * (x1 - x2), rtol=1e-12, atol=1e-12)


def test_bn_running_stats_update(rng):
    x = rng.normal(2.0, 3.0, size=(10, 2, 5))
    rm, rv = np.zeros(2), np.ones(2)
    g, b = _bn_params(2)
    batchnorm(Tensor(x), g, b, rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))


def test_bn_channel_mismatch():
    g, b = _bn_params(3)
    with pytest.raises(ValueError, match="channel"):
        batchnorm(Tensor(np.zeros((2, 4))), g, b, np.zeros(3), np.ones(3), training=True)


@pytest.mark.parametrize("training", [True, False])
def test_bn_grads_fd(training, rng):
    for _ in range(50):
        x = Tensor(rng.normal(size=(4, 3, 2)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 2, size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        up = rng.normal(size=x.shape)
        # running stats are copied per call so that the probe does not drift them
        fwd = lambda xx, gg, bb: batchnorm(xx, gg, bb, rm.copy(), rv.copy(), training)
        check_fd(lambda: (fwd(x, g, b) * up).sum(),
                 lambda: (fwd(Tensor(x.data), Tensor(g.data), Tensor(b.data)).data * up).sum(),
                 x, g, b)


# -- pooling ------------------------------------------------------------------

def test_maxpool_example_and_error():
    assert maxpool2d(Tensor([[1.0, 2.0], [3.0, 4.0]]), 2, 2).data.tolist() == [[4.0]]
    with pytest.raises(ValueError, match="larger than input"):
        maxpool2d(Tensor(np.zeros((2, 2))), 3, 1)


def test_maxpool_ties_route_to_first_element():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    (g,) = grads(lambda: maxpool2d(x, 2, 2).sum(), x)
    assert np.all(maxpool2d(x, 2, 2).data == 1.0)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    assert np.array_equal(g, expected)


def test_maxpool_overlapping_ties_pick_first_in_each_window():
    x = Tensor(np.ones((1, 3, 3)), requires_grad=True)
    (g,) = grads(lambda: maxpool2d(x, 3, 1, padding=1).sum(), x)
    # window (i, j) has its first in-bounds cell at (max(i-1,0), max(j-1,0))
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            expected[max(i - 1, 0), max(j - 1, 0)] += 1
    assert np.array_equal(g[0], expected)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (2, 2, 0), (3, 2, 1)])
def test_maxpool_matches_loops(k, stride, pad, rng):
    x = rng.normal(size=(7, 6))
    np.testing.assert_array_equal(maxpool2d(Tensor(x), k, stride, pad).data,
                                  maxpool2d_loops(x, k, stride, pad))


def test_maxpool_binary_dilation(rng):
    for _ in range(100):
        x = (rng.random((16, 16)) < 0.05).astype(float)
        out = maxpool2d(Tensor(x), 3, 1, 1).data
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert out.mean() >= x.mean()
        np.testing.assert_array_equal(out, maxpool2d_loops(x, 3, 1, 1))


def test_maxpool_leading_axes_untouched(rng):
    x = rng.normal(size=(2, 3, 4, 6, 6))
    out = maxpool2d(Tensor(x), 3, 1, 1).data
    assert out.shape == x.shape
    np.testing.assert_array_equal(out[1, 2, 3], maxpool2d_loops(x[1, 2, 3], 3, 1, 1))


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (2, 2, 0)])
def test_maxpool_grads_fd(k, stride, pad, rng):
    for _ in range(50):
        x = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
        up = rng.normal(size=maxpool2d(x, k, stride, pad).shape)
        check_fd(lambda: (maxpool2d(x, k, stride, pad) * up).sum(),
                 lambda: (maxpool2d(Tensor(x.data), k, stride, pad).data * up).sum(), x)


def test_avgpool_example():
    assert avgpool2d(Tensor([[1.0, 2.0], [3.0, 4.0]]), 2).data.tolist() == [[2.5]]


def test_avgpool_grad_is_uniform_share():
    x = Tensor(np.arange(16.0).reshape(4, 4), requires_grad=True)
    (g,) = grads(lambda: avgpool2d(x, 2, 2).sum(), x)
    assert np.all(g == 0.25)


def test_avgpool_counts_zero_padding():
    out = avgpool2d(Tensor(np.ones((3, 3))), 3, 1, 1).data
    assert out[1, 1] == 1.0 and out[0, 0] == pytest.approx(4 / 9)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (2, 2, 0)])
def test_avgpool_grads_fd(k, stride, pad, rng):
    for _ in range(50):
        x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        up = rng.normal(size=avgpool2d(x, k, stride, pad).shape)
        check_fd(lambda: (avgpool2d(x, k, stride, pad) * up).sum(),
                 lambda: (avgpool2d(Tensor(x.data), k, stride, pad).data * up).sum(), x)


def test_maxpool3d_full_time_window_collapses_time(rng):
    x = rng.normal(size=(3, 1, 2, 4, 4))
    out = maxpool3d(Tensor(x), kernel=(3, 1, 1), stride=(1, 1, 1), padding=0).data
    assert out.shape == (1, 1, 2, 4, 4)
    np.testing.assert_array_equal(out[0], x.max(axis=0))


def test_maxpool3d_default_is_causal_and_shape_preserving(rng):
    x = rng.normal(size=(4, 2, 3, 5, 5))
    out = maxpool3d(Tensor(x)).data
    assert out.shape == x.shape
    np.testing.assert_array_equal(out[0], maxpool2d(Tensor(x[0]), 3, 1, 1).data)
    both = np.maximum(x[1], x[2])
    np.testing.assert_array_equal(out[2], maxpool2d(Tensor(both), 3, 1, 1).data)


def test_maxpool3d_grads_fd(rng):
    for _ in range(50):
        x = Tensor(rng.normal(size=(3, 1, 2, 3, 3)), requires_grad=True)
        up = rng.normal(size=x.shape)
        check_fd(lambda: (maxpool3d(x) * up).sum(),
                 lambda: (maxpool3d(Tensor(x.data)).data * up).sum(), x)


def test_maxpool3d_rejects_wrong_rank():
    with pytest.raises(ValueError, match="T,B,C,H,W"):
        maxpool3d(Tensor(np.zeros((2, 3, 4, 4))))


# -- linear and modules -------------------------------------------------------

def test_linear_grads_fd(rng):
    for _ in range(50):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(5,)), requires_grad=True)
        up = rng.normal(size=(2, 3, 5))
        check_fd(lambda: (linear(x, w, b) * up).sum(),
                 lambda: ((x.data @ w.data.T + b.data) * up).sum(), x, w, b)


def test_module_registration_order_and_counts():
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.a = Linear(3, 4)
            self.b = ConvBN(4, 2, kernel=3)

    net = Net()
    names = [n for n, _ in net.named_parameters()]
    assert names == ["a.weight", "a.bias", "b.conv.weight", "b.bn.gamma", "b.bn.beta"]
    assert [n for n, _ in net.named_buffers()] == ["b.bn.running_mean", "b.bn.running_var"]
    assert net.num_parameters() == 3 * 4 + 4 + 4 * 2 * 9 + 2 + 2


def test_convbn_folds_leading_axes(rng):
    m = ConvBN(2, 3, kernel=3, rng=rng)
    x = rng.normal(size=(2, 4, 2, 5, 5))
    out = m(Tensor(x), training=False).data
    ref = m(Tensor(x.reshape(8, 2, 5, 5)), training=False).data.reshape(2, 4, 3, 5, 5)
    np.testing.assert_array_equal(out, ref)


def test_batchnorm_module_validation():
    with pytest.raises(ValueError):
        BatchNorm(3, eps=0.0)
    with pytest.raises(ValueError):
        BatchNorm(3, momentum=1.5)

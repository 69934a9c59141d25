import numpy as np
import pytest

from voxelgate import kernels, ops
from voxelgate.errors import (
    IndivisibleExtent,
    InvalidRate,
    NonPositiveOutputExtent,
    ShapeMismatch,
)
from voxelgate.rng import make_rng
from voxelgate.tensor import Tensor, backward

from oracles import conv3d_loop, maxpool_loop


def t64(arr):
    return Tensor(np.asarray(arr), dtype=np.float64)


# -- conv3d ---------------------------------------------------------------

def test_conv3d_scalar_product():
    x = t64(np.full((1, 1, 1, 1), 2.0))
    w = t64(np.full((1, 1, 1, 1, 1), 3.0))
    b = t64(np.zeros(1))
    out = ops.conv3d(x, w, b, stride=1, padding=0)
    assert out.data.reshape(-1)[0] == pytest.approx(6.0)


def test_conv3d_delta_kernel_is_identity():
    rng = make_rng(0, "delta")
    x = t64(rng.normal(size=(2, 5, 5, 5)))
    w = np.zeros((2, 2, 3, 3, 3))
    for c in range(2):
        w[c, c, 1, 1, 1] = 1.0
    out = ops.conv3d(x, t64(w), stride=1, padding=1)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_conv3d_matches_loop_oracle_many_configs():
    rng = make_rng(1, "oracle")
    configs = []
    for stride in (1, 2, 3):
        for pad in (0, 1, 2):
            for k in (1, 2, 3):
                configs.append((stride, pad, k))
    assert len(configs) >= 20
    for i, (stride, pad, k) in enumerate(configs):
        d = int(rng.integers(k, k + 4))
        ci = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        if (d + 2 * pad - k) // stride + 1 < 1:
            continue
        x = rng.normal(size=(ci, d, d, d))
        w = rng.normal(size=(co, ci, k, k, k))
        expected = conv3d_loop(x, w, stride, pad)
        got = ops.conv3d(t64(x), t64(w), stride=stride, padding=pad).data
        err = np.abs(got - expected).max() / max(1.0, np.abs(expected).max())
        assert err < 1e-6, f"config {i}: stride={stride} pad={pad} k={k} err={err}"


def test_conv3d_batched_rank5():
    rng = make_rng(2, "batch")
    x = rng.normal(size=(2, 2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    out = ops.conv3d(t64(x), t64(w), stride=1, padding=1)
    assert out.shape == (2, 3, 4, 4, 4)
    for n in range(2):
        single = ops.conv3d(t64(x[n]), t64(w), stride=1, padding=1)
        np.testing.assert_allclose(out.data[n], single.data, atol=1e-12)


def test_conv3d_shape_errors():
    x = t64(np.zeros((2, 4, 4, 4)))
    with pytest.raises(ShapeMismatch):
        ops.conv3d(x, t64(np.zeros((3, 5, 3, 3, 3))))
    with pytest.raises(NonPositiveOutputExtent):
        ops.conv3d(x, t64(np.zeros((3, 2, 5, 5, 5))), stride=1, padding=0)


# -- conv3d_1x1 ---------------------------------------------------------------

def test_conv1x1_zero_weights_zero_output():
    x = t64(np.random.default_rng(0).normal(size=(3, 4, 4, 4)))
    w = t64(np.zeros((1, 3, 1, 1, 1)))
    b = t64(np.zeros(1))
    out = ops.conv3d_1x1(x, w, b)
    assert out.shape == (1, 4, 4, 4)
    assert np.all(out.data == 0)


def test_conv1x1_equals_conv3d():
    rng = make_rng(3, "1x1")
    x = t64(rng.normal(size=(3, 4, 4, 4)))
    w = t64(rng.normal(size=(2, 3, 1, 1, 1)))
    b = t64(rng.normal(size=2))
    a = ops.conv3d_1x1(x, w, b).data
    bb = ops.conv3d(x, w, b, stride=1, padding=0).data
    np.testing.assert_allclose(a, bb, rtol=1e-12, atol=1e-12)


def test_conv1x1_channel_sum():
    rng = make_rng(4, "sum")
    x = rng.normal(size=(2, 3, 3, 3))
    w = t64(np.ones((1, 2, 1, 1, 1)))
    out = ops.conv3d_1x1(t64(x), w)
    np.testing.assert_allclose(out.data[0], x[0] + x[1], atol=1e-12)


# -- transposed conv -----------------------------------------------------------

def test_transposed_broadcasts_single_voxel():
    v = 3.5
    x = t64(np.full((1, 1, 1, 1), v))
    w = t64(np.ones((1, 1, 2, 2, 2)))
    out = ops.transposed_conv3d(x, w, stride=2)
    assert out.shape == (1, 2, 2, 2)
    np.testing.assert_allclose(out.data, np.full((1, 2, 2, 2), v))


def test_transposed_stride1_k1_identity():
    x = t64(np.random.default_rng(1).normal(size=(2, 3, 3, 3)))
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    out = ops.transposed_conv3d(x, t64(w), stride=1)
    np.testing.assert_allclose(out.data, x.data)


def test_transposed_adjoint_identity():
    # <conv3d(x; w), y> == <x, transposed_conv3d(y; w)> with the same
    # weight buffer read in each op's own layout
    rng = make_rng(5, "adjoint")
    for _ in range(5):
        ci, co, s, d = 3, 2, 2, 4
        x = rng.normal(size=(ci, d * s, d * s, d * s))
        w = rng.normal(size=(co, ci, s, s, s))
        y = rng.normal(size=(co, d, d, d))
        lhs = float((ops.conv3d(t64(x), t64(w), stride=s, padding=0).data * y).sum())
        back = ops.transposed_conv3d(t64(y), t64(w), stride=s).data
        rhs = float((x * back).sum())
        assert lhs == pytest.approx(rhs, rel=1e-6)


def test_transposed_weight_shape_enforced():
    x = t64(np.zeros((2, 3, 3, 3)))
    with pytest.raises(ShapeMismatch):
        ops.transposed_conv3d(x, t64(np.zeros((2, 2, 3, 3, 3))), stride=2)


# -- upsampling -------------------------------------------------------------------

def test_upsample_constant_stays_constant():
    x = t64(np.full((2, 3, 3, 3), 0.5))
    out = ops.upsample_trilinear(x, 2)
    assert out.shape == (2, 6, 6, 6)
    np.testing.assert_allclose(out.data, 0.5, atol=1e-12)


def test_upsample_factor1_identity():
    x = t64(np.random.default_rng(2).normal(size=(1, 2, 2, 2)))
    assert ops.upsample_trilinear(x, 1) is x


def test_upsample_ramp_stays_linear_in_interior():
    n, f = 6, 2
    ramp = np.arange(n, dtype=np.float64)
    x = np.broadcast_to(ramp[None, :, None, None], (1, n, n, n)).copy()
    out = ops.upsample_trilinear(t64(x), f).data
    # interior output coordinates map to sources inside [0, n-1]
    src = (np.arange(n * f) + 0.5) / f - 0.5
    interior = (src >= 0) & (src <= n - 1)
    expected = src[interior]
    got = out[0, interior, 0, 0]
    assert np.abs(got - expected).max() <= 1e-6
    # edges clamp to the endpoint values
    assert out[0, 0, 0, 0] == pytest.approx(ramp[0])
    assert out[0, -1, 0, 0] == pytest.approx(ramp[-1])


# -- pooling ------------------------------------------------------------------------

def test_maxpool_block_max():
    x = np.arange(1.0, 9.0).reshape(1, 2, 2, 2)
    out = ops.maxpool3d(t64(x), 2)
    assert out.data.reshape(-1)[0] == 8.0


def test_maxpool_tie_routes_gradient_to_first_voxel():
    x = Tensor(np.full((1, 2, 2, 2), 7.0), requires_grad=True, dtype=np.float64)
    out = ops.maxpool3d(x, 2)
    backward(out.sum())
    expected = np.zeros((1, 2, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_maxpool_matches_loop_oracle():
    rng = make_rng(6, "pool")
    x = rng.normal(size=(3, 4, 4, 4))
    out = ops.maxpool3d(t64(x), 2).data
    np.testing.assert_allclose(out, maxpool_loop(x, 2))


def test_maxpool_indivisible_extent():
    with pytest.raises(IndivisibleExtent):
        ops.maxpool3d(t64(np.zeros((1, 3, 4, 4))), 2)


# -- batchnorm ----------------------------------------------------------------------

def test_batchnorm_training_normalizes():
    rng = make_rng(7, "bn")
    x = t64(rng.normal(3.0, 2.0, size=(4, 3, 4, 4, 4)))
    gamma = t64(np.ones(3))
    beta = t64(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batchnorm(x, gamma, beta, rm, rv, training=True).data
    mean = out.mean(axis=(0, 2, 3, 4))
    var = out.var(axis=(0, 2, 3, 4))
    assert np.abs(mean).max() < 1e-6
    np.testing.assert_allclose(var, 1.0, atol=1e-3)
    assert not np.allclose(rm, 0.0)       # running stats moved


def test_batchnorm_affine_params():
    rng = make_rng(8, "bn2")
    x = t64(rng.normal(size=(4, 2, 4, 4, 4)))
    gamma = t64(np.full(2, 2.0))
    beta = t64(np.full(2, 3.0))
    out = ops.batchnorm(x, gamma, beta, np.zeros(2), np.ones(2), training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 3.0, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3, 4)), 2.0, atol=1e-3)


def test_batchnorm_inference_closed_form():
    rng = make_rng(9, "bn3")
    x = rng.normal(size=(2, 3, 2, 2, 2))
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    rm = rng.normal(size=3)
    rv = rng.uniform(0.5, 2.0, size=3)
    eps = 1e-5
    out = ops.batchnorm(t64(x), t64(gamma), t64(beta), rm.copy(), rv.copy(),
                        training=False, eps=eps).data
    expected = ((x - rm.reshape(1, 3, 1, 1, 1))
                / np.sqrt(rv.reshape(1, 3, 1, 1, 1) + eps)
                * gamma.reshape(1, 3, 1, 1, 1) + beta.reshape(1, 3, 1, 1, 1))
    np.testing.assert_allclose(out, expected, rtol=1e-10)


# -- activations -----------------------------------------------------------------------

def test_relu_values():
    out = ops.relu(t64(np.array([[-1.0], [0.0], [2.0]])[..., None, None]))
    np.testing.assert_array_equal(out.data.reshape(-1), [0.0, 0.0, 2.0])


def test_leaky_relu_values():
    out = ops.leaky_relu(t64(np.array([[-1.0], [2.0]])[..., None, None]), 0.01)
    np.testing.assert_allclose(out.data.reshape(-1), [-0.01, 2.0])


def test_leaky_relu_slope_zero_equals_relu():
    x = t64(np.random.default_rng(3).normal(size=(2, 3, 3, 3)))
    np.testing.assert_array_equal(ops.leaky_relu(x, 0.0).data, ops.relu(x).data)


def test_sigmoid_values_and_open_interval():
    x = t64(np.array([0.0, -1e3, 1e3, -20.0]).reshape(4, 1, 1, 1))
    out = ops.sigmoid(x).data.reshape(-1)
    assert out[0] == pytest.approx(0.5)
    assert 0.0 < out[1] < out[3] < 0.5 < out[2] < 1.0
    assert out[3] == pytest.approx(2.0611536e-09, rel=1e-4)


# -- softmax ---------------------------------------------------------------------------

def test_softmax_equal_logits():
    x = t64(np.zeros((4, 2, 2, 2)))
    np.testing.assert_allclose(ops.softmax_channels(x).data, 0.25)


def test_softmax_dominant_logit():
    logits = np.zeros((4, 1, 1, 1))
    logits[0] = 10.0
    out = ops.softmax_channels(t64(logits)).data
    # exact value: e^10 / (e^10 + 3) = 0.99986384...
    exact = np.exp(10.0) / (np.exp(10.0) + 3.0)
    assert out[0, 0, 0, 0] == pytest.approx(exact, rel=1e-9)
    assert out[0, 0, 0, 0] > 0.999


def test_softmax_sums_to_one_and_bounded():
    rng = make_rng(10, "softmax")
    x = t64(rng.uniform(-1e3, 1e3, size=(4, 5, 5, 5)))
    out = ops.softmax_channels(x).data
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)
    assert np.all(np.isfinite(out))
    assert np.all(out >= 0.0) and np.all(out <= 1.0)


# -- dropout ---------------------------------------------------------------------------

def test_dropout_rate_zero_identity():
    x = t64(np.ones((2, 2, 2, 2)))
    assert ops.dropout(x, 0.0, True, make_rng(0, "d")) is x


def test_dropout_inference_identity():
    x = t64(np.ones((2, 2, 2, 2)))
    assert ops.dropout(x, 0.5, False) is x


def test_dropout_statistics():
    rng = make_rng(11, "dropstats")
    x = Tensor(np.ones((100, 100, 10)), dtype=np.float64)
    out = ops.dropout(x, 0.3, True, rng).data
    kept = np.count_nonzero(out) / out.size
    assert abs(kept - 0.7) < 0.01
    assert abs(out.mean() - 1.0) < 0.02


def test_dropout_invalid_rate():
    x = t64(np.ones((1, 1, 1, 1)))
    with pytest.raises(InvalidRate):
        ops.dropout(x, 1.0, True, make_rng(0, "d"))
    with pytest.raises(InvalidRate):
        ops.dropout(x, -0.1, True, make_rng(0, "d"))


# -- backend agreement --------------------------------------------------------------------

@pytest.mark.skipif(kernels.backend_name() == "numpy",
                    reason="compiled extension not available")
def test_backends_agree():
    rng = make_rng(12, "backend")
    for stride, pad, k in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)]:
        d = 6 if k <= 3 else 8
        x = rng.normal(size=(2, 3, d, d, d))
        w = rng.normal(size=(4, 3, k, k, k))
        old = kernels.use_backend("numpy")
        try:
            y_np = kernels.conv3d_forward(x, w, stride, pad)
            gy = rng.normal(size=y_np.shape)
            gi_np = kernels.conv3d_grad_input(gy, w, stride, pad, (d, d, d))
            gw_np = kernels.conv3d_grad_weight(x, gy, stride, pad, k)
        finally:
            kernels.use_backend(old)
        y = kernels.conv3d_forward(x, w, stride, pad)
        gi = kernels.conv3d_grad_input(gy, w, stride, pad, (d, d, d))
        gw = kernels.conv3d_grad_weight(x, gy, stride, pad, k)
        np.testing.assert_allclose(y, y_np, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(gi, gi_np, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(gw, gw_np, rtol=1e-12, atol=1e-12)


def test_no_nan_from_bounded_inputs():
    rng = make_rng(13, "bounded")
    x = t64(rng.uniform(-1e3, 1e3, size=(2, 4, 4, 4)))
    w = t64(rng.uniform(-1e3, 1e3, size=(3, 2, 3, 3, 3)))
    for out in (ops.conv3d(x, w, stride=1, padding=1),
                ops.relu(x), ops.leaky_relu(x), ops.sigmoid(x),
                ops.softmax_channels(x), ops.maxpool3d(x, 2),
                ops.upsample_trilinear(x, 2)):
        assert np.all(np.isfinite(out.data))

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionforge import ops
from lesionforge.errors import ContractError, DegenerateBatchError, DimensionError, NumericError
from lesionforge.layers import BatchNorm2d, LayerSpec, batchnorm_forward, recon_loss
from lesionforge.tensor import GradientTape, Parameter, Tensor, backward


def T(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------- conv2d

def test_conv_hand_value():
    x = T([[[[1, 2], [3, 4]]]])
    k = T(np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(ops.conv2d(x, k).data, [[[[10.0]]]])


def test_conv_zero_input():
    k = T(np.random.default_rng(0).standard_normal((1, 1, 3, 3)))
    out = ops.conv2d(T(np.zeros((1, 1, 4, 4))), k)
    assert out.shape == (1, 1, 2, 2)
    assert not out.data.any()


def test_conv_stem_shape():
    x = Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32))
    k = Tensor(np.zeros((64, 3, 7, 7), dtype=np.float32))
    assert ops.conv2d(x, k, stride=2, padding=3).shape == (1, 64, 112, 112)


def test_conv_is_cross_correlation():
    x = T(np.arange(9.0).reshape(1, 1, 3, 3))
    k = T([[[[1, 0], [0, 0]]]])
    # top-left kernel tap picks the top-left of each window (no flip)
    np.testing.assert_array_equal(ops.conv2d(x, k).data[0, 0], [[0, 1], [3, 4]])


@given(h=st.integers(1, 20), k=st.integers(1, 7), s=st.integers(1, 4), p=st.integers(0, 3))
def test_conv_output_size_law(h, k, s, p):
    if k > h + 2 * p:
        with pytest.raises(DimensionError):
            ops.conv2d(T(np.zeros((1, 1, h, h))), T(np.zeros((1, 1, k, k))), stride=s, padding=p)
        return
    out = ops.conv2d(T(np.zeros((1, 1, h, h))), T(np.zeros((1, 1, k, k))), stride=s, padding=p)
    assert out.shape[2] == (h + 2 * p - k) // s + 1 == out.shape[3]


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 2, 6, 5)), r.standard_normal((2, 2, 6, 5))
    k = T(r.standard_normal((3, 2, 3, 3)))
    lhs = ops.conv2d(T(a * x + b * y), k, stride=2, padding=1).data
    rhs = a * ops.conv2d(T(x), k, stride=2, padding=1).data + b * ops.conv2d(T(y), k, stride=2, padding=1).data
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() / scale < 1e-6


def test_conv_errors():
    with pytest.raises(DimensionError, match="axis 1"):
        ops.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))
    with pytest.raises(NumericError):
        ops.conv2d(T(np.full((1, 1, 3, 3), np.nan)), T(np.zeros((1, 1, 2, 2))))


def test_conv_deterministic(rng):
    x, k = T(rng.standard_normal((2, 3, 9, 9))), T(rng.standard_normal((4, 3, 3, 3)))
    assert ops.conv2d(x, k, stride=2, padding=1).data.tobytes() == ops.conv2d(x, k, stride=2, padding=1).data.tobytes()


# ---------------------------------------------------------------- activations and pooling

def test_relu_subgradient_at_zero():
    x = Parameter([-1.0, 0.0, 2.0], "x", np.float64)
    with GradientTape() as tape:
        loss = ops.sum(ops.relu(x))
    np.testing.assert_array_equal(backward(tape, loss)["x"].data, [0.0, 0.0, 1.0])


def test_sigmoid_extremes():
    out = ops.sigmoid(T([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    s = ops.softmax(T([row])).data
    assert abs(s.sum() - 1) < 1e-6 and np.isfinite(s).all()


def test_max_pool_ties_go_to_first_index():
    x = Parameter(np.ones((1, 1, 2, 2)), "x", np.float64)
    with GradientTape() as tape:
        loss = ops.sum(ops.max_pool2d(x, 2, 2))
    np.testing.assert_array_equal(backward(tape, loss)["x"].data[0, 0], [[1, 0], [0, 0]])


@given(seed=st.integers(0, 2**16), size=st.sampled_from([2, 3]), stride=st.integers(1, 3), pad=st.integers(0, 1))
def test_max_pool_gradient_mass_preserved(seed, size, stride, pad):
    r = np.random.default_rng(seed)
    x = Parameter(r.integers(-2, 3, (2, 2, 6, 6)).astype(float), "x", np.float64)
    g = r.standard_normal(ops.max_pool2d(x, size, stride, pad).shape)
    with GradientTape() as tape:
        loss = ops.sum(ops.mul(ops.max_pool2d(x, size, stride, pad), T(g)))
    gx = backward(tape, loss)["x"].data
    assert math.isclose(gx.sum(), g.sum(), rel_tol=1e-12, abs_tol=1e-12)


def test_global_avg_pool_and_upsample():
    x = T(np.arange(8.0).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(ops.global_avg_pool(x).data, [[1.5, 5.5]])
    up = ops.upsample_nearest(T([[[[1.0, 2.0]]]]), 2).data
    np.testing.assert_array_equal(up[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


# ---------------------------------------------------------------- batch norm

def _bn_params(c, dtype=np.float64):
    return {"gamma": T(np.ones(c), dtype), "beta": T(np.zeros(c), dtype),
            "running_mean": np.zeros(c, dtype), "running_var": np.ones(c, dtype)}


def test_bn_train_standardizes(rng):
    x = T(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    out = batchnorm_forward(x, _bn_params(3)).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-3
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_bn_constant_channel_is_zero():
    out = batchnorm_forward(T(np.full((2, 1, 3, 3), 7.0)), _bn_params(1)).data
    assert not out.any()


def test_bn_eval_with_batch_stats_matches_train(rng):
    x = T(rng.standard_normal((3, 2, 4, 4)))
    train_out = batchnorm_forward(x, _bn_params(2), "train").data
    params = _bn_params(2)
    params["running_mean"] = x.data.mean(axis=(0, 2, 3))
    params["running_var"] = x.data.var(axis=(0, 2, 3))
    eval_out = batchnorm_forward(x, params, "eval").data
    assert np.abs(eval_out - train_out).max() < 1e-5


def test_bn_running_stats_momentum(rng):
    x = T(rng.standard_normal((4, 2, 3, 3)) + 5)
    params = _bn_params(2)
    batchnorm_forward(x, params, "train", momentum=0.1)
    np.testing.assert_allclose(params["running_mean"], 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(params["running_var"], 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)), rtol=1e-12)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batchnorm_forward(T(np.zeros((1, 2, 1, 1))), _bn_params(2))
    # eval mode has no batch requirement
    batchnorm_forward(T(np.zeros((1, 2, 1, 1))), _bn_params(2), "eval")


def test_bn_layer_rejects_nonpositive_running_var():
    bn = BatchNorm2d("bn", 2)
    with pytest.raises(ContractError):
        bn.set_buffer("bn.running_var", np.array([1.0, 0.0]))


def test_layerspec_kinds():
    with pytest.raises(ContractError):
        LayerSpec("dropout")
    spec = BatchNorm2d("bn", 4).spec()
    assert spec.kind == "batchnorm" and spec.param_shapes == {"bn.gamma": (4,), "bn.beta": (4,)}


# ---------------------------------------------------------------- losses

def test_cross_entropy_uniform_is_ln_k():
    assert abs(ops.softmax_cross_entropy(T(np.zeros((3, 7))), [0, 3, 6]).item() - math.log(7)) < 1e-12
    assert round(math.log(7), 6) == 1.945910


def test_cross_entropy_saturated():
    logits = np.zeros((1, 7))
    logits[0, 4] = 1000
    assert ops.softmax_cross_entropy(T(logits), [4]).item() < 1e-6


def test_cross_entropy_hand_value():
    loss = ops.softmax_cross_entropy(T([[1.0, 2.0, 3.0]]), [2]).item()
    assert round(loss, 6) == 0.407606
    assert abs(loss - (math.log(math.e + math.e**2 + math.e**3) - 3)) < 1e-12


def test_cross_entropy_gradient(rng):
    z = Parameter(rng.standard_normal((4, 5)), "z", np.float64)
    labels = [0, 4, 2, 2]
    with GradientTape() as tape:
        loss = ops.softmax_cross_entropy(z, labels)
    g = backward(tape, loss)["z"].data
    expect = ops.softmax_array(z.data) - np.eye(5)[labels]
    np.testing.assert_allclose(g, expect / 4, atol=1e-15)


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        ops.softmax_cross_entropy(T(np.zeros((1, 3))), [3])


def test_recon_loss_fixtures():
    x = [T([1.0, 2.0]), T([0.5, 0.5])]
    assert recon_loss(x, x).item() == 0.0
    assert recon_loss([T([1.0, 1.0])], [T([0.0, 0.0])]).item() == 1.0
    assert recon_loss([T([3.0, 4.0]), T([0.0, 0.0])], [T([0.0, 0.0]), T([0.0, 0.0])]).item() == 12.5


def test_recon_loss_batched_equals_list(rng):
    y, x = rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((3, 2, 4, 4))
    batched = recon_loss(T(y), T(x)).item()
    listed = recon_loss([T(a) for a in y], [T(b) for b in x]).item()
    assert math.isclose(batched, listed, rel_tol=1e-12)


def test_recon_loss_gradient_is_residual(rng):
    y = Parameter(rng.standard_normal((2, 3, 4, 4)), "y", np.float64)
    x = T(rng.standard_normal((2, 3, 4, 4)))
    with GradientTape() as tape:
        loss = recon_loss(y, x)
    g = backward(tape, loss)["y"].data
    assert np.abs(g - (y.data - x.data)).max() < 1e-10


@given(seed=st.integers(0, 2**16))
def test_recon_loss_order_invariant(seed):
    r = np.random.default_rng(seed)
    y, x = r.standard_normal(24), r.standard_normal(24)
    perm = r.permutation(24)
    a = recon_loss(T(y.reshape(2, 3, 4)), T(x.reshape(2, 3, 4))).item()
    b = recon_loss(T(y[perm].reshape(4, 6)), T(x[perm].reshape(4, 6))).item()
    assert math.isclose(a, b, rel_tol=1e-12)


def test_recon_loss_errors():
    with pytest.raises(ContractError):
        recon_loss([], [])
    with pytest.raises(DimensionError):
        recon_loss([T([1.0, 2.0])], [T([1.0])])

import numpy as np
import pytest

from lesionforge import gradsuite, ops
from lesionforge.errors import ContractError
from lesionforge.gradcheck import grad_check, grad_check_run, kink_margin, relative_error
from lesionforge.layers import Conv2d
from lesionforge.models import DAEConfig, build_dae
from lesionforge.tensor import Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_identity_sum_is_exact(rng):
    # dyadic inputs and step make every float operation exact
    assert grad_check(ops.sum, [T(rng.integers(-8, 8, (3, 4)))], 2.0**-14) == 0.0
    assert grad_check(ops.sum, [T(rng.standard_normal((3, 4)))]) < 1e-10


def test_single_conv_layer_double_precision(rng):
    conv = Conv2d("c", 2, 3, 3, stride=1, padding=1, dtype=np.float64)
    conv.weight.assign(rng.standard_normal(conv.weight.shape))
    conv.bias.assign(rng.standard_normal(3))
    assert grad_check(conv, [T(rng.standard_normal((2, 2, 5, 5)))], 1e-4) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_bn_relu_dense_stack(seed):
    assert gradsuite.check_bn_relu_dense(seed) < 1e-4


def test_epsilon_must_be_positive():
    for eps in (0.0, -1e-4):
        with pytest.raises(ContractError):
            grad_check(ops.sum, [T([1.0])], eps)


def test_wrong_backward_is_caught(rng):
    def bad_square(x):
        # forward x^2, backward claims x
        return ops._emit("bad", x.data ** 2, (x,), lambda g: (g * x.data,))

    assert grad_check(bad_square, [T(rng.uniform(1, 2, 5))]) > 0.3


def test_relative_error_floor():
    assert relative_error(np.float64(0.0), np.float64(0.0)) == 0.0
    assert relative_error(np.float64(1.0), np.float64(-1.0)) == 2.0


def test_kink_margin_reports_closest_relu_input():
    assert kink_margin(ops.relu, [T([0.5, -0.003, 2.0])]) == pytest.approx(0.003)


def test_skip_crossings_skips_kink_probes():
    x = T([1e-5, 0.5, -0.7])
    loose = grad_check_run(ops.relu, [x], 1e-4)
    assert loose.errors["input0"] > 0.1
    strict = grad_check_run(ops.relu, [x], 1e-4, skip_crossings=True)
    assert strict.skipped["input0"] == 1 and strict.probed["input0"] == 2
    assert strict.worst < 1e-9


def test_max_coords_limits_probes():
    g = build_dae(DAEConfig(encoder_channels=(4, 2)), seed=0, dtype=np.float64)
    x = T(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    res = grad_check_run(g, [x], max_coords=3, skip_crossings=True, check_inputs=False)
    assert set(res.errors) == set(g.parameters())
    assert all(n <= 3 for n in res.probed.values())


def test_model_buffers_restored():
    g = build_dae(DAEConfig(encoder_channels=(4, 2)), seed=0, dtype=np.float64)
    gradsuite.randomize_affine(g, 0)
    before = g.param_hash()
    grad_check_run(g, [T(np.random.default_rng(1).uniform(size=(2, 3, 32, 32)))], max_coords=2)
    assert g.param_hash() == before


def test_float32_model_rejected():
    with pytest.raises(ContractError):
        grad_check(build_dae(DAEConfig(), dtype=np.float32), [T(np.zeros((1, 3, 32, 32)))])


@pytest.mark.parametrize("name", [n for n in gradsuite.CHECKS if not n.endswith("_model")])
@pytest.mark.parametrize("seed", [0, 1])
def test_primitive_checks(name, seed):
    assert gradsuite.CHECKS[name](seed) < gradsuite.TOLERANCE


@pytest.mark.parametrize("name", ["resnet_model", "dae_model"])
def test_model_checks_one_seed(name):
    res = gradsuite.CHECKS[name](0)
    assert res.worst < gradsuite.TOLERANCE
    assert min(res.probed.values()) >= 1


def test_suite_rejects_unknown_name():
    with pytest.raises(KeyError):
        gradsuite.run_suite(trials=1, only=["nope"])

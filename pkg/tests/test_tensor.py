import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lesionforge import ops
from lesionforge.errors import ContractError, DimensionError, FormatError, NumericError, StateError
from lesionforge.tensor import (GradientTape, Parameter, Tensor, active_tape, backward, decode_tensor,
                                encode_tensor, load_tensor, save_tensor)


def test_tensor_is_immutable():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3) and t.size == 6
    with pytest.raises(ValueError):
        t.data[0, 0] = 5


def test_tensor_rejects_zero_dim():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0)))


def test_scalar_tensor():
    t = Tensor(3.5)
    assert t.shape == () and t.item() == 3.5


def test_integer_input_becomes_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_check_finite():
    Tensor([1.0, 2.0]).check_finite()
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan]).check_finite()


def test_sum_gradient_is_ones():
    w = Parameter(np.random.default_rng(0).standard_normal((3, 4)), "w", np.float64)
    with GradientTape() as tape:
        loss = ops.sum(w)
    g = backward(tape, loss)["w"].data
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_half_squared_norm_gradient():
    w = Parameter([1.0, 2.0], "w", np.float64)
    x = Tensor([0.0, 0.0], dtype=np.float64)
    with GradientTape() as tape:
        loss = ops.squared_error(w, x)
    assert loss.item() == 2.5
    np.testing.assert_array_equal(backward(tape, loss)["w"].data, [1.0, 2.0])


def test_backward_repeatable_on_same_tape(rng):
    w = Parameter(rng.standard_normal((2, 2)), "w", np.float64)
    with GradientTape() as tape:
        loss = ops.sum(ops.mul(ops.relu(w), w))
    first = backward(tape, loss)["w"].data
    second = backward(tape, loss)["w"].data
    np.testing.assert_array_equal(first, second)


def test_unused_parameter_gets_zero_gradient():
    a = Parameter([1.0, 2.0], "a", np.float64)
    b = Parameter([3.0], "b", np.float64)
    with GradientTape() as tape:
        unused = ops.scale(b, 2.0)
        loss = ops.sum(a)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads["b"].data, [0.0])
    assert unused.shape == (1,)


def test_gradient_accumulates_over_reuse():
    w = Parameter([2.0], "w", np.float64)
    with GradientTape() as tape:
        loss = ops.sum(ops.add(w, ops.mul(w, w)))
    assert backward(tape, loss)["w"].data[0] == 1.0 + 2 * 2.0


def test_non_scalar_loss_rejected():
    w = Parameter([1.0, 2.0], "w", np.float64)
    with GradientTape() as tape:
        y = ops.scale(w, 2.0)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_foreign_loss_rejected():
    w = Parameter([1.0], "w", np.float64)
    with GradientTape() as tape:
        ops.sum(w)
    with GradientTape():
        other = ops.sum(w)
    with pytest.raises(ContractError):
        backward(tape, other)


def test_tape_records_in_order_and_nests():
    w = Parameter([1.0, -1.0], "w", np.float64)
    with GradientTape() as outer:
        y = ops.relu(w)
        ops.sum(y)
    assert outer.op_names() == ["relu", "sum"]
    assert active_tape() is None


def test_tape_exit_out_of_order():
    a, b = GradientTape(), GradientTape()
    a.__enter__()
    b.__enter__()
    with pytest.raises(StateError):
        a.__exit__(None, None, None)
    b.__exit__(None, None, None)
    a.__exit__(None, None, None)


def test_tape_is_thread_local():
    seen = []
    with GradientTape():
        t = threading.Thread(target=lambda: seen.append(active_tape()))
        t.start()
        t.join()
    assert seen == [None]


def test_conv_relu_sum_matches_finite_differences(rng):
    x = Tensor(rng.standard_normal((1, 1, 5, 5)), dtype=np.float64)
    k = Parameter(rng.standard_normal((2, 1, 3, 3)), "k", np.float64)

    def f(kdata):
        return ops.sum(ops.relu(ops.conv2d(x, Tensor(kdata, dtype=np.float64)))).item()

    with GradientTape() as tape:
        loss = ops.sum(ops.relu(ops.conv2d(x, k)))
    g = backward(tape, loss)["k"].data
    eps = 1e-6
    num = np.zeros_like(g)
    for idx in np.ndindex(g.shape):
        plus, minus = k.data.copy(), k.data.copy()
        plus[idx] += eps
        minus[idx] -= eps
        num[idx] = (f(plus) - f(minus)) / (2 * eps)
    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-12)
    assert rel.max() < 1e-6


# ---------------------------------------------------------------- container

@given(hnp.arrays(st.sampled_from([np.float32, np.float64]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=1, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_ltd1_round_trip_bit_exact(arr):
    blob = encode_tensor(arr)
    back = decode_tensor(blob).data
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()
    assert encode_tensor(back) == blob


def test_ltd1_header_layout():
    blob = encode_tensor(np.zeros((2, 3), dtype=np.float64))
    assert blob[:4] == b"LTD1"
    assert blob[4] == 2 and blob[5] == 2
    assert blob[6:14] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(blob) == 14 + 6 * 8


def test_ltd1_file_round_trip(tmp_path):
    arr = np.random.default_rng(3).standard_normal((3, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "a.ltd", arr)
    first = (tmp_path / "a.ltd").read_bytes()
    save_tensor(tmp_path / "b.ltd", load_tensor(tmp_path / "a.ltd"))
    assert (tmp_path / "b.ltd").read_bytes() == first


@pytest.mark.parametrize("blob", [b"", b"LTD0\x01\x00", b"LTD1\x03\x00" + b"\0" * 4,
                                  b"LTD1\x01\x01\x02\x00\x00\x00" + b"\0" * 4])
def test_ltd1_malformed(blob):
    with pytest.raises(FormatError):
        decode_tensor(blob)


def test_ltd1_rejects_integer_arrays():
    with pytest.raises(FormatError):
        encode_tensor(np.arange(3))

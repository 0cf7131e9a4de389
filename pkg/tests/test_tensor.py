import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from swinchex.tensor import (
    ParamSet, ShapeError, Tensor, avg_pool2d, backward, count_macs, gelu, getitem, grad_check,
    layer_norm, matmul, mean, mul, no_grad, relu, reshape, sigmoid, softmax, transpose, tsum,
)
from swinchex.checks import op_cases, op_grad_errors

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def weighted_sum(y, seed=0):
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return tsum(mul(y, Tensor(w)))


# matmul ----------------------------------------------------------------------

def test_matmul_identity():
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_values():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_matches_numpy(rng):
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((5, 6))
    assert np.allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)
    c = rng.standard_normal((2, 3, 5, 2))
    assert np.allclose(matmul(Tensor(a), Tensor(c)).data, a @ c, atol=1e-12)


# softmax -----------------------------------------------------------------------

@given(finite)
def test_softmax_of_constant_is_uniform(c):
    out = softmax(Tensor([c, c, c])).data
    assert np.allclose(out, 1 / 3, atol=1e-15)


def test_softmax_hand_value():
    out = softmax(Tensor([0.0, math.log(2.0)])).data
    assert np.allclose(out, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_masked_entry_gets_zero_weight():
    assert softmax(Tensor([0.0, -np.inf])).data.tolist() == [1.0, 0.0]


@given(arrays(np.float64, (4, 7), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    s = softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    assert np.abs(s.sum(-1) - 1).max() <= 1e-12


# layer norm ----------------------------------------------------------------------

def test_layer_norm_constant_vector_gives_beta():
    beta = Tensor([0.3, -1.0, 2.0])
    out = layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor([2.0, 5.0, -1.0]), beta)
    assert np.allclose(out.data, beta.data, atol=1e-12)


def test_layer_norm_hand_value():
    out = layer_norm(Tensor([1.0, 3.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12)
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_standardises(rng):
    x = rng.standard_normal((50, 16)) * 3 + 7
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
    assert np.abs(out.mean(-1)).max() < 1e-12
    assert np.abs(out.var(-1) - 1).max() < 1e-9


# elementwise --------------------------------------------------------------------

def test_fixed_points():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    assert gelu(Tensor(0.0)).item() == 0.0
    assert relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_avg_pool_of_constant_map():
    x = Tensor(np.full((1, 7, 7, 3), 2.5))
    out = avg_pool2d(x, 7)
    assert out.shape == (1, 1, 1, 3)
    assert np.all(out.data == 2.5)


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        reshape(Tensor(np.zeros(6)), (4, 2))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_reshape_roundtrip(shape, r):
    n = int(np.prod(shape))
    x = Tensor(np.arange(n, dtype=float).reshape(shape))
    back = reshape(reshape(x, (n,)), tuple(shape))
    assert np.array_equal(back.data, x.data)


def test_data_is_float64_and_shape_consistent():
    t = Tensor([[1, 2, 3]])
    assert t.data.dtype == np.float64
    assert np.prod(t.shape) == t.data.size


# backward --------------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(x * x))
    assert x.grad.tolist() == [2.0, 4.0]


def test_disconnected_parameter_keeps_zero_grad():
    x, y = Tensor([1.0], requires_grad=True), Tensor([5.0], requires_grad=True)
    y.zero_grad()
    backward(tsum(x * x))
    assert y.grad.tolist() == [0.0]


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_backward_accumulates_until_zeroed():
    x = Tensor([3.0], requires_grad=True)
    backward(tsum(x * x))
    backward(tsum(x * x))
    assert x.grad.tolist() == [12.0]
    x.zero_grad()
    backward(tsum(x * x))
    assert x.grad.tolist() == [6.0]


def test_every_reachable_tensor_gets_a_grad(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    h = relu(x) * 2.0
    h2 = softmax(h)
    backward(tsum(h2 * h2))
    for t in (x, h, h2):
        assert t.grad is not None and t.grad.shape == t.shape


def test_repeated_backward_is_bit_identical(rng):
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((5, 4)))
    loss = tsum(softmax(matmul(x, w)) * Tensor(rng.standard_normal((5, 3))))
    backward(loss)
    first = w.grad.copy()
    w.zero_grad()
    backward(loss)
    assert np.array_equal(first, w.grad)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_getitem_gradient_scatters_repeats():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(tsum(getitem(x, [0, 0, 2])))
    assert x.grad.tolist() == [2.0, 0.0, 1.0]


# grad_check ------------------------------------------------------------------------

def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda t: tsum(t * t), rng.standard_normal(5), eps=1e-5) < 1e-7


def test_grad_check_constant_function(rng):
    assert grad_check(lambda t: tsum(softmax(t)), rng.standard_normal(5)) < 1e-7


def test_every_op_passes_grad_check():
    errors = op_grad_errors(seed=7)
    assert max(errors.values()) < 1e-6, {k: v for k, v in errors.items() if v >= 1e-6}


def _unary_cases():
    from swinchex.tensor import exp, log, reciprocal
    return {
        "sigmoid": (sigmoid, None),
        "gelu": (gelu, None),
        "exp": (exp, None),
        "relu": (relu, "kink"),
        "softmax": (softmax, None),
        "log": (log, "positive"),
        "reciprocal": (reciprocal, "positive"),
        "mean": (lambda t: mean(t, axis=0), None),
        "transpose": (lambda t: transpose(t, (1, 0)), None),
        "layer_norm": (lambda t: layer_norm(t, Tensor([1.5, -0.5, 2.0]), Tensor([0.1, 0.2, 0.3])), None),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@settings(max_examples=100)
@given(x=arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_op_gradients_at_random_points(name, x):
    fn, domain = _unary_cases()[name]
    if domain == "positive":
        x = np.abs(x) + 0.5
    elif domain == "kink":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay off the kink
    if name == "layer_norm":
        x = x + np.array([0.0, 1.0, 2.0])  # keep per-row variance away from zero
    assert grad_check(lambda t: weighted_sum(fn(t)), x, eps=1e-5) < 1e-5


def test_op_case_table_covers_core_ops():
    names = set(op_cases(np.random.default_rng(0)))
    for op in ("add", "mul", "gelu", "relu", "sigmoid", "reshape", "transpose", "avg_pool2d",
               "matmul", "softmax", "layer_norm"):
        assert op in names


# MAC counting -------------------------------------------------------------------------

def test_count_macs_counts_matmul_terms():
    with count_macs() as c:
        matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
    assert c[0] == 2 * 3 * 4 * 5


# ParamSet -------------------------------------------------------------------------------

def test_paramset_sorted_unique():
    ps = ParamSet()
    ps["b.w"] = Tensor([1.0])
    ps["a.w"] = Tensor([2.0])
    assert list(ps) == ["a.w", "b.w"]
    with pytest.raises(KeyError):
        ps["a.w"] = Tensor([3.0])


@given(st.dictionaries(
    st.text(alphabet="abcxyz._0123é", min_size=1, max_size=12),
    arrays(np.float64, st.lists(st.integers(1, 3), min_size=0, max_size=3).map(tuple),
           elements=st.floats(allow_nan=False)),
    max_size=5,
))
def test_paramset_bytes_roundtrip(d):
    ps = ParamSet({k: Tensor(v) for k, v in d.items()})
    back = ParamSet.from_bytes(ps.to_bytes())
    assert list(back) == list(ps)
    for k in ps:
        assert back[k].shape == ps[k].shape
        assert np.array_equal(back[k].data, ps[k].data)


def test_paramset_binary_layout():
    ps = ParamSet({"w": Tensor([[1.0, 2.0]])})
    blob = ps.to_bytes()
    import struct
    assert blob[:5] == b"SWCX1"
    assert struct.unpack_from("<Q", blob, 5)[0] == 1
    assert blob[13:14] == b"w"
    assert struct.unpack_from("<3Q", blob, 14) == (2, 1, 2)
    assert struct.unpack_from("<2d", blob, 38) == (1.0, 2.0)


def test_paramset_rejects_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        ParamSet.from_bytes(b"NOPE")

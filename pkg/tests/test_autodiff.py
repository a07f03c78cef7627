import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stast import autodiff as ad
from stast.autodiff import Tensor, tensor

from conftest import grad_check

TRIALS = 50


def rand_tensor(rng, *shape):
    return tensor(rng.normal(size=shape), requires_grad=True)


def dims(rng, k):
    return [int(d) for d in rng.integers(1, 9, size=k)]


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    b = tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(ad.matmul(tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_value():
    assert ad.matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_matmul_gradients():
    rng = np.random.default_rng(0)
    for _ in range(TRIALS):
        m, k, n = dims(rng, 3)
        a, b = rand_tensor(rng, m, k), rand_tensor(rng, k, n)
        assert grad_check(lambda: ad.sum_(ad.matmul(a, b)), [a, b]) < 1e-4


def test_batched_matmul_and_linear_gradients():
    rng = np.random.default_rng(1)
    for _ in range(TRIALS):
        bsz, m, k, n = dims(rng, 4)
        a, w = rand_tensor(rng, bsz, m, k), rand_tensor(rng, k, n)
        bias = rand_tensor(rng, n)
        c = rng.normal(size=(bsz, m, n))
        assert grad_check(lambda: ad.sum_(ad.matmul(a, w) * c), [a, w]) < 1e-4
        assert grad_check(lambda: ad.sum_(ad.linear(a, w, bias) * c), [a, w, bias]) < 1e-4


# --------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(ad.softmax_rows(tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])


def test_softmax_log_weights():
    out = ad.softmax_rows(tensor([[math.log(1), math.log(2), math.log(3)]])).data
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-12)


def test_softmax_gradients():
    rng = np.random.default_rng(2)
    for _ in range(TRIALS):
        m, n = dims(rng, 2)
        x = rand_tensor(rng, m, n)
        c = rng.normal(size=(m, n))
        assert grad_check(lambda: ad.sum_(ad.softmax_rows(x) * c), [x]) < 1e-4


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one_for_large_inputs(x):
    out = ad.softmax_rows(tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_log_softmax_and_logsumexp_gradients():
    rng = np.random.default_rng(3)
    for _ in range(TRIALS):
        m, n = dims(rng, 2)
        x = rand_tensor(rng, m, n)
        c = rng.normal(size=(m, n))
        assert grad_check(lambda: ad.sum_(ad.log_softmax(x) * c), [x]) < 1e-4
        assert grad_check(lambda: ad.sum_(ad.logsumexp(x, axis=-1) * c[:, 0]), [x]) < 1e-4


# ------------------------------------------------------------ layer norm

def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(tensor([[5.0, 5.0, 5.0]]), tensor(np.ones(3)), tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_two_values():
    out = ad.layer_norm(tensor([[1.0, 3.0]]), tensor(np.ones(2)), tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_standardizes_rows():
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(6, 8))
    out = ad.layer_norm(tensor(x), tensor(np.ones(8)), tensor(np.zeros(8))).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-4)


def test_layer_norm_gradients():
    rng = np.random.default_rng(5)
    for _ in range(TRIALS):
        m, d = dims(rng, 2)
        d = max(d, 2)
        x, g, b = rand_tensor(rng, m, d), rand_tensor(rng, d), rand_tensor(rng, d)
        c = rng.normal(size=(m, d))
        assert grad_check(lambda: ad.sum_(ad.layer_norm(x, g, b) * c), [x, g, b]) < 1e-4


# ------------------------------------------------------------- embedding

def test_embedding_empty_ids():
    out = ad.embedding_lookup(tensor(np.ones((4, 3))), [])
    assert out.shape == (0, 3)


def test_embedding_duplicate_rows_scatter_sum():
    table = tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = ad.embedding_lookup(table, [2, 2])
    np.testing.assert_array_equal(out.data, [table.data[2], table.data[2]])
    w = np.array([[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]])
    ad.backward(ad.sum_(out * w))
    np.testing.assert_array_equal(table.grad[2], [11.0, 22.0, 33.0])
    np.testing.assert_array_equal(table.grad[[0, 1, 3]], 0.0)


def test_embedding_out_of_range_reports_position():
    with pytest.raises(IndexError, match="position 1"):
        ad.embedding_lookup(tensor(np.ones((4, 3))), [0, 4])


def test_embedding_gradients():
    rng = np.random.default_rng(6)
    for _ in range(TRIALS):
        v, d, t = dims(rng, 3)
        table = rand_tensor(rng, v, d)
        ids = rng.integers(0, v, size=t)
        c = rng.normal(size=(t, d))
        assert grad_check(lambda: ad.sum_(ad.embedding_lookup(table, ids) * c), [table]) < 1e-4


# -------------------------------------------------------------------- mse

def test_mse_identity_and_hand_value():
    a = tensor([1.0, 2.0])
    assert ad.mse(a, a).item() == 0.0
    assert ad.mse(tensor([0.0, 0.0]), tensor([1.0, 3.0])).item() == 5.0


def test_mse_shape_error():
    with pytest.raises(ad.DimensionError):
        ad.mse(tensor(np.ones(2)), tensor(np.ones(3)))


def test_mse_gradients():
    rng = np.random.default_rng(7)
    for _ in range(TRIALS):
        m, n = dims(rng, 2)
        a, b = rand_tensor(rng, m, n), rand_tensor(rng, m, n)
        assert grad_check(lambda: ad.mse(a, b), [a, b]) < 1e-4


# ---------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform():
    out = ad.masked_cross_entropy(tensor(np.zeros((3, 4))), [1, 2, 3], [False, True, False])
    assert out.item() == pytest.approx(math.log(4))


def test_cross_entropy_confident_is_near_zero():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = logits[1, 3] = 50.0
    assert ad.masked_cross_entropy(tensor(logits), [1, 3], [True, True]).item() < 1e-12


def test_cross_entropy_masked_positions_get_no_gradient():
    logits = tensor(np.random.default_rng(8).normal(size=(4, 5)), requires_grad=True)
    ad.backward(ad.masked_cross_entropy(logits, [0, 1, 2, 3], [True, False, True, False]))
    np.testing.assert_array_equal(logits.grad[[1, 3]], 0.0)
    assert np.any(logits.grad[0] != 0)


def test_cross_entropy_all_masked():
    with pytest.raises(ad.DegenerateBatchError):
        ad.masked_cross_entropy(tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_cross_entropy_gradients():
    rng = np.random.default_rng(9)
    for _ in range(TRIALS):
        t, c = dims(rng, 2)
        c = max(c, 2)
        logits = rand_tensor(rng, t, c)
        targets = rng.integers(0, c, size=t)
        mask = rng.random(t) < 0.7
        mask[0] = True
        assert grad_check(lambda: ad.masked_cross_entropy(logits, targets, mask), [logits]) < 1e-4


# ---------------------------------------------------- elementwise & shape ops

@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "exp", "tanh", "relu", "square",
                                "transpose", "concat", "stack", "index", "pad", "where", "mean"])
def test_misc_op_gradients(op):
    rng = np.random.default_rng(10)
    for _ in range(TRIALS):
        m, n = dims(rng, 2)
        a, b = rand_tensor(rng, m, n), rand_tensor(rng, 1, n)
        pos = tensor(rng.uniform(0.5, 2.0, size=(m, n)), requires_grad=True)
        fns = {
            "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / pos,
            "exp": lambda: ad.exp(a), "tanh": lambda: ad.tanh(a), "relu": lambda: ad.relu(a),
            "square": lambda: ad.square(a), "transpose": lambda: ad.transpose(a),
            "concat": lambda: ad.concat([a, b], axis=0), "stack": lambda: ad.stack([a, a * b], axis=-1),
            "index": lambda: a[np.array([0, 0, m - 1]), :], "pad": lambda: ad.pad_axis(a, n + 2, axis=1),
            "where": lambda: ad.where(a.data > 0, a, -1.0), "mean": lambda: ad.mean(a, axis=0),
        }
        out_shape = fns[op]().shape
        c = rng.normal(size=out_shape)
        ad.reset_tape()
        assert grad_check(lambda: ad.sum_(fns[op]() * c), [a, b, pos]) < 1e-4


# -------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = tensor(np.random.default_rng(11).normal(size=(2, 3, 4)), requires_grad=True)
    ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_loss_grad_is_one():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(x * x)
    ad.backward(loss)
    assert loss.grad == 1.0


def test_composite_gradient():
    rng = np.random.default_rng(12)
    for _ in range(TRIALS):
        m, k, n = dims(rng, 3)
        x, w = rand_tensor(rng, m, k), rand_tensor(rng, k, n)
        t = tensor(rng.random((m, n)))
        assert grad_check(lambda: ad.mse(ad.softmax_rows(ad.matmul(x, w)), t), [x, w]) < 1e-4


def test_constants_untouched():
    x = tensor([1.0, 2.0], requires_grad=True)
    c = tensor([3.0, 4.0])
    ad.backward(ad.sum_(x * c))
    assert c.grad is None
    np.testing.assert_array_equal(c.data, [3.0, 4.0])


def test_nonscalar_loss_rejected():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ContractError):
        ad.backward(x * 2.0)


def test_double_backward_rejected():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(x * x)
    ad.backward(loss)
    with pytest.raises(ad.TapeStateError):
        ad.backward(loss)


def test_tape_replays_each_record_once():
    x = tensor([1.0, 2.0], requires_grad=True)
    calls = []
    y = x * 2.0
    ad.active_tape().records = [(out, parents, (lambda fn: lambda g: (calls.append(1), fn(g))[1])(fn))
                                for out, parents, fn in ad.active_tape().records]
    z = ad.sum_(y)
    n = len(ad.active_tape())
    ad.backward(z)
    assert len(calls) == 1 and n == 2
    assert len(ad.active_tape()) == 0


def test_no_grad_records_nothing():
    x = tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad and len(ad.active_tape()) == 0


# ------------------------------------------------------ rng, dropout, dtype

def test_rng_replay_is_bit_identical():
    a, b = ad.Rng(42), ad.Rng(42)
    assert np.array_equal(a.normal(0, 1, (3, 4)), b.normal(0, 1, (3, 4)))
    assert np.array_equal(a.random((5,)), b.random((5,)))


def test_rng_state_roundtrip():
    a = ad.Rng(1)
    a.random(3)
    state = a.get_state()
    first = a.random(4)
    a.set_state(state)
    assert np.array_equal(first, a.random(4))


def test_dropout_identity_cases():
    x = tensor(np.ones((3, 3)))
    assert ad.dropout(x, 0.0, ad.Rng(0), True) is x
    assert ad.dropout(x, 0.5, ad.Rng(0), False) is x


def test_dropout_inverted_scaling_and_replay():
    x = tensor(np.ones((200, 50)))
    out1 = ad.dropout(x, 0.25, ad.Rng(9), True).data
    out2 = ad.dropout(x, 0.25, ad.Rng(9), True).data
    assert np.array_equal(out1, out2)
    assert set(np.unique(out1)) <= {0.0, 1.0 / 0.75}
    assert abs(out1.mean() - 1.0) < 0.02


def test_precision_switch():
    with ad.precision("float32"):
        assert tensor([1.0]).data.dtype == np.float32
    assert tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_precision("float16")


def test_grad_buffer_only_when_required():
    a = tensor([1.0, 2.0], requires_grad=True)
    b = tensor([3.0, 4.0])
    ad.backward(ad.sum_(a * b))
    assert a.grad is not None and b.grad is None

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memfuse import tensor as T
from memfuse.errors import DegenerateRowError, DimensionError, EmptyReductionError, GraphError
from memfuse.tensor import Tape, Tensor

from oracles import elementwise_fd, gradcheck

SEEDS = [0, 1, 2, 3, 4]
finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3) vs (2, 3)" in str(info.value)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a = Tensor.param(rng.standard_normal((3, 4)))
    b = Tensor.param(rng.standard_normal((4, 2)))
    assert gradcheck(lambda: T.sum_all(T.matmul(a, b)), [a, b]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_matmul_identity_exact(a):
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(a.shape[1]))).data, a)


def test_elementwise_examples():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.elementwise("scale", Tensor([1.0, -2.0]), 3.0).data.tolist() == [3.0, -6.0]
    with pytest.raises(DimensionError):
        T.elementwise("mul", Tensor([1.0, 2.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        T.elementwise("tanh", Tensor([1.0]))


def test_sigmoid_derivative_at_1_3():
    x = Tensor.param([1.3])
    with Tape() as tape:
        y = T.sum_all(T.sigmoid(x))
    tape.backward(y)
    numeric = elementwise_fd(lambda v: 1 / (1 + np.exp(-v[0])), np.array([1.3]))
    assert abs(x.grad[0] - numeric[0]) / abs(numeric[0]) < 1e-7


def test_sigmoid_extremes_are_finite():
    s = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.isfinite(s).all() and s[0] == 0.0 and s[1] == 1.0


@pytest.mark.parametrize("op", ["add", "sub", "mul", "relu", "sigmoid", "scale"])
@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(op, seed):
    rng = np.random.default_rng(seed)
    # keep relu inputs away from the kink so the central difference is clean
    a = Tensor.param(rng.standard_normal((3, 4)) + np.sign(rng.standard_normal((3, 4))) * 0.1)
    b = Tensor.param(rng.standard_normal((3, 4)))
    w = Tensor(rng.standard_normal((3, 4)))
    args = {"add": (a, b), "sub": (a, b), "mul": (a, b), "relu": (a,), "sigmoid": (a,), "scale": (a, 2.5)}[op]
    params = [t for t in args if isinstance(t, Tensor)]
    assert gradcheck(lambda: T.sum_all(T.mul(T.elementwise(op, *args), w)), params) < 1e-4


def test_softmax_examples():
    assert np.allclose(T.masked_softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    y = T.masked_softmax(Tensor([5.0, 5.0, 100.0]), [True, True, False]).data
    assert y.tolist() == [0.5, 0.5, 0.0]
    y = T.masked_softmax(Tensor([1.0, 2.0, 3.0])).data
    assert np.allclose(y, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_all_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        T.masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), [[True, False], [False, False]])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
       st.data())
def test_softmax_rows_sum_to_one_and_masked_zero(logits, data):
    mask = data.draw(arrays(bool, logits.shape))
    mask[:, 0] = mask[:, 0] | ~mask.any(axis=1)
    y = T.masked_softmax(Tensor(logits), mask).data
    assert np.all(y[~mask] == 0.0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = Tensor.param(rng.standard_normal((3, 5)))
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    w = Tensor(rng.standard_normal((3, 5)))
    assert gradcheck(lambda: T.sum_all(T.mul(T.masked_softmax(x, mask), w)), [x]) < 1e-4


def test_reduction_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert T.reductions("mean_over_axis", m, axis=0).data.tolist() == [2.0, 3.0]
    assert T.reductions("concat", [Tensor([1.0, 2.0]), Tensor([3.0])]).data.tolist() == [1.0, 2.0, 3.0]
    assert T.reductions("sum", m).item() == 10.0
    assert T.reductions("max_over_axis", m, axis=1).data.tolist() == [2.0, 4.0]


def test_max_tie_routes_gradient_to_first_index():
    x = Tensor.param([2.0, 2.0])
    with Tape() as tape:
        y = T.max_reduce(x, axis=0)
    tape.backward(y)
    assert x.grad.tolist() == [1.0, 0.0]


def test_empty_reductions_raise():
    with pytest.raises(EmptyReductionError):
        T.mean(Tensor(np.zeros((0, 3))), axis=0)
    with pytest.raises(EmptyReductionError):
        T.max_reduce(Tensor(np.zeros((2, 0))), axis=1)
    with pytest.raises(EmptyReductionError):
        T.mean(Tensor(np.ones((1, 2, 3))), axis=1, mask=[[False, False]])
    with pytest.raises(EmptyReductionError):
        T.concat([])
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


@pytest.mark.parametrize("seed", SEEDS)
def test_reduction_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor.param(rng.standard_normal((2, 4, 3)))
    y = Tensor.param(rng.standard_normal((2, 1, 3)))
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    w2 = Tensor(rng.standard_normal((2, 3)))
    w3 = Tensor(rng.standard_normal((2, 5, 3)))
    checks = [
        lambda: T.sum_all(T.mul(T.mean(x, axis=1), w2)),
        lambda: T.sum_all(T.mul(T.mean(x, axis=1, mask=mask), w2)),
        lambda: T.sum_all(T.mul(T.max_reduce(x, axis=1, mask=mask), w2)),
        lambda: T.sum_all(T.mul(T.concat([x, y], axis=1), w3)),
        lambda: T.mean(T.mul(x, x)),
    ]
    for fn in checks:
        assert gradcheck(fn, [x, y]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor.param(rng.standard_normal((2, 3, 4)))
    w = Tensor(rng.standard_normal((4, 2, 3)))
    w2 = Tensor(rng.standard_normal((6, 4)))
    assert gradcheck(lambda: T.sum_all(T.mul(T.transpose(x, (2, 0, 1)), w)), [x]) < 1e-4
    assert gradcheck(lambda: T.sum_all(T.mul(T.reshape(x, (6, 4)), w2)), [x]) < 1e-4


def test_backward_sum_gives_ones():
    W = Tensor.param(np.random.default_rng(0).standard_normal((3, 4)))
    with Tape() as tape:
        loss = T.sum_all(W)
    tape.backward(loss)
    assert np.array_equal(W.grad, np.ones((3, 4)))


def test_backward_accumulates_over_paths():
    x = Tensor.param([3.0])
    with Tape() as tape:
        loss = T.sum_all(T.add(T.mul(x, x), x))
    tape.backward(loss)
    assert x.grad.tolist() == [7.0]


@pytest.mark.parametrize("seed", SEEDS)
def test_two_layer_net_mse_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 3)))
    y = Tensor(rng.random((4, 1)))
    W1, b1 = Tensor.param(rng.standard_normal((3, 5))), Tensor.param(rng.standard_normal(5) * 0.1)
    W2, b2 = Tensor.param(rng.standard_normal((5, 1))), Tensor.param(rng.standard_normal(1) * 0.1)

    def loss():
        h = T.relu(T.add(T.matmul(x, W1), b1))
        d = T.sub(T.sigmoid(T.add(T.matmul(h, W2), b2)), y)
        return T.mean(T.mul(d, d))

    assert gradcheck(loss, [W1, b1, W2, b2]) < 1e-4


def test_backward_contract_errors():
    x = Tensor.param([1.0, 2.0])
    with Tape() as tape:
        v = T.scale(x, 2.0)
        s = T.sum_all(v)
    with pytest.raises(GraphError):
        tape.backward(v)
    tape.backward(s)
    with pytest.raises(GraphError):
        tape.backward(s)
    detached = T.sum_all(x)  # no active tape
    with pytest.raises(GraphError):
        T.backward(detached)
    with Tape() as other:
        pass
    with pytest.raises(GraphError):
        other.backward(s)


def test_backward_visits_in_reverse_order():
    x = Tensor.param([1.0, -2.0])
    with Tape() as tape:
        loss = T.sum_all(T.sigmoid(T.relu(T.scale(x, 3.0))))
    visited = tape.backward(loss)
    assert visited == list(reversed(tape.ops))


def test_unused_param_gets_zero_grad():
    x, unused = Tensor.param([1.0]), Tensor.param([5.0, 6.0])
    with Tape() as tape:
        loss = T.sum_all(T.scale(x, 2.0))
    tape.backward(loss, [x, unused])
    assert unused.grad.tolist() == [0.0, 0.0]


def test_tape_replay_is_deterministic():
    def grads():
        rng = np.random.default_rng(11)
        a = Tensor.param(rng.standard_normal((4, 4)))
        with Tape() as tape:
            loss = T.sum_all(T.masked_softmax(T.matmul(a, a)))
        tape.backward(loss)
        return a.grad

    assert np.array_equal(grads(), grads())


def test_no_tape_records_nothing():
    x = Tensor.param([1.0])
    y = T.scale(x, 2.0)
    assert y._tape is None

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mmt import tensor as T
from mmt.errors import ContractError, DimensionError, NonFiniteError
from mmt.tensor import Tape, Tensor, backward, custom_op, grad_check, no_tape


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def sq_sum(x):
    return T.sum_(T.mul(x, x))


def test_matmul_hand_cases():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(eye, m).data, m.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[2, 3\]"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)
    out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0
    row = np.array([0.5, -0.2, 1.3])
    direct = np.exp(row) / np.exp(row).sum()
    np.testing.assert_allclose(T.softmax_rows(Tensor(row[None])).data[0], direct, rtol=0, atol=1e-12)


def test_softmax_masked_entries_exactly_zero():
    x = Tensor([[0.3, 2.0, -1.0]])
    out = T.softmax_rows(x, np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_empty_row_rejected():
    with pytest.raises(DimensionError):
        T.softmax_rows(Tensor(np.zeros((2, 0))))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor([[5.0, 5, 5, 5]]), g, b).data, np.zeros((1, 4)))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-15)


@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10, allow_nan=False)))
def test_layer_norm_moments(x):
    x = x + np.arange(6) * 0.5  # keep row variance well above eps
    out = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_relu_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(T.relu(Tensor(-np.ones(3))).data, np.zeros(3))
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(T.relu(x))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_backward_trivial_gradients():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = Tensor([4.0, -5.0, 6.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones(3))
    with Tape() as tape:
        loss = T.sum_(T.mul(x, y))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, y.data)


def test_unreached_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        side = T.mul(unused, 2.0)
        loss = T.sum_(x)
    backward(loss, tape)
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])
    assert side.shape == (2,)


def test_backward_requires_scalar_on_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(ContractError):
        backward(y, tape)
    with pytest.raises(ContractError):
        backward(Tensor(1.0), tape)


def test_backward_is_bitwise_deterministic(rng):
    a, b = leaf(rng, 4, 5), leaf(rng, 5, 3)
    with Tape() as tape:
        loss = sq_sum(T.softmax_rows(T.matmul(a, b)))
    g1 = {id(k): v.copy() for k, v in backward(loss, tape).items()}
    g2 = {id(k): v.copy() for k, v in backward(loss, tape).items()}
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_tape():
            T.mul(x, 3.0)
        assert tape.nodes == []


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.exp(Tensor([1000.0]))


def test_path_sum_matches_brute_force_chain_rule():
    # y = a*b + a*c + b ; dy/da = b + c ; dy/db = a + 1 ; dy/dc = a
    a, b, c = (Tensor(v, requires_grad=True) for v in (0.7, -1.3, 2.1))
    with Tape() as tape:
        loss = T.add(T.add(T.mul(a, b), T.mul(a, c)), b)
    backward(loss, tape)
    assert a.grad == pytest.approx(b.data + c.data, abs=1e-15)
    assert b.grad == pytest.approx(a.data + 1.0, abs=1e-15)
    assert c.grad == pytest.approx(a.data, abs=1e-15)


# ---------------------------------------------------------------- gradient checks

def _checks(rng):
    x = lambda *s: leaf(rng, *s)
    pos = lambda *s: leaf(rng, *s, lo=0.5, hi=1.5)
    return {
        "add": (lambda a, b: sq_sum(T.add(a, b)), [x(3, 4), x(4)]),
        "sub": (lambda a, b: sq_sum(T.sub(a, b)), [x(3, 4), x(3, 1)]),
        "mul": (lambda a, b: sq_sum(T.mul(a, b)), [x(2, 3), x(2, 3)]),
        "div": (lambda a, b: sq_sum(T.div(a, b)), [x(2, 3), pos(2, 3)]),
        "relu": (lambda a: sq_sum(T.relu(a)), [x(4, 5)]),
        "sigmoid": (lambda a: sq_sum(T.sigmoid(a)), [x(3, 3)]),
        "tanh": (lambda a: sq_sum(T.tanh(a)), [x(3, 3)]),
        "exp": (lambda a: sq_sum(T.exp(a)), [x(3, 3)]),
        "sqrt": (lambda a: sq_sum(T.sqrt(a)), [pos(3, 3)]),
        "matmul": (lambda a, b: sq_sum(T.matmul(a, b)), [x(3, 4), x(4, 2)]),
        "matmul_batched": (lambda a, b: sq_sum(T.matmul(a, b)), [x(2, 3, 4), x(2, 4, 2)]),
        "matmul_flat": (lambda a, b: sq_sum(T.matmul(a, b)), [x(2, 3, 4), x(4, 2)]),
        "swap_last": (lambda a: sq_sum(T.mul(T.swap_last(a), np.arange(6.0).reshape(3, 2))), [x(2, 3)]),
        "transpose": (lambda a: sq_sum(T.mul(T.transpose(a, (2, 0, 1)), np.arange(24.0).reshape(4, 2, 3))), [x(2, 3, 4)]),
        "reshape": (lambda a: sq_sum(T.mul(T.reshape(a, (6,)), np.arange(6.0))), [x(2, 3)]),
        "take": (lambda a: sq_sum(T.take(a, np.array([0, 2, 0]))), [x(3, 2)]),
        "embedding": (lambda a: sq_sum(T.embedding(a, np.array([[1, 1], [0, 2]]))), [x(3, 2)]),
        "stack": (lambda a, b: sq_sum(T.mul(T.stack([a, b], axis=1), np.arange(12.0).reshape(3, 2, 2))), [x(3, 2), x(3, 2)]),
        "concat": (lambda a, b: sq_sum(T.mul(T.concat([a, b], axis=0), np.arange(10.0).reshape(5, 2))), [x(2, 2), x(3, 2)]),
        "sum": (lambda a: sq_sum(T.sum_(a, axis=1)), [x(3, 4)]),
        "mean": (lambda a: sq_sum(T.mean(a, axis=0, keepdims=True)), [x(3, 4)]),
        "softmax_rows": (lambda a: sq_sum(T.softmax_rows(a)), [x(3, 5)]),
        "softmax_masked": (lambda a: sq_sum(T.softmax_rows(a, np.tril(np.ones((3, 3), bool)))), [x(3, 3)]),
        "log_softmax": (lambda a: sq_sum(T.log_softmax(a)), [x(3, 5)]),
        "weighted_nll": (lambda a: T.weighted_nll(a, np.array([1, 0, 4]), np.array([0.5, 1.0, 2.0])), [x(3, 5)]),
        "layer_norm": (lambda a, g, b: sq_sum(T.mul(T.layer_norm(a, g, b), np.arange(32.0).reshape(4, 8))), [x(4, 8), x(8), x(8)]),
    }


@pytest.mark.parametrize("name", list(_checks(np.random.default_rng(0))))
def test_grad_check_every_op(name):
    f, inputs = _checks(np.random.default_rng(abs(hash(name)) % 2**32))[name]
    report = grad_check(f, inputs, step=1e-5, tol=1e-4)
    assert report.passed, f"{name}\n{report}"


def test_grad_check_identity_sum_is_exact():
    # at zero the perturbed sums are exactly +-step, so the quotient is exactly 1
    assert grad_check(lambda a: T.sum_(a), [Tensor(np.zeros((3, 3)))]).max_error == 0.0
    report = grad_check(lambda a: T.sum_(a), [Tensor(np.random.default_rng(3).uniform(-1, 1, (3, 3)))])
    assert report.max_error < 1e-9


def test_grad_check_catches_corrupted_backward(rng):
    def bad_square(x):
        return custom_op(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    report = grad_check(lambda a: T.sum_(bad_square(a)), [leaf(rng, 3)])
    assert not report.passed


@given(st.integers(0, 2**32 - 1))
def test_grad_check_property_matmul_softmax(seed):
    r = np.random.default_rng(seed)
    report = grad_check(lambda a, b: sq_sum(T.softmax_rows(T.matmul(a, b))), [leaf(r, 2, 3), leaf(r, 3, 4)])
    assert report.passed

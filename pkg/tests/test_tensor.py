import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rgbtrack import tensor as T
from rgbtrack.errors import ContractError, DimensionError
from rgbtrack.gradcheck import check_grads
from rgbtrack.tensor import Tape, Tensor, backward, parameter


def test_matmul_identity():
    x = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(4, 5\).*\(3, 2\)"):
        T.matmul(Tensor(np.zeros((4, 5))), Tensor(np.zeros((3, 2))))


def test_matmul_grad_matches_fd(rng):
    a = parameter(rng.normal(size=(4, 5)))
    b = parameter(rng.normal(size=(5, 3)))
    assert check_grads(lambda: T.matmul(a, b).sum(), [a, b]) < 1e-6


def test_batched_matmul_against_weight_matrix(rng):
    a = parameter(rng.normal(size=(2, 3, 4, 5)))
    w = parameter(rng.normal(size=(5, 3)))
    assert np.allclose(T.matmul(a, w).data, a.data @ w.data, atol=1e-14)
    assert check_grads(lambda: (T.matmul(a, w) * T.matmul(a, w)).sum(), [a, w]) < 1e-6


def test_softmax_examples():
    y = T.softmax_rows(Tensor(np.zeros((1, 4)))).data
    assert np.allclose(y, 0.25, atol=0, rtol=0)
    y = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(y)) and y[0, 0] == 1.0 and y[0, 1] < 1e-300


def test_softmax_high_precision_oracle():
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    z = sum(mpmath.exp(v) for v in xs)
    want = [float(mpmath.exp(v) / z) for v in xs]
    got = T.softmax_rows(Tensor([xs])).data[0]
    assert np.max(np.abs(got - want)) < 1e-12


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                     elements=st.floats(-50, 50, allow_nan=False))


@given(finite_rows, st.randoms(use_true_random=False))
def test_softmax_rows_normalised_and_permutation_equivariant(x, r):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-9, rtol=0)
    perm = list(range(x.shape[-1]))
    r.shuffle(perm)
    yp = T.softmax_rows(Tensor(x[:, perm])).data
    assert np.allclose(yp, y[:, perm], atol=1e-15)


def test_layer_norm_examples(rng):
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero, 1e-5).data
    assert np.array_equal(out, np.zeros((1, 4)))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-9)
    x = rng.normal(size=(2, 8)) * 3 + 1
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-5).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-9
    v = out.var(axis=1)
    assert np.all((v >= 1 - 1e-6) & (v <= 1))


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ContractError):
        T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)


def test_backward_examples():
    w = parameter([1.0, 2.0, 3.0])
    with Tape():
        loss = w.sum()
    backward(loss)
    assert np.array_equal(w.grad, [1, 1, 1])
    w = parameter([1.0, 2.0, 3.0])
    with Tape():
        loss = (w * w).sum()
    backward(loss)
    assert np.array_equal(w.grad, [2, 4, 6])


def test_backward_rejects_non_scalar():
    w = parameter([1.0, 2.0])
    with Tape():
        out = w * 2.0
    with pytest.raises(ContractError):
        backward(out)


def test_no_recording_outside_tape():
    w = parameter([1.0, 2.0])
    out = w * 3.0
    assert out._tape is None


def test_tape_order_is_reverse_of_recording():
    seen = []
    w = parameter([1.0])
    with Tape() as tape:
        a = w * 2.0
        b = a + 1.0
        c = b.sum()
    for i, rec in enumerate(tape.records):
        fn = rec[-1]
        rec_idx = i

        def wrapped(g, fn=fn, k=rec_idx):
            seen.append(k)
            return fn(g)
        tape.records[i] = rec[:-1] + (wrapped,)
    tape.backward(c)
    assert seen == sorted(seen, reverse=True)
    assert w.grad is not None


UNARY = {
    "exp": T.exp, "log": lambda t: T.log(T.exp(t) + 1.0), "sqrt": lambda t: T.sqrt(t * t + 1.0),
    "abs": T.tabs, "relu": T.relu, "sigmoid": T.sigmoid, "softplus": T.softplus, "gelu": T.gelu,
    "neg": T.neg, "softmax": T.softmax_rows, "swapaxes": lambda t: T.swapaxes(t, 0, 1),
    "reshape": lambda t: T.reshape(t, (12,)), "mean": lambda t: T.mean(t, axis=1, keepdims=True),
    "getitem": lambda t: t[1:, ::2], "sum_axis": lambda t: T.tsum(t, axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_grad(name, rng):
    x = parameter(rng.normal(size=(3, 4)) + 0.05)  # keep |x| off the kinks
    x.data[np.abs(x.data) < 0.05] += 0.2
    weights = rng.normal(size=UNARY[name](Tensor(x.data)).shape)
    assert check_grads(lambda: (UNARY[name](x) * weights).sum(), [x]) < 1e-4


BINARY = {
    "add": T.add, "sub": T.sub, "mul": T.mul, "div": lambda a, b: T.div(a, b * b + 1.0),
    "maximum": T.maximum, "minimum": T.minimum,
    "concat": lambda a, b: T.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_grad(name, rng):
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(1, 4)) if name != "concat" else rng.normal(size=(2, 4)))
    out_shape = BINARY[name](Tensor(a.data), Tensor(b.data)).shape
    weights = rng.normal(size=out_shape)
    assert check_grads(lambda: (BINARY[name](a, b) * weights).sum(), [a, b]) < 1e-4


def test_layer_norm_grad(rng):
    x = parameter(rng.normal(size=(3, 6)))
    g = parameter(rng.normal(size=6))
    b = parameter(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    assert check_grads(lambda: (T.layer_norm(x, g, b, 1e-5) * w).sum(), [x, g, b]) < 1e-4


def test_row_gather_scatter_grad(rng):
    x = parameter(rng.normal(size=(2, 5, 3)))
    idx = np.array([[0, 2, 4], [1, 3, 4]])
    w = rng.normal(size=(2, 7, 3))
    f = lambda: (T.scatter_rows(T.take_rows(x, idx), idx + 2, 7) * w).sum()
    assert check_grads(f, [x]) < 1e-4


def test_im2col_grad(rng):
    x = parameter(rng.normal(size=(1, 4, 5, 2)))
    w = rng.normal(size=(1, 4, 5, 18))
    assert check_grads(lambda: (T.im2col3x3(x) * w).sum(), [x]) < 1e-4


@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_ops_do_not_mutate_inputs(x):
    before = x.copy()
    t = parameter(x)
    with Tape():
        y = T.softmax_rows(T.gelu(t) * 2.0)
        z = T.layer_norm(y, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        loss = (z * z).sum()
    backward(loss)
    assert np.array_equal(t.data, before)


def test_trunc_normal_bounds_and_determinism():
    a = T.trunc_normal(T.make_rng(5), (1000,))
    b = T.trunc_normal(T.make_rng(5), (1000,))
    assert np.array_equal(a, b)
    assert np.max(np.abs(a)) <= 0.04
    assert 0.012 < a.std() < 0.02

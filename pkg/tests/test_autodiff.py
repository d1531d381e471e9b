import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warmseq import autodiff as ad
from warmseq.errors import DegenerateBatchError, ShapeError

from conftest import numeric_grad, rel_error


def leaf(rng, *shape):
    return ad.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def check(build, leaves, tol=1e-6):
    loss = build()
    ad.backward(loss)
    for t in leaves:
        num = numeric_grad(lambda: float(build().data), t.data)
        assert rel_error(t.grad, num) < tol


def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    out = ad.matmul(ad.Tensor(a, dtype=np.float64), ad.Tensor(b, dtype=np.float64)).data
    assert np.allclose(out, matmul_loops(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))


def test_gelu_close_to_erf_form():
    x = np.linspace(-4, 4, 41)
    exact = 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
    approx = ad.gelu(ad.Tensor(x, dtype=np.float64)).data
    assert np.abs(approx - exact).max() < 1e-3
    assert abs(ad.gelu(ad.Tensor(np.array([1.0]), dtype=np.float64)).data[0] - 0.8413) < 1e-3


def test_layer_norm_by_hand():
    x = np.array([[1.0, 2.0, 3.0, 6.0]])
    mean = 3.0
    var = ((x - mean) ** 2).mean()
    expected = (x - mean) / np.sqrt(var + 1e-12) * 2.0 + 0.5
    out = ad.layer_norm(ad.Tensor(x, dtype=np.float64), ad.Tensor(np.full(4, 2.0)), ad.Tensor(np.full(4, 0.5))).data
    assert np.allclose(out, expected)


def test_softmax_masked_gets_zero_weight():
    x = ad.Tensor(np.array([[1.0, 2.0, 3.0]]), dtype=np.float64)
    w = ad.softmax(ad.masked_fill(x, np.array([[True, False, True]]))).data
    assert w[0, 1] == 0.0
    assert np.isclose(w.sum(), 1.0)


@pytest.mark.parametrize("op", ["add", "mul", "sub", "div", "matmul", "gelu", "relu", "softmax",
                                "transpose", "reshape", "mean"])
def test_elementary_gradients(op, rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    b.data = np.abs(b.data) + 0.5
    w = leaf(rng, 4, 2)
    builds = {
        "add": lambda: ad.tensor_sum((a + b) * (a + b)),
        "mul": lambda: ad.tensor_sum(a * b),
        "sub": lambda: ad.tensor_sum((a - b) * a),
        "div": lambda: ad.tensor_sum((a / 3.0) * b),
        "matmul": lambda: ad.tensor_sum(ad.matmul(a, w) * ad.matmul(a, w)),
        "gelu": lambda: ad.tensor_sum(ad.gelu(a) * b),
        "relu": lambda: ad.tensor_sum(ad.relu(a) * b),
        "softmax": lambda: ad.tensor_sum(ad.softmax(a) * b),
        "transpose": lambda: ad.tensor_sum(ad.matmul(ad.transpose(a, (1, 0)), b)),
        "reshape": lambda: ad.tensor_sum(ad.reshape(a, (2, 6)) * ad.reshape(b, (2, 6))),
        "mean": lambda: ad.tensor_mean(a * a, axis=1).sum(),
    }
    used = {"matmul": [a, w], "mean": [a]}.get(op, [a, b])
    check(builds[op], used)


def test_layer_norm_and_cross_entropy_gradients(rng):
    x = leaf(rng, 2, 3, 5)
    gain, bias = leaf(rng, 5), leaf(rng, 5)
    targets = np.array([[1, 4, 0], [2, 2, 3]])
    mask = np.array([[True, True, False], [True, False, True]])
    check(lambda: ad.cross_entropy(ad.layer_norm(x, gain, bias), targets, mask), [x, gain, bias])


def test_take_rows_accumulates_repeated_ids(rng):
    table = leaf(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 2]])
    loss = ad.tensor_sum(ad.take_rows(table, ids))
    ad.backward(loss)
    counts = np.bincount(ids.ravel(), minlength=5)[:, None]
    assert np.array_equal(table.grad, np.broadcast_to(counts, (5, 3)).astype(float))


def test_broadcast_add_gradient(rng):
    a = leaf(rng, 2, 3, 4)
    bias = leaf(rng, 4)
    check(lambda: ad.tensor_sum((a + bias) * (a + bias)), [a, bias])


def test_batched_matmul_gradient(rng):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 4, 5)
    check(lambda: ad.tensor_sum(ad.gelu(ad.matmul(a, b))), [a, b])


def test_shared_node_gradient_accumulates():
    x = ad.Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    y = x * x
    ad.backward(ad.tensor_sum(y + y))
    assert np.allclose(x.grad, [12.0])


def test_cross_entropy_all_masked_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        ad.cross_entropy(ad.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))


def test_non_finite_output_raises():
    with pytest.raises(ad.NumericalError), np.errstate(over="ignore"):
        ad.Tensor(np.array([1e300]), dtype=np.float64) * 1e300


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        ad.backward(ad.Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_gradients_zero_for_disconnected():
    x = ad.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    z = ad.Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    gx, gz = ad.gradients(ad.tensor_sum(x * x), [x, z])
    assert np.array_equal(gz, np.zeros(3))
    assert np.allclose(gx, 2.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_gradient_property(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, n, k), leaf(rng, k, m)
    check(lambda: ad.tensor_sum(ad.matmul(a, b) * ad.matmul(a, b)), [a, b], tol=1e-5)
